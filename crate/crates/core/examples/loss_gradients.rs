//! Both loss flavors on one image, with a finite-difference spot check of
//! the analytic gradient.
//!
//!     cargo run --example loss_gradients

use ssod::assignment::{hungarian, one_to_many};
use ssod::cost::{build_cost_matrix, CostWeights, MatchScoreParams};
use ssod::geometry::{BBox, Detection};
use ssod::losses::{flatten_proposals, o2m_losses, o2o_losses, unflatten_proposals, O2mLossConfig};
use ssod::mining::PseudoLabel;

fn main() -> ssod::error::Result<()> {
    let targets = vec![PseudoLabel::new(BBox::new(0.2, 0.2, 0.5, 0.6)?, 1, 0.8)];
    let proposals = vec![
        Detection::new(BBox::new(0.22, 0.18, 0.53, 0.57)?, vec![0.2, 0.7])?,
        Detection::new(BBox::new(0.15, 0.25, 0.45, 0.65)?, vec![0.3, 0.4])?,
        Detection::new(BBox::new(0.6, 0.6, 0.9, 0.9)?, vec![0.5, 0.1])?,
    ];
    let w = CostWeights::default();
    let params = MatchScoreParams::default();

    let a = one_to_many(&targets, &proposals, &params, 2, true)?;
    let l = o2m_losses(&a, &proposals, &targets, &params, &O2mLossConfig::default())?;
    println!("one-to-many: cls {:.4} giou {:.4} l1 {:.4} total {:.4}", l.cls, l.reg_giou, l.reg_l1, l.total);

    let a = hungarian(&build_cost_matrix(&targets, &proposals, &w)?)?;
    let l = o2o_losses(&a, &proposals, &targets, &w)?;
    println!("one-to-one:  cls {:.4} giou {:.4} l1 {:.4} total {:.4}", l.cls, l.reg_giou, l.reg_l1, l.total);

    let x = flatten_proposals(&proposals);
    let grad = l.grads.expect("losses carry gradients");
    let f = |x: &[f64]| o2o_losses(&a, &unflatten_proposals(x, 2).unwrap(), &targets, &w).unwrap().total;
    println!("{:>5} {:>12} {:>12}", "entry", "analytic", "central fd");
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += 1e-5;
        xm[i] -= 1e-5;
        println!("{i:>5} {:>12.6} {:>12.6}", grad[i], (f(&xp) - f(&xm)) / 2e-5);
    }
    Ok(())
}
