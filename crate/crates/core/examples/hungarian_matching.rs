//! One-to-one matching of pseudo labels to proposals by the weighted
//! classification + GIoU + L1 cost.
//!
//!     cargo run --example hungarian_matching

use ssod::assignment::hungarian;
use ssod::cost::{build_cost_matrix, CostMatrix, CostWeights};
use ssod::geometry::{BBox, Detection};
use ssod::mining::PseudoLabel;

fn main() -> ssod::error::Result<()> {
    let c = CostMatrix::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]])?;
    let a = hungarian(&c)?;
    println!("toy matrix: pairs {:?}, total {}", a.pairs().collect::<Vec<_>>(), c.total(a.pairs()));

    let targets = vec![
        PseudoLabel::new(BBox::new(0.1, 0.1, 0.4, 0.4)?, 0, 0.9),
        PseudoLabel::new(BBox::new(0.5, 0.5, 0.9, 0.8)?, 1, 0.7),
    ];
    let proposals = vec![
        Detection::new(BBox::new(0.52, 0.48, 0.88, 0.82)?, vec![0.1, 0.6])?,
        Detection::new(BBox::new(0.12, 0.1, 0.42, 0.38)?, vec![0.8, 0.1])?,
        Detection::new(BBox::new(0.0, 0.0, 0.3, 0.3)?, vec![0.5, 0.2])?,
    ];
    let costs = build_cost_matrix(&targets, &proposals, &CostWeights::default())?;
    for t in 0..costs.num_targets() {
        let row: Vec<String> = costs.row(t).iter().map(|v| format!("{v:+.3}")).collect();
        println!("target {t} costs [{}]", row.join(", "));
    }
    for (t, p) in hungarian(&costs)?.pairs() {
        println!("target {t} -> proposal {p} (cost {:.3})", costs.get(t, p));
    }
    Ok(())
}
