//! Single versus multiple positives: how close the proposals picked for a
//! noisy pseudo box come to the proposal picked for its true object.
//!
//!     cargo run --release --example assignment_quality -- [seed]

use ssod::cost::{CostWeights, MatchScoreParams};
use ssod::simulator::{eval_assignment_quality, eval_strategy_ablation, generate, AblationSettings, Scenario};

fn main() -> ssod::error::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let ds = generate(&Scenario { seed, ..Scenario::default() })?;
    let w = CostWeights::default();
    let params = MatchScoreParams::default();

    println!("{:>3} {:>6} {:>8} {:>8} {:>9}", "k", "boxes", "mean_i1", "mean_i2", "i2>=i1");
    for r in eval_assignment_quality(&ds, &[1, 5, 9, 13], 0.4, &w, &params)? {
        println!("{:>3} {:>6} {:>8.4} {:>8.4} {:>9.3}", r.k, r.num_boxes, r.mean_i1, r.mean_i2, r.frac_i2_ge_i1);
    }

    println!();
    println!("{:<8} {:>8} {:>9} {:>5} {:>7} {:>6} {:>8}", "assigner", "targets", "pos/tgt", "max", "zero", "cv", "pos_iou");
    for r in eval_strategy_ablation(&ds, 0.4, &AblationSettings::default(), &w, &params)? {
        println!(
            "{:<8} {:>8} {:>9.2} {:>5} {:>7.3} {:>6.2} {:>8.3}",
            r.strategy, r.num_targets, r.mean_positives, r.max_positives, r.zero_positive_frac, r.count_cv, r.mean_positive_iou
        );
    }
    Ok(())
}
