//! Compares pseudo-label filters on a synthetic scenario.
//!
//!     cargo run --release --example filtering_strategies -- [seed] [images]

use ssod::cost::CostWeights;
use ssod::simulator::{eval_filtering, generate, FilterStrategy, MiningSettings, Scenario};

fn main() -> ssod::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let num_images = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let ds = generate(&Scenario { seed, num_images, ..Scenario::default() })?;

    let rows = eval_filtering(
        &ds,
        &FilterStrategy::standard(0.4, 9),
        &MiningSettings::default(),
        &CostWeights::default(),
    )?;
    println!("{:<12} {:>9} {:>7} {:>6}", "strategy", "precision", "recall", "kept");
    for r in rows {
        println!("{:<12} {:>9.3} {:>7.3} {:>6}", r.strategy, r.precision, r.recall, r.kept);
    }
    Ok(())
}
