//! Cost-based pseudo-label mining: Hungarian costs of the initial boxes are
//! pooled over a batch and split with a two-component mixture.
//!
//!     cargo run --example cost_mining -- [seed]

use ssod::cost::CostWeights;
use ssod::mining::{filter_mean_std, mine_cost_based_batch, EmConfig, MiningImage, PseudoLabel};
use ssod::simulator::{count_true_positives, generate, Scenario};

fn main() -> ssod::error::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let ds = generate(&Scenario { seed, num_images: 8, ..Scenario::default() })?;
    let initial: Vec<Vec<PseudoLabel>> = ds.images.iter().map(|im| filter_mean_std(&im.teacher)).collect();
    let batch: Vec<MiningImage<'_>> =
        ds.images.iter().zip(&initial).map(|(im, i)| MiningImage { initial: i, proposals: &im.proposals }).collect();
    let out = mine_cost_based_batch(&batch, &CostWeights::default(), &EmConfig::default())?;

    if let Some(fit) = &out.fit {
        println!(
            "reliable N({:.3}, {:.3}^2) w={:.2} | unreliable N({:.3}, {:.3}^2) | {} EM iterations",
            fit.mu_r, fit.sigma_r, fit.w_r, fit.mu_u, fit.sigma_u, fit.iterations
        );
    }
    println!("threshold {:?}, posterior boundary {:?}, fallback {}", out.threshold, out.posterior_threshold, out.fallback);
    let (mut before, mut after) = ((0, 0), (0, 0));
    for ((im, init), kept) in ds.images.iter().zip(&initial).zip(&out.kept) {
        before = (before.0 + count_true_positives(&im.gt, init), before.1 + init.len());
        after = (after.0 + count_true_positives(&im.gt, kept), after.1 + kept.len());
    }
    println!("initial: {}/{} true positives", before.0, before.1);
    println!("mined:   {}/{} true positives", after.0, after.1);
    Ok(())
}
