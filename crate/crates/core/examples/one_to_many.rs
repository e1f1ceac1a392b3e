//! Ranked one-to-many assignment next to the other multi-positive rules,
//! on one simulated image.
//!
//!     cargo run --example one_to_many -- [seed]

use ssod::cost::{CostWeights, MatchScoreParams};
use ssod::geometry::iou;
use ssod::mining::filter_fixed;
use ssod::simulator::{generate, run_assigner, AblationSettings, AssignStrategy, Scenario};

fn main() -> ssod::error::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let ds = generate(&Scenario { seed, num_images: 8, ..Scenario::default() })?;
    let im = ds.images.iter().find(|im| !filter_fixed(&im.teacher, 0.4).is_empty()).expect("some image has pseudo labels");
    let targets = filter_fixed(&im.teacher, 0.4);
    println!("image {}: {} pseudo labels, {} proposals", im.index, targets.len(), im.proposals.len());

    let settings = AblationSettings::default();
    for s in AssignStrategy::ALL {
        let a = run_assigner(s, &targets, &im.proposals, &settings, &CostWeights::default(), &MatchScoreParams::default())?;
        for (t, props) in a.per_target().iter().enumerate() {
            let ious: Vec<String> =
                props.iter().take(6).map(|&p| format!("{:.2}", iou(&targets[t].bbox, im.proposals[p].bbox()))).collect();
            let more = if props.len() > 6 { " ..." } else { "" };
            println!("{:<8} target {t}: {:>2} positives, iou [{}{more}]", s.name(), props.len(), ious.join(" "));
        }
    }
    Ok(())
}
