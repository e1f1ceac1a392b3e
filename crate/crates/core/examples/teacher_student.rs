//! A short semi-supervised run: losses, pseudo-label counts and the
//! teacher/student gap per step, across the stage switch.
//!
//!     cargo run --release --example teacher_student -- [steps]

use ssod::config::RunConfig;
use ssod::simulator::{generate, Scenario};
use ssod::teacher_student::{run_pipeline, StageConfig};

fn main() -> ssod::error::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let cfg = RunConfig {
        scenario: Scenario { num_images: 40, ..Scenario::default() },
        stage: StageConfig::with_total(steps),
        ..RunConfig::default()
    };
    let ds = generate(&cfg.scenario)?;
    println!("{:>4} {:<12} {:>8} {:>8} {:>8} {:>8} {:>5} {:>5} {:>9}", "t", "stage", "sup", "unsup", "cons", "total", "cls", "cons", "gap");
    for r in run_pipeline(&ds, &cfg, steps)? {
        println!(
            "{:>4} {:<12} {:>8.3} {:>8.3} {:>8.5} {:>8.3} {:>5} {:>5} {:>9.2e}",
            r.t,
            format!("{:?}", r.stage),
            r.sup.total,
            r.unsup.total,
            r.consistency,
            r.total,
            r.pseudo_cls,
            r.pseudo_consistency,
            r.teacher_student_gap
        );
    }
    Ok(())
}
