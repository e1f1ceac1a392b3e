//! Reads a prediction dump and compares how many boxes each filter keeps.
//!
//!     cargo run --example mine_predictions -- [predictions.jsonl] [proposals.jsonl]

use ssod::cli::{mine_groups, MineStrategy};
use ssod::config::RunConfig;
use ssod::ingest::ingest_predictions;

fn main() -> ssod::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let fixtures = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");
    let preds = args.next().unwrap_or_else(|| format!("{fixtures}/predictions.jsonl"));
    let props = args.next().unwrap_or_else(|| format!("{fixtures}/proposals.jsonl"));

    let preds = ingest_predictions(preds, false)?;
    let props = ingest_predictions(props, false)?;
    println!("{} records in {} images, {} skipped", preds.total, preds.groups.len(), preds.skipped.len());
    let cfg = RunConfig::default();
    for s in [MineStrategy::Fixed, MineStrategy::Topk, MineStrategy::MeanStd, MineStrategy::Gmm] {
        let kept = mine_groups(&preds, Some(&props), s, &cfg)?;
        println!("{s:?}: kept {}", kept.iter().map(Vec::len).sum::<usize>());
    }
    Ok(())
}
