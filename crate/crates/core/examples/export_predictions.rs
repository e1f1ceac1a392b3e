//! Dumps a simulated dataset as detector-style prediction files, the input
//! format of `ssod mine` and `ssod assign`.
//!
//!     cargo run --example export_predictions -- <out_dir> [seed] [images]

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use ssod::ingest::{write_detections, write_labels};
use ssod::simulator::{generate, Scenario};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().ok_or("usage: export_predictions <out_dir> [seed] [images]")?);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let num_images = args.next().map(|s| s.parse()).transpose()?.unwrap_or(16);
    let ds = generate(&Scenario { seed, num_images, ..Scenario::default() })?;

    std::fs::create_dir_all(&out)?;
    let mut preds = BufWriter::new(File::create(out.join("predictions.jsonl"))?);
    let mut props = BufWriter::new(File::create(out.join("proposals.jsonl"))?);
    let mut gt = BufWriter::new(File::create(out.join("gt.jsonl"))?);
    for im in &ds.images {
        let id = format!("img_{:04}", im.index);
        write_detections(&mut preds, &id, WIDTH, HEIGHT, &im.teacher)?;
        write_detections(&mut props, &id, WIDTH, HEIGHT, &im.proposals)?;
        write_labels(&mut gt, &id, WIDTH, HEIGHT, &im.gt_labels())?;
    }
    println!("wrote {} images to {}", ds.images.len(), out.display());
    Ok(())
}
