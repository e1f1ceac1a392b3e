//! Cross-view query consistency with the toy decoder, and a check that the
//! attention mask hides the extra queries from the matching queries.
//!
//!     cargo run --example query_consistency

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssod::consistency::{
    build_attention_mask, consistency_loss, cross_view_decode, toy_decode, ConsistencyModel, DecoderConfig,
    FeatureGrid, Matrix, QuerySet, RoiConfig, ViewInputs,
};
use ssod::geometry::BBox;

fn main() -> ssod::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = DecoderConfig::default();
    let roi = RoiConfig::default();
    let teacher = ConsistencyModel::random(&cfg, &roi, 6, &mut rng)?;
    let student = teacher.clone();

    let view = |rng: &mut ChaCha8Rng| ViewInputs {
        features: FeatureGrid::random(cfg.memory_channels, 16, 16, rng),
        queries: teacher.queries.clone(),
        memory: FeatureGrid::random(cfg.memory_channels, 8, 8, rng),
    };
    let (weak, strong) = (view(&mut rng), view(&mut rng));
    let boxes = [BBox::new(0.1, 0.2, 0.4, 0.6)?, BBox::new(0.5, 0.5, 0.9, 0.95)?];
    let out = cross_view_decode(&weak, &strong, &teacher, &student, &boxes, &roi)?;
    let loss = consistency_loss(&out.o_hat_s, &out.o_hat_t)?;
    println!("consistency loss {:.6} over {} boxes", loss.value, boxes.len());

    let alone = QuerySet::attach(&teacher.queries, &Matrix::zeros(0, cfg.dim))?;
    let with = QuerySet::attach(&teacher.queries, &out.o_hat_s)?;
    let mask = build_attention_mask(&with.groups);
    println!("mask blocks {} of {} query pairs", mask.num_blocked(), mask.len() * mask.len());
    let a = toy_decode(&alone, &weak.memory, &build_attention_mask(&alone.groups), &teacher.decoder)?;
    let b = toy_decode(&with, &weak.memory, &mask, &teacher.decoder)?;
    println!("matching outputs unchanged: {}", a == b.slice_rows(0, teacher.queries.rows()));
    Ok(())
}
