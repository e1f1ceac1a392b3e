//! Synthetic detection scenarios and the analyses run on them.
//!
//! Every image draws from its own ChaCha stream keyed by `(seed, index)`, so
//! results do not depend on how many worker threads generate or evaluate the
//! images.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{
    atss_assign, hungarian, max_iou_assign, one_to_many, rank_by_match_score, simota_assign, Assignment,
    MatchScoreTable, MaxIouConfig,
};
use crate::consistency::FeatureGrid;
use crate::cost::{build_cost_matrix, CostWeights, MatchScoreParams};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection};
use crate::mining::{
    filter_fixed, filter_mean_std, filter_topk, mine_cost_based_batch, EmConfig, MiningImage, PseudoLabel,
};

/// Mean teacher score as a function of IoU with the source box, plus spread.
///
/// A detection's score is drawn from
/// `Normal(base + slope * iou - |Normal(0, hardness_sd)|, sd)` and clamped to
/// `[0, 1]`. The hardness draw is per detection, so some well-localized boxes
/// still come out unconfident.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Calibration {
    pub base: f64,
    pub slope: f64,
    pub sd: f64,
    pub hardness_sd: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self { base: 0.05, slope: 0.6, sd: 0.08, hardness_sd: 0.2 }
    }
}

impl Calibration {
    /// A more confident teacher: `0.2 + 0.75 * iou` with sd 0.1 and no
    /// hardness term. Nearly every true positive clears a 0.4 threshold.
    pub fn confident() -> Self {
        Self { base: 0.2, slope: 0.75, sd: 0.1, hardness_sd: 0.0 }
    }

    /// Score equals IoU.
    pub fn exact() -> Self {
        Self { base: 0.0, slope: 1.0, sd: 0.0, hardness_sd: 0.0 }
    }

    fn sample(&self, u: f64, rng: &mut impl Rng) -> f64 {
        let hard = if self.hardness_sd > 0.0 { normal(rng, 0.0, self.hardness_sd).abs() } else { 0.0 };
        normal(rng, self.base + self.slope * u - hard, self.sd).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    /// Center jitter, as a fraction of box width/height.
    pub center_jitter_sigma: f64,
    /// Standard deviation of the log-scale jitter of width and height.
    pub scale_jitter_sigma: f64,
    pub calibration: Calibration,
    /// Expected spurious teacher boxes per image.
    pub false_positive_rate: f64,
    pub class_flip_prob: f64,
    /// Expected extra teacher boxes per ground-truth object.
    pub duplicate_rate: f64,
    /// The student view's box noise relative to the teacher view's.
    pub student_noise_mult: f64,
    /// Fraction of student proposals placed at random instead of near an
    /// object.
    pub background_fraction: f64,
    /// Upper bound of a student proposal's object-class score.
    pub student_score_cap: f64,
    /// Feature noise of the teacher view grid; the student view gets this
    /// times `student_noise_mult`.
    pub feature_noise: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            center_jitter_sigma: 0.15,
            scale_jitter_sigma: 0.25,
            calibration: Calibration::default(),
            false_positive_rate: 30.0,
            class_flip_prob: 0.05,
            duplicate_rate: 0.7,
            student_noise_mult: 1.3,
            background_fraction: 0.25,
            student_score_cap: 0.95,
            feature_noise: 0.05,
        }
    }
}

impl NoiseModel {
    /// Teacher and student reproduce the ground truth exactly, with score 1.
    pub fn noiseless() -> Self {
        Self {
            center_jitter_sigma: 0.0,
            scale_jitter_sigma: 0.0,
            calibration: Calibration::exact(),
            false_positive_rate: 0.0,
            class_flip_prob: 0.0,
            duplicate_rate: 0.0,
            student_noise_mult: 1.0,
            background_fraction: 0.0,
            student_score_cap: 1.0,
            feature_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            ("center_jitter_sigma", self.center_jitter_sigma),
            ("scale_jitter_sigma", self.scale_jitter_sigma),
            ("calibration.sd", self.calibration.sd),
            ("calibration.hardness_sd", self.calibration.hardness_sd),
            ("false_positive_rate", self.false_positive_rate),
            ("duplicate_rate", self.duplicate_rate),
            ("student_noise_mult", self.student_noise_mult),
            ("feature_noise", self.feature_noise),
        ];
        for (name, v) in sigmas {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(format!("noise.{name} must be finite and >= 0, got {v}")));
            }
        }
        let probs = [
            ("class_flip_prob", self.class_flip_prob),
            ("background_fraction", self.background_fraction),
            ("student_score_cap", self.student_score_cap),
        ];
        for (name, v) in probs {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(format!("noise.{name} must lie in [0, 1], got {v}")));
            }
        }
        if !self.calibration.base.is_finite() || !self.calibration.slope.is_finite() {
            return Err(Error::param("noise.calibration base and slope must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub seed: u64,
    pub num_images: usize,
    /// Inclusive `[min, max]` object count per image.
    pub boxes_per_image: [usize; 2],
    pub num_classes: usize,
    pub proposals_per_image: usize,
    pub noise: NoiseModel,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 0,
            num_images: 200,
            boxes_per_image: [1, 6],
            num_classes: 5,
            proposals_per_image: 60,
            noise: NoiseModel::default(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 || self.num_classes == 0 || self.proposals_per_image == 0 {
            return Err(Error::param("num_images, num_classes and proposals_per_image must be >= 1"));
        }
        let [lo, hi] = self.boxes_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::param(format!("boxes_per_image [{lo}, {hi}] must satisfy 1 <= min <= max")));
        }
        self.noise.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class_id: usize,
}

/// One synthetic image. Ground truth is hidden from the pipeline and used
/// only for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimImage {
    pub index: usize,
    pub gt: Vec<GtBox>,
    /// Teacher (weak view) detections.
    pub teacher: Vec<Detection>,
    /// Source object of each teacher detection, `None` for spurious boxes.
    pub teacher_source: Vec<Option<usize>>,
    /// Student (strong view) proposals.
    pub proposals: Vec<Detection>,
    pub proposal_source: Vec<Option<usize>>,
}

impl SimImage {
    pub fn gt_labels(&self) -> Vec<PseudoLabel> {
        self.gt.iter().map(|g| PseudoLabel::new(g.bbox, g.class_id, 1.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub scenario: Scenario,
    pub images: Vec<SimImage>,
}

/// The RNG stream of one image.
pub fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn normal(rng: &mut impl Rng, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean;
    }
    Normal::new(mean, sd).expect("sd checked finite and positive").sample(rng)
}

fn poisson(rng: &mut impl Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let draw: f64 = Poisson::new(lambda).expect("rate checked positive").sample(rng);
    draw as usize
}

fn random_box(rng: &mut impl Rng) -> BBox {
    let (lo, hi) = (0.05f64.ln(), 0.4f64.ln());
    let w = rng.random_range(lo..hi).exp();
    let h = rng.random_range(lo..hi).exp();
    let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
    BBox::from_corners(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Jittered copy of `b`, clipped to the unit square; redrawn until the
/// clipped box keeps a positive area.
fn jitter(rng: &mut impl Rng, b: &BBox, center_sigma: f64, scale_sigma: f64) -> BBox {
    if center_sigma == 0.0 && scale_sigma == 0.0 {
        return *b;
    }
    let [cx, cy, w, h] = b.to_center();
    loop {
        let ncx = cx + normal(rng, 0.0, center_sigma) * w;
        let ncy = cy + normal(rng, 0.0, center_sigma) * h;
        let nw = w * normal(rng, 0.0, scale_sigma).exp();
        let nh = h * normal(rng, 0.0, scale_sigma).exp();
        let clipped = BBox::from_corners(
            (ncx - nw / 2.0).max(0.0),
            (ncy - nh / 2.0).max(0.0),
            (ncx + nw / 2.0).min(1.0),
            (ncy + nh / 2.0).min(1.0),
        );
        if clipped.width() > 1e-6 && clipped.height() > 1e-6 {
            return clipped;
        }
    }
}

/// Keeps the labelled class the argmax of a one-hot score vector.
const MIN_TEACHER_SCORE: f64 = 1e-3;

fn generate_image(scn: &Scenario, index: usize) -> Result<SimImage> {
    let noise = &scn.noise;
    let nc = scn.num_classes;
    let mut rng = image_rng(scn.seed, index);
    let n_gt = rng.random_range(scn.boxes_per_image[0]..=scn.boxes_per_image[1]);
    let gt: Vec<GtBox> =
        (0..n_gt).map(|_| GtBox { bbox: random_box(&mut rng), class_id: rng.random_range(0..nc) }).collect();

    let mut teacher = Vec::new();
    let mut teacher_source = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        let copies = 1 + poisson(&mut rng, noise.duplicate_rate);
        for _ in 0..copies {
            let b = jitter(&mut rng, &g.bbox, noise.center_jitter_sigma, noise.scale_jitter_sigma);
            let s = noise.calibration.sample(iou(&b, &g.bbox), &mut rng).max(MIN_TEACHER_SCORE);
            let class = if rng.random::<f64>() < noise.class_flip_prob { rng.random_range(0..nc) } else { g.class_id };
            teacher.push(Detection::single(b, class, s, nc)?);
            teacher_source.push(Some(gi));
        }
    }
    for _ in 0..poisson(&mut rng, noise.false_positive_rate) {
        let b = random_box(&mut rng);
        let class = rng.random_range(0..nc);
        let cal = &noise.calibration;
        let s = normal(&mut rng, cal.base, cal.sd).clamp(MIN_TEACHER_SCORE, 1.0);
        teacher.push(Detection::single(b, class, s, nc)?);
        teacher_source.push(None);
    }

    // Dirichlet(1) share of the non-background proposals per object
    let shares: Vec<f64> = (0..n_gt).map(|_| Exp1.sample(&mut rng)).collect();
    let total: f64 = shares.iter().sum();
    let student_cal = Calibration { hardness_sd: 0.0, ..noise.calibration };
    let mut proposals = Vec::with_capacity(scn.proposals_per_image);
    let mut proposal_source = Vec::with_capacity(scn.proposals_per_image);
    for j in 0..scn.proposals_per_image {
        let mut scores: Vec<f64> = (0..nc).map(|_| rng.random_range(0.0..0.1)).collect();
        // the first proposals cover each object once
        let forced = (j < n_gt).then_some(j);
        if forced.is_none() && rng.random::<f64>() < noise.background_fraction {
            proposals.push(Detection::new(random_box(&mut rng), scores)?);
            proposal_source.push(None);
            continue;
        }
        let gi = forced.unwrap_or_else(|| {
            let mut pick = rng.random::<f64>() * total;
            for (i, s) in shares.iter().enumerate() {
                if pick < *s {
                    return i;
                }
                pick -= s;
            }
            n_gt - 1
        });
        let g = &gt[gi];
        let m = noise.student_noise_mult;
        let b = jitter(&mut rng, &g.bbox, noise.center_jitter_sigma * m, noise.scale_jitter_sigma * m);
        scores[g.class_id] = student_cal.sample(iou(&b, &g.bbox), &mut rng).min(noise.student_score_cap);
        proposals.push(Detection::new(b, scores)?);
        proposal_source.push(Some(gi));
    }

    Ok(SimImage { index, gt, teacher, teacher_source, proposals, proposal_source })
}

/// Samples the whole dataset.
pub fn generate(scn: &Scenario) -> Result<Dataset> {
    scn.validate()?;
    let images = (0..scn.num_images).into_par_iter().map(|i| generate_image(scn, i)).collect::<Result<_>>()?;
    Ok(Dataset { scenario: scn.clone(), images })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    /// Teacher input, lower noise.
    Weak,
    /// Student input.
    Strong,
}

/// Feature grid of one view: each cell holds the sum of the class codes of
/// the objects covering its center, plus Gaussian noise.
pub fn render_view(img: &SimImage, noise: &NoiseModel, view: View, channels: usize, size: usize, seed: u64) -> Result<FeatureGrid> {
    let sd = match view {
        View::Weak => noise.feature_noise,
        View::Strong => noise.feature_noise * noise.student_noise_mult,
    };
    let stream = 2 * img.index as u64 + u64::from(view == View::Strong);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    rng.set_stream(stream);
    let mut values = vec![0.0; channels * size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            for g in img.gt.iter().filter(|g| g.bbox.contains_strict(px, py)) {
                for c in 0..channels {
                    values[(c * size + y) * size + x] += ((g.class_id + 1) as f64 * (c + 1) as f64).cos();
                }
            }
        }
    }
    for v in values.iter_mut() {
        *v += normal(&mut rng, 0.0, sd);
    }
    FeatureGrid::new(channels, size, size, values)
}

/// Pseudo-label selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStrategy {
    Fixed(f64),
    TopK(usize),
    MeanStd,
    /// Mean+std boxes mined by batch-pooled matching cost.
    CostGmm,
}

impl FilterStrategy {
    pub fn name(&self) -> String {
        match self {
            Self::Fixed(t) => format!("fixed({t})"),
            Self::TopK(k) => format!("top_k({k})"),
            Self::MeanStd => "mean_std".into(),
            Self::CostGmm => "cost_gmm".into(),
        }
    }

    /// The four rows of the filtering comparison.
    pub fn standard(tau_s: f64, k: usize) -> Vec<Self> {
        vec![Self::Fixed(tau_s), Self::TopK(k), Self::MeanStd, Self::CostGmm]
    }
}

/// Settings shared by the filtering analyses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningSettings {
    /// Images per cost-pooling batch.
    pub batch_size: usize,
    pub top_k: usize,
    pub nms_thresh: f64,
    pub em: EmConfig,
}

impl Default for MiningSettings {
    fn default() -> Self {
        Self { batch_size: 8, top_k: 9, nms_thresh: 0.7, em: EmConfig::default() }
    }
}

impl MiningSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.top_k == 0 {
            return Err(Error::param("mining.batch_size and mining.top_k must be >= 1"));
        }
        if !(self.nms_thresh > 0.0 && self.nms_thresh <= 1.0) {
            return Err(Error::param(format!("mining.nms_thresh must lie in (0, 1], got {}", self.nms_thresh)));
        }
        self.em.validate()
    }
}

/// Applies `strategy` to every image's teacher detections.
pub fn apply_filter(
    ds: &Dataset,
    strategy: FilterStrategy,
    settings: &MiningSettings,
    w: &CostWeights,
) -> Result<Vec<Vec<PseudoLabel>>> {
    match strategy {
        FilterStrategy::Fixed(t) => Ok(ds.images.par_iter().map(|im| filter_fixed(&im.teacher, t)).collect()),
        FilterStrategy::TopK(k) => ds.images.par_iter().map(|im| filter_topk(&im.teacher, k)).collect(),
        FilterStrategy::MeanStd => Ok(ds.images.par_iter().map(|im| filter_mean_std(&im.teacher)).collect()),
        FilterStrategy::CostGmm => {
            let initial: Vec<Vec<PseudoLabel>> = ds.images.par_iter().map(|im| filter_mean_std(&im.teacher)).collect();
            let mut kept = Vec::with_capacity(ds.images.len());
            for (imgs, init) in ds.images.chunks(settings.batch_size).zip(initial.chunks(settings.batch_size)) {
                let batch: Vec<MiningImage<'_>> = imgs
                    .iter()
                    .zip(init)
                    .map(|(im, i)| MiningImage { initial: i, proposals: &im.proposals })
                    .collect();
                kept.extend(mine_cost_based_batch(&batch, w, &settings.em)?.kept);
            }
            Ok(kept)
        }
    }
}

/// True positives of one image: kept labels matched greedily by descending
/// confidence to unused same-class objects at IoU >= 0.5.
pub fn count_true_positives(gt: &[GtBox], kept: &[PseudoLabel]) -> usize {
    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.sort_by(|&a, &b| kept[b].confidence.total_cmp(&kept[a].confidence));
    let mut used = vec![false; gt.len()];
    let mut tp = 0;
    for i in order {
        let label = &kept[i];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt.iter().enumerate() {
            if used[gi] || g.class_id != label.class_id {
                continue;
            }
            let u = iou(&label.bbox, &g.bbox);
            if u >= 0.5 && best.is_none_or(|(_, bu)| u > bu) {
                best = Some((gi, u));
            }
        }
        if let Some((gi, _)) = best {
            used[gi] = true;
            tp += 1;
        }
    }
    tp
}

/// Precision/recall of one pseudo-label selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub strategy: String,
    pub precision: f64,
    pub recall: f64,
    pub kept: usize,
    pub true_positives: usize,
    pub num_gt: usize,
    /// Nothing was kept; precision is reported as 1.
    pub empty: bool,
}

impl FilterRow {
    pub fn from_counts(strategy: String, tp: usize, kept: usize, num_gt: usize) -> Self {
        let precision = if kept == 0 { 1.0 } else { tp as f64 / kept as f64 };
        let recall = if num_gt == 0 { 1.0 } else { tp as f64 / num_gt as f64 };
        Self { strategy, precision, recall, kept, true_positives: tp, num_gt, empty: kept == 0 }
    }
}

pub fn score_selection(ds: &Dataset, strategy: String, kept: &[Vec<PseudoLabel>]) -> FilterRow {
    let tp: usize = ds.images.iter().zip(kept).map(|(im, k)| count_true_positives(&im.gt, k)).sum();
    let n_kept = kept.iter().map(Vec::len).sum();
    let num_gt = ds.images.iter().map(|im| im.gt.len()).sum();
    FilterRow::from_counts(strategy, tp, n_kept, num_gt)
}

/// One row per strategy.
pub fn eval_filtering(
    ds: &Dataset,
    strategies: &[FilterStrategy],
    settings: &MiningSettings,
    w: &CostWeights,
) -> Result<Vec<FilterRow>> {
    strategies
        .iter()
        .map(|s| Ok(score_selection(ds, s.name(), &apply_filter(ds, *s, settings, w)?)))
        .collect()
}

/// Per-box comparison of single and multiple positives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualitySample {
    pub i1: f64,
    pub i2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub k: usize,
    pub num_boxes: usize,
    pub mean_i1: f64,
    pub mean_i2: f64,
    /// Fraction of boxes with `i2 >= i1`.
    pub frac_i2_ge_i1: f64,
}

/// Pseudo boxes of one image for the assignment analyses: teacher boxes above
/// `tau_s` whose source object is known, paired with that object.
fn sourced_pseudo(im: &SimImage, tau_s: f64) -> (Vec<PseudoLabel>, Vec<PseudoLabel>) {
    let mut pseudo = Vec::new();
    let mut truth = Vec::new();
    for (d, src) in im.teacher.iter().zip(&im.teacher_source) {
        if let (Some(gi), true) = (src, d.score() > tau_s) {
            pseudo.push(PseudoLabel::from_detection(d));
            let g = im.gt[*gi];
            truth.push(PseudoLabel::new(g.bbox, g.class_id, 1.0));
        }
    }
    (pseudo, truth)
}

fn o2o_proposals(targets: &[PseudoLabel], proposals: &[Detection], w: &CostWeights) -> Result<Vec<usize>> {
    let a = hungarian(&build_cost_matrix(targets, proposals, w)?)?;
    Ok(a.per_target().iter().map(|p| p[0]).collect())
}

/// Per pseudo box: `i1` is the IoU between the proposal matched one-to-one to
/// the pseudo box and the proposal matched one-to-one to its true object;
/// `i2` is the best IoU between any of the pseudo box's top-`k` proposals
/// (by matching score, before conflict resolution) and that same
/// true-object proposal.
pub fn assignment_quality_samples(
    ds: &Dataset,
    ks: &[usize],
    tau_s: f64,
    w: &CostWeights,
    params: &MatchScoreParams,
) -> Result<Vec<Vec<QualitySample>>> {
    let k_max = ks.iter().copied().max().unwrap_or(1);
    let per_image: Vec<Vec<Vec<QualitySample>>> = ds
        .images
        .par_iter()
        .map(|im| -> Result<Vec<Vec<QualitySample>>> {
            let (pseudo, truth) = sourced_pseudo(im, tau_s);
            if pseudo.is_empty() || pseudo.len() > im.proposals.len() {
                return Ok(vec![Vec::new(); ks.len()]);
            }
            let on_pseudo = o2o_proposals(&pseudo, &im.proposals, w)?;
            // one-to-one on the true objects themselves, then looked up per box
            let on_truth_gt = o2o_proposals(&im.gt_labels(), &im.proposals, w)?;
            let table = MatchScoreTable::compute(&pseudo, &im.proposals, params);
            let ranked = rank_by_match_score(&table, pseudo.len(), k_max);
            let sources: Vec<usize> = im.teacher_source.iter().zip(&im.teacher).filter(|(s, d)| s.is_some() && d.score() > tau_s).map(|(s, _)| s.unwrap()).collect();
            debug_assert_eq!(sources.len(), truth.len());
            Ok(ks
                .iter()
                .map(|&k| {
                    (0..pseudo.len())
                        .map(|t| {
                            let anchor = im.proposals[on_truth_gt[sources[t]]].bbox();
                            let i1 = iou(im.proposals[on_pseudo[t]].bbox(), anchor);
                            let i2 = ranked[t]
                                .iter()
                                .take(k)
                                .map(|&p| iou(im.proposals[p].bbox(), anchor))
                                .fold(0.0, f64::max);
                            QualitySample { i1, i2 }
                        })
                        .collect()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..ks.len()).map(|ki| per_image.iter().flat_map(|im| im[ki].iter().copied()).collect()).collect())
}

/// One row per `k`.
pub fn eval_assignment_quality(
    ds: &Dataset,
    ks: &[usize],
    tau_s: f64,
    w: &CostWeights,
    params: &MatchScoreParams,
) -> Result<Vec<QualityRow>> {
    if ks.contains(&0) {
        return Err(Error::param("k must be >= 1"));
    }
    let samples = assignment_quality_samples(ds, ks, tau_s, w, params)?;
    Ok(ks
        .iter()
        .zip(samples)
        .map(|(&k, s)| {
            let n = s.len();
            let mean = |f: fn(&QualitySample) -> f64| if n == 0 { 0.0 } else { s.iter().map(f).sum::<f64>() / n as f64 };
            QualityRow {
                k,
                num_boxes: n,
                mean_i1: mean(|q| q.i1),
                mean_i2: mean(|q| q.i2),
                frac_i2_ge_i1: if n == 0 { 1.0 } else { s.iter().filter(|q| q.i2 >= q.i1).count() as f64 / n as f64 },
            }
        })
        .collect())
}

/// One-to-many assignment rule compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignStrategy {
    MaxIou,
    Atss,
    SimOta,
    /// Top-k by matching score with conflicts resolved.
    Ranked,
}

impl AssignStrategy {
    pub const ALL: [Self; 4] = [Self::MaxIou, Self::Atss, Self::SimOta, Self::Ranked];

    pub fn name(&self) -> &'static str {
        match self {
            Self::MaxIou => "max_iou",
            Self::Atss => "atss",
            Self::SimOta => "simota",
            Self::Ranked => "ranked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSettings {
    pub k: usize,
    pub atss_candidates: usize,
    pub max_iou: MaxIouConfig,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self { k: 13, atss_candidates: 9, max_iou: MaxIouConfig::default() }
    }
}

pub fn run_assigner(
    strategy: AssignStrategy,
    targets: &[PseudoLabel],
    proposals: &[Detection],
    settings: &AblationSettings,
    w: &CostWeights,
    params: &MatchScoreParams,
) -> Result<Assignment> {
    Ok(match strategy {
        AssignStrategy::MaxIou => max_iou_assign(targets, proposals, &settings.max_iou),
        AssignStrategy::Atss => atss_assign(targets, proposals, settings.atss_candidates),
        AssignStrategy::SimOta => simota_assign(targets, proposals, w),
        AssignStrategy::Ranked => one_to_many(targets, proposals, params, settings.k, true)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub num_targets: usize,
    pub positives: usize,
    pub mean_positives: f64,
    pub max_positives: usize,
    /// Fraction of targets without any positive.
    pub zero_positive_frac: f64,
    /// Coefficient of variation of the per-target positive counts.
    pub count_cv: f64,
    /// Mean IoU between positives and their target.
    pub mean_positive_iou: f64,
}

/// Positive-count statistics of each assigner over the `tau_s` pseudo labels.
pub fn eval_strategy_ablation(
    ds: &Dataset,
    tau_s: f64,
    settings: &AblationSettings,
    w: &CostWeights,
    params: &MatchScoreParams,
) -> Result<Vec<AblationRow>> {
    let pseudo: Vec<Vec<PseudoLabel>> = ds.images.par_iter().map(|im| filter_fixed(&im.teacher, tau_s)).collect();
    AssignStrategy::ALL
        .iter()
        .map(|&s| {
            let per_image: Vec<(Vec<usize>, f64)> = ds
                .images
                .par_iter()
                .zip(&pseudo)
                .map(|(im, targets)| -> Result<(Vec<usize>, f64)> {
                    if targets.is_empty() {
                        return Ok((Vec::new(), 0.0));
                    }
                    let a = run_assigner(s, targets, &im.proposals, settings, w, params)?;
                    let iou_sum = a.pairs().map(|(t, p)| iou(&targets[t].bbox, im.proposals[p].bbox())).sum();
                    Ok((a.per_target().iter().map(Vec::len).collect(), iou_sum))
                })
                .collect::<Result<_>>()?;
            let counts: Vec<usize> = per_image.iter().flat_map(|(c, _)| c.iter().copied()).collect();
            let iou_sum: f64 = per_image.iter().map(|(_, s)| s).sum();
            let n = counts.len();
            let positives: usize = counts.iter().sum();
            let mean = if n == 0 { 0.0 } else { positives as f64 / n as f64 };
            let var = if n == 0 { 0.0 } else { counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n as f64 };
            Ok(AblationRow {
                strategy: s.name().into(),
                num_targets: n,
                positives,
                mean_positives: mean,
                max_positives: counts.iter().copied().max().unwrap_or(0),
                zero_positive_frac: if n == 0 { 0.0 } else { counts.iter().filter(|&&c| c == 0).count() as f64 / n as f64 },
                count_cv: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
                mean_positive_iou: if positives == 0 { 0.0 } else { iou_sum / positives as f64 },
            })
        })
        .collect()
}
