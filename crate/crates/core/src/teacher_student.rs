//! EMA teacher, stage schedule and the semi-supervised training step.
//!
//! No optimizer runs here. The student's parameters drift by a small seeded
//! perturbation each step, the teacher follows by EMA, and the step computes
//! every loss the student would be trained on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, one_to_many, Assignment, MatchMode};
use crate::config::RunConfig;
use crate::consistency::{consistency_loss, cross_view_decode, ConsistencyModel, DecoderConfig, RoiConfig, ViewInputs};
use crate::cost::build_cost_matrix;
use crate::error::{Error, Result};
use crate::geometry::{nms, Detection};
use crate::losses::{o2m_losses, o2o_losses, stage_for, total_loss, LossBreakdown};
use crate::mining::{filter_fixed, filter_mean_std, mine_cost_based_batch, MiningImage, PseudoLabel};
use crate::simulator::{count_true_positives, render_view, Dataset, SimImage, View};

/// Flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("parameter vector has non-finite entries"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Euclidean distance.
    pub fn distance(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

/// `momentum * teacher + (1 - momentum) * student`, elementwise.
pub fn ema_update(teacher: &ParamVector, student: &ParamVector, momentum: f64) -> Result<ParamVector> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::param(format!("EMA momentum must lie in [0, 1), got {momentum}")));
    }
    if teacher.len() != student.len() {
        return Err(Error::ShapeMismatch(format!("teacher {} vs student {} parameters", teacher.len(), student.len())));
    }
    let values = teacher.values.iter().zip(&student.values).map(|(t, s)| momentum * t + (1.0 - momentum) * s).collect();
    Ok(ParamVector { values })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageConfigRaw {
    t1: Option<u64>,
    total_iters: Option<u64>,
    tau_s: Option<f64>,
    w_u: Option<f64>,
    w_c: Option<f64>,
    ema_momentum: Option<f64>,
    labeled_per_batch: Option<usize>,
    unlabeled_per_batch: Option<usize>,
}

/// Schedule and weights of the semi-supervised objective. `t1` defaults to
/// half of `total_iters`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StageConfigRaw")]
pub struct StageConfig {
    pub t1: u64,
    pub total_iters: u64,
    pub tau_s: f64,
    pub w_u: f64,
    pub w_c: f64,
    pub ema_momentum: f64,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::with_total(120_000)
    }
}

impl TryFrom<StageConfigRaw> for StageConfig {
    type Error = String;

    fn try_from(raw: StageConfigRaw) -> std::result::Result<Self, String> {
        let d = Self::with_total(raw.total_iters.unwrap_or(120_000));
        Ok(Self {
            t1: raw.t1.unwrap_or(d.t1),
            total_iters: d.total_iters,
            tau_s: raw.tau_s.unwrap_or(d.tau_s),
            w_u: raw.w_u.unwrap_or(d.w_u),
            w_c: raw.w_c.unwrap_or(d.w_c),
            ema_momentum: raw.ema_momentum.unwrap_or(d.ema_momentum),
            labeled_per_batch: raw.labeled_per_batch.unwrap_or(d.labeled_per_batch),
            unlabeled_per_batch: raw.unlabeled_per_batch.unwrap_or(d.unlabeled_per_batch),
        })
    }
}

impl StageConfig {
    /// Defaults for a run of `total_iters` iterations.
    pub fn with_total(total_iters: u64) -> Self {
        Self {
            t1: total_iters / 2,
            total_iters,
            tau_s: 0.4,
            w_u: 4.0,
            w_c: 1.0,
            ema_momentum: 0.999,
            labeled_per_batch: 1,
            unlabeled_per_batch: 4,
        }
    }

    /// Checks ranges; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Err(Error::Config { key: format!("stage.{key}"), line: None, message });
        if self.t1 == 0 || self.t1 > self.total_iters {
            return bad("t1", format!("must satisfy 0 < t1 <= total_iters ({}), got {}", self.total_iters, self.t1));
        }
        if !(0.0..=1.0).contains(&self.tau_s) {
            return bad("tau_s", format!("must lie in [0, 1], got {}", self.tau_s));
        }
        if !(self.w_u.is_finite() && self.w_u >= 0.0) {
            return bad("w_u", format!("must be finite and >= 0, got {}", self.w_u));
        }
        if !(self.w_c.is_finite() && self.w_c >= 0.0) {
            return bad("w_c", format!("must be finite and >= 0, got {}", self.w_c));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad("ema_momentum", format!("must lie in [0, 1), got {}", self.ema_momentum));
        }
        if self.unlabeled_per_batch == 0 && self.labeled_per_batch == 0 {
            return bad("labeled_per_batch", "a batch needs at least one image".into());
        }
        Ok(())
    }
}

/// One-to-many while `t <= t1`.
pub fn stage_of(t: u64, cfg: &StageConfig) -> MatchMode {
    stage_for(t, cfg.t1)
}

/// Toy-decoder settings of the consistency branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencySettings {
    pub decoder: DecoderConfig,
    pub roi: RoiConfig,
    pub num_queries: usize,
    /// Side length of the rendered feature grids.
    pub grid_size: usize,
    /// Per-step standard deviation of the student parameter drift.
    pub student_drift: f64,
}

impl Default for ConsistencySettings {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig::default(),
            roi: RoiConfig::default(),
            num_queries: 8,
            grid_size: 16,
            student_drift: 1e-3,
        }
    }
}

impl ConsistencySettings {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if self.roi.out_h == 0 || self.roi.out_w == 0 || self.roi.sampling == 0 || self.grid_size == 0 {
            return Err(Error::param("roi sizes, sampling and grid_size must be >= 1"));
        }
        if !(self.student_drift.is_finite() && self.student_drift >= 0.0) {
            return Err(Error::param("consistency.student_drift must be >= 0"));
        }
        Ok(())
    }
}

/// Images of one training step.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub labeled: Vec<&'a SimImage>,
    pub unlabeled: Vec<&'a SimImage>,
}

impl<'a> Batch<'a> {
    /// The `step`-th batch (0-based). Every fifth image of the dataset is
    /// treated as labeled, the rest as unlabeled; both pools are cycled.
    pub fn at(ds: &'a Dataset, step: u64, cfg: &StageConfig) -> Self {
        let (labeled, unlabeled): (Vec<&SimImage>, Vec<&SimImage>) = ds.images.iter().partition(|im| im.index % 5 == 0);
        let take = |pool: &[&'a SimImage], n: usize| -> Vec<&'a SimImage> {
            if pool.is_empty() {
                return Vec::new();
            }
            (0..n).map(|i| pool[(step as usize * n + i) % pool.len()]).collect()
        };
        Self { labeled: take(&labeled, cfg.labeled_per_batch), unlabeled: take(&unlabeled, cfg.unlabeled_per_batch) }
    }
}

/// Teacher and student state carried across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineState {
    /// Completed iterations.
    pub t: u64,
    pub seed: u64,
    pub teacher: ConsistencyModel,
    pub student: ConsistencyModel,
}

impl PipelineState {
    /// Teacher starts as a copy of the student.
    pub fn new(settings: &ConsistencySettings, seed: u64) -> Result<Self> {
        settings.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let student = ConsistencyModel::random(&settings.decoder, &settings.roi, settings.num_queries, &mut rng)?;
        Ok(Self { t: 0, seed, teacher: student.clone(), student })
    }
}

/// Diagnostics of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub t: u64,
    pub stage: MatchMode,
    pub sup: LossBreakdown,
    pub unsup: LossBreakdown,
    pub consistency: f64,
    pub total: f64,
    /// Pseudo labels feeding classification and regression.
    pub pseudo_cls: usize,
    /// Mined pseudo labels feeding the consistency term.
    pub pseudo_consistency: usize,
    pub cls_precision: f64,
    pub cls_recall: f64,
    pub consistency_precision: f64,
    pub consistency_recall: f64,
    pub mining_threshold: Option<f64>,
    pub mining_fallback: bool,
    pub teacher_student_gap: f64,
}

fn assign(stage: MatchMode, targets: &[PseudoLabel], proposals: &[Detection], cfg: &RunConfig) -> Result<Assignment> {
    match stage {
        MatchMode::OneToMany => one_to_many(targets, proposals, &cfg.match_score, cfg.assign.k, true),
        MatchMode::OneToOne => hungarian(&build_cost_matrix(targets, proposals, &cfg.cost)?),
    }
}

/// Stage-appropriate detection losses of one image; zero without targets.
pub fn image_losses(stage: MatchMode, targets: &[PseudoLabel], proposals: &[Detection], cfg: &RunConfig) -> Result<LossBreakdown> {
    if targets.is_empty() || proposals.is_empty() {
        return Ok(LossBreakdown::zero(stage));
    }
    let a = assign(stage, targets, proposals, cfg)?;
    match stage {
        MatchMode::OneToMany => o2m_losses(&a, proposals, targets, &cfg.match_score, &cfg.loss),
        MatchMode::OneToOne => o2o_losses(&a, proposals, targets, &cfg.cost),
    }
}

fn sum_losses(stage: MatchMode, parts: Vec<LossBreakdown>) -> Result<LossBreakdown> {
    parts.iter().try_fold(LossBreakdown::zero(stage), |acc, p| acc.add(p))
}

/// Teacher output after duplicate suppression.
pub fn teacher_output(im: &SimImage, cfg: &RunConfig) -> Result<Vec<Detection>> {
    nms(&im.teacher, cfg.mining.nms_thresh, true)
}

/// Pseudo labels for classification and regression: confident teacher boxes.
pub fn cls_reg_labels(dets: &[Detection], cfg: &RunConfig) -> Vec<PseudoLabel> {
    filter_fixed(dets, cfg.stage.tau_s)
}

fn precision_recall(images: &[&SimImage], labels: &[Vec<PseudoLabel>]) -> (f64, f64) {
    let tp: usize = images.iter().zip(labels).map(|(im, l)| count_true_positives(&im.gt, l)).sum();
    let kept: usize = labels.iter().map(Vec::len).sum();
    let gt: usize = images.iter().map(|im| im.gt.len()).sum();
    let p = if kept == 0 { 1.0 } else { tp as f64 / kept as f64 };
    let r = if gt == 0 { 1.0 } else { tp as f64 / gt as f64 };
    (p, r)
}

/// One full iteration: pseudo labels from the teacher, stage-dependent
/// assignment and losses, the consistency term on mined boxes, and the EMA
/// update.
pub fn semi_step(state: &mut PipelineState, batch: &Batch<'_>, cfg: &RunConfig) -> Result<StepReport> {
    let t = state.t + 1;
    let stage = stage_of(t, &cfg.stage);

    let sup_parts = batch
        .labeled
        .par_iter()
        .map(|im| image_losses(stage, &im.gt_labels(), &im.proposals, cfg))
        .collect::<Result<Vec<_>>>()?;
    let sup = sum_losses(stage, sup_parts)?;

    let teacher_dets: Vec<Vec<Detection>> =
        batch.unlabeled.par_iter().map(|im| teacher_output(im, cfg)).collect::<Result<_>>()?;

    // confident boxes train classification and regression
    let cls_labels: Vec<Vec<PseudoLabel>> = teacher_dets.iter().map(|d| cls_reg_labels(d, cfg)).collect();
    let unsup_parts = batch
        .unlabeled
        .par_iter()
        .zip(&cls_labels)
        .map(|(im, labels)| image_losses(stage, labels, &im.proposals, cfg))
        .collect::<Result<Vec<_>>>()?;
    let unsup = sum_losses(stage, unsup_parts)?;

    // mined boxes only feed the consistency term
    let initial: Vec<Vec<PseudoLabel>> = teacher_dets.iter().map(|d| filter_mean_std(d)).collect();
    let mining_batch: Vec<MiningImage<'_>> = batch
        .unlabeled
        .iter()
        .zip(&initial)
        .map(|(im, init)| MiningImage { initial: init, proposals: &im.proposals })
        .collect();
    let mined = mine_cost_based_batch(&mining_batch, &cfg.cost, &cfg.mining.em)?;

    let cs = &cfg.consistency;
    let channels = cs.decoder.memory_channels;
    let per_image: Vec<Option<f64>> = batch
        .unlabeled
        .par_iter()
        .zip(&mined.kept)
        .map(|(im, kept)| -> Result<Option<f64>> {
            if kept.is_empty() {
                return Ok(None);
            }
            let weak = render_view(im, &cfg.scenario.noise, View::Weak, channels, cs.grid_size, state.seed)?;
            let strong = render_view(im, &cfg.scenario.noise, View::Strong, channels, cs.grid_size, state.seed)?;
            let tv = ViewInputs { features: weak.clone(), queries: state.teacher.queries.clone(), memory: weak };
            let sv = ViewInputs { features: strong.clone(), queries: state.student.queries.clone(), memory: strong };
            let boxes: Vec<_> = kept.iter().map(|k| k.bbox).collect();
            let out = cross_view_decode(&tv, &sv, &state.teacher, &state.student, &boxes, &cs.roi)?;
            Ok(Some(consistency_loss(&out.o_hat_s, &out.o_hat_t)?.value))
        })
        .collect::<Result<_>>()?;
    let active: Vec<f64> = per_image.into_iter().flatten().collect();
    let consistency = if active.is_empty() { 0.0 } else { active.iter().sum::<f64>() / active.len() as f64 };

    let total = total_loss(t, cfg.stage.t1, &sup, &unsup, consistency, cfg.stage.w_u, cfg.stage.w_c)?;

    // student drift, then EMA
    let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
    rng.set_stream(t);
    let mut student = state.student.to_vec();
    if cs.student_drift > 0.0 {
        let drift = Normal::new(0.0, cs.student_drift).map_err(|e| Error::param(e.to_string()))?;
        student.iter_mut().for_each(|v| *v += drift.sample(&mut rng));
    }
    let student = ParamVector::new(student)?;
    let teacher = ema_update(&ParamVector::new(state.teacher.to_vec())?, &student, cfg.stage.ema_momentum)?;
    state.student.set_from(student.values())?;
    state.teacher.set_from(teacher.values())?;
    state.t = t;

    let (cls_precision, cls_recall) = precision_recall(&batch.unlabeled, &cls_labels);
    let (consistency_precision, consistency_recall) = precision_recall(&batch.unlabeled, &mined.kept);
    Ok(StepReport {
        t,
        stage,
        sup,
        unsup,
        consistency,
        total,
        pseudo_cls: cls_labels.iter().map(Vec::len).sum(),
        pseudo_consistency: mined.num_kept(),
        cls_precision,
        cls_recall,
        consistency_precision,
        consistency_recall,
        mining_threshold: mined.threshold,
        mining_fallback: mined.fallback,
        teacher_student_gap: teacher.distance(&student),
    })
}

/// Runs `steps` consecutive iterations from a fresh state.
pub fn run_pipeline(ds: &Dataset, cfg: &RunConfig, steps: u64) -> Result<Vec<StepReport>> {
    let mut state = PipelineState::new(&cfg.consistency, cfg.scenario.seed)?;
    (0..steps).map(|s| semi_step(&mut state, &Batch::at(ds, s, &cfg.stage), cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate, NoiseModel, Scenario};

    #[test]
    fn ema_examples() {
        let t = ParamVector::new(vec![0.0]).unwrap();
        let s = ParamVector::new(vec![1.0]).unwrap();
        assert_eq!(ema_update(&t, &s, 0.999).unwrap().values()[0], 1.0 - 0.999);
        assert_eq!(ema_update(&s, &s, 0.999).unwrap(), s);
        assert!(ema_update(&t, &s, 1.0).is_err());
    }

    #[test]
    fn ema_geometric_blend() {
        let m: f64 = 0.999;
        let (t0, s) = (2.5, -0.75);
        let student = ParamVector::new(vec![s]).unwrap();
        let mut teacher = ParamVector::new(vec![t0]).unwrap();
        for _ in 0..10 {
            teacher = ema_update(&teacher, &student, m).unwrap();
        }
        let expected = t0 * m.powi(10) + s * (1.0 - m.powi(10));
        assert!((teacher.values()[0] - expected).abs() <= 1e-12 * expected.abs());
    }

    #[test]
    fn stage_boundary() {
        let cfg = StageConfig::with_total(200);
        assert_eq!(cfg.t1, 100);
        assert_eq!(stage_of(100, &cfg), MatchMode::OneToMany);
        assert_eq!(stage_of(101, &cfg), MatchMode::OneToOne);
        assert_eq!(stage_of(1, &cfg), MatchMode::OneToMany);
    }

    fn small_cfg(noise: NoiseModel, total: u64) -> (Dataset, RunConfig) {
        let cfg = RunConfig {
            scenario: Scenario { num_images: 10, noise, ..Scenario::default() },
            stage: StageConfig::with_total(total),
            consistency: ConsistencySettings { grid_size: 8, ..ConsistencySettings::default() },
            ..RunConfig::default()
        };
        (generate(&cfg.scenario).unwrap(), cfg)
    }

    #[test]
    fn zero_unsupervised_weights_leave_supervised_total() {
        let (ds, mut cfg) = small_cfg(NoiseModel::default(), 10);
        cfg.stage.w_u = 0.0;
        cfg.stage.w_c = 0.0;
        let mut state = PipelineState::new(&cfg.consistency, 0).unwrap();
        let r = semi_step(&mut state, &Batch::at(&ds, 0, &cfg.stage), &cfg).unwrap();
        assert_eq!(r.total, r.sup.total);
    }

    #[test]
    fn noiseless_second_stage_has_exact_regression() {
        let (ds, cfg) = small_cfg(NoiseModel::noiseless(), 2);
        let mut state = PipelineState::new(&cfg.consistency, 0).unwrap();
        state.t = 1;
        let r = semi_step(&mut state, &Batch::at(&ds, 0, &cfg.stage), &cfg).unwrap();
        assert_eq!(r.stage, MatchMode::OneToOne);
        assert!(r.pseudo_cls > 0);
        assert_eq!((r.unsup.reg_giou, r.unsup.reg_l1), (0.0, 0.0));
        assert_eq!((r.cls_precision, r.cls_recall), (1.0, 1.0));
    }

    #[test]
    fn mined_labels_stay_out_of_detection_losses() {
        let (ds, cfg) = small_cfg(NoiseModel::default(), 10);
        let batch = Batch::at(&ds, 0, &cfg.stage);
        let mut state = PipelineState::new(&cfg.consistency, 0).unwrap();
        let r = semi_step(&mut state, &batch, &cfg).unwrap();
        let mut expected = LossBreakdown::zero(r.stage);
        for im in &batch.unlabeled {
            let labels = cls_reg_labels(&teacher_output(im, &cfg).unwrap(), &cfg);
            expected = expected.add(&image_losses(r.stage, &labels, &im.proposals, &cfg).unwrap()).unwrap();
        }
        assert_eq!(r.unsup, expected);
    }

    #[test]
    fn steps_are_reproducible() {
        let (ds, cfg) = small_cfg(NoiseModel::default(), 4);
        let a = run_pipeline(&ds, &cfg, 4).unwrap();
        assert_eq!(a, run_pipeline(&ds, &cfg, 4).unwrap());
        assert_eq!(a[1].stage, MatchMode::OneToMany);
        assert_eq!(a[2].stage, MatchMode::OneToOne);
    }

    #[test]
    fn validation_names_key() {
        let cfg = StageConfig { tau_s: 1.5, ..StageConfig::default() };
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "stage.tau_s"),
            other => panic!("{other:?}"),
        }
    }
}
