//! Training objectives with closed-form gradients.
//!
//! Gradients are taken with respect to proposal-level quantities only: the
//! per-class probabilities and the center-form box `(cx, cy, w, h)` of every
//! proposal. The flat layout used by [`LossBreakdown::grads`] is, for each
//! proposal in order, `num_classes` score entries followed by 4 box entries
//! (see [`flatten_proposals`]).

use serde::{Deserialize, Serialize};

use crate::assignment::{Assignment, MatchMode, MatchScoreTable};
use crate::cost::{clamp_prob, CostWeights, MatchScoreParams, PROB_EPS};
use crate::error::{Error, Result};
use crate::geometry::{giou_grad_center, l1_grad_center, BBox, Detection};
use crate::mining::PseudoLabel;

/// Loss parts, each already multiplied by its weight, so that
/// `total == cls + reg_giou + reg_l1 + consistency`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg_giou: f64,
    pub reg_l1: f64,
    pub consistency: f64,
    pub total: f64,
    /// Which stage's losses these are.
    pub flavor: MatchMode,
    #[serde(skip)]
    pub grads: Option<Vec<f64>>,
}

impl LossBreakdown {
    pub fn new(flavor: MatchMode, cls: f64, reg_giou: f64, reg_l1: f64, consistency: f64) -> Self {
        Self { cls, reg_giou, reg_l1, consistency, total: cls + reg_giou + reg_l1 + consistency, flavor, grads: None }
    }

    pub fn zero(flavor: MatchMode) -> Self {
        Self::new(flavor, 0.0, 0.0, 0.0, 0.0)
    }

    /// Componentwise sum; gradients are dropped.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.flavor != other.flavor {
            return Err(Error::StageMismatch { stage: self.flavor, flavor: other.flavor });
        }
        Ok(Self::new(
            self.flavor,
            self.cls + other.cls,
            self.reg_giou + other.reg_giou,
            self.reg_l1 + other.reg_l1,
            self.consistency + other.consistency,
        ))
    }
}

/// A scalar loss and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Per-positive quality targets for the one-to-many losses.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedScore {
    pub m_hat: Vec<f64>,
}

/// How matching scores become soft classification targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Rescale each target's scores so their maximum equals the maximum IoU
    /// among that target's positives.
    #[default]
    MaxIou,
    /// Use the raw matching scores.
    None,
}

/// Normalizes matching scores per target. `m` and `u` follow
/// [`Assignment::pairs`] order.
pub fn normalize_match_scores(assignment: &Assignment, m: &[f64], u: &[f64]) -> Result<NormalizedScore> {
    normalize_with(assignment, m, u, Normalization::MaxIou)
}

pub fn normalize_with(assignment: &Assignment, m: &[f64], u: &[f64], mode: Normalization) -> Result<NormalizedScore> {
    let n = assignment.num_positives();
    if m.len() != n || u.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} positives but {} scores and {} ious", m.len(), u.len())));
    }
    if mode == Normalization::None {
        return Ok(NormalizedScore { m_hat: m.to_vec() });
    }
    let mut m_hat = Vec::with_capacity(n);
    let mut offset = 0;
    for props in assignment.per_target() {
        let range = offset..offset + props.len();
        let max_m = m[range.clone()].iter().copied().fold(0.0, f64::max);
        let max_u = u[range.clone()].iter().copied().fold(0.0, f64::max);
        for &mi in &m[range] {
            m_hat.push(if max_m > 0.0 { mi * max_u / max_m } else { 0.0 });
        }
        offset += props.len();
    }
    Ok(NormalizedScore { m_hat })
}

/// `-t ln(p) - (1-t) ln(1-p)` with `p` clamped to `[1e-8, 1-1e-8]`.
pub fn bce(p: f64, t: f64) -> f64 {
    let c = clamp_prob(p);
    -t * c.ln() - (1.0 - t) * (1.0 - c).ln()
}

fn bce_grad(p: f64, t: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    -t / p + (1.0 - t) / (1.0 - p)
}

/// `d/dx x^gamma` for `x >= 0`.
fn pow_grad(x: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        0.0
    } else {
        gamma * x.powf(gamma - 1.0)
    }
}

/// Quality-focal classification loss: positives `(s, m_hat)` contribute
/// `|m_hat - s|^gamma * BCE(s, m_hat)`, negatives `s^gamma * BCE(s, 0)`.
/// The gradient lists positives then negatives.
pub fn o2m_cls_loss(positives: &[(f64, f64)], negatives: &[f64], gamma: f64) -> LossGrad {
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(positives.len() + negatives.len());
    for &(s, t) in positives {
        let d = (t - s).abs();
        let weight = d.powf(gamma);
        let b = bce(s, t);
        value += weight * b;
        let sign = if s > t {
            1.0
        } else if s < t {
            -1.0
        } else {
            0.0
        };
        grad.push(pow_grad(d, gamma) * sign * b + weight * bce_grad(s, t));
    }
    for &s in negatives {
        let weight = s.powf(gamma);
        let b = bce(s, 0.0);
        value += weight * b;
        grad.push(pow_grad(s, gamma) * b + weight * bce_grad(s, 0.0));
    }
    LossGrad { value, grad }
}

/// One positive of the regression loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegPair {
    pub m_hat: f64,
    pub pred: BBox,
    pub target: BBox,
}

/// Regression loss split into its GIoU and L1 sums.
#[derive(Debug, Clone, PartialEq)]
pub struct RegLoss {
    pub giou: f64,
    pub l1: f64,
    /// 4 center-form entries per positive.
    pub grad: Vec<f64>,
}

impl RegLoss {
    pub fn value(&self) -> f64 {
        self.giou + self.l1
    }
}

/// `sum m_hat * (1 - GIoU) + sum m_hat * L1`.
pub fn o2m_reg_loss(positives: &[RegPair]) -> RegLoss {
    let mut out = RegLoss { giou: 0.0, l1: 0.0, grad: Vec::with_capacity(4 * positives.len()) };
    for p in positives {
        let (g, dg) = giou_grad_center(&p.pred, &p.target);
        let (l, dl) = l1_grad_center(&p.pred, &p.target);
        out.giou += p.m_hat * (1.0 - g);
        out.l1 += p.m_hat * l;
        for k in 0..4 {
            out.grad.push(p.m_hat * (-dg[k] + dl[k]));
        }
    }
    out
}

/// Sigmoid focal loss on a probability and its derivative.
fn focal_term(p: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let c = clamp_prob(p);
    let inside = (PROB_EPS..=1.0 - PROB_EPS).contains(&p);
    if positive {
        let q = 1.0 - p;
        let v = alpha * q.powf(gamma) * -c.ln();
        let d = alpha * (-pow_grad(q, gamma) * -c.ln() + q.powf(gamma) * if inside { -1.0 / c } else { 0.0 });
        (v, d)
    } else {
        let v = (1.0 - alpha) * p.powf(gamma) * -(1.0 - c).ln();
        let d = (1.0 - alpha)
            * (pow_grad(p, gamma) * -(1.0 - c).ln() + p.powf(gamma) * if inside { 1.0 / (1.0 - c) } else { 0.0 });
        (v, d)
    }
}

/// Flat `[scores.., cx, cy, w, h]` per proposal.
pub fn flatten_proposals(proposals: &[Detection]) -> Vec<f64> {
    let mut out = Vec::new();
    for p in proposals {
        out.extend_from_slice(p.scores());
        out.extend_from_slice(&p.bbox().to_center());
    }
    out
}

/// Inverse of [`flatten_proposals`].
pub fn unflatten_proposals(flat: &[f64], num_classes: usize) -> Result<Vec<Detection>> {
    let stride = num_classes + 4;
    if num_classes == 0 || !flat.len().is_multiple_of(stride) {
        return Err(Error::ShapeMismatch(format!("{} values with stride {stride}", flat.len())));
    }
    flat.chunks(stride)
        .map(|row| {
            let c = &row[num_classes..];
            Detection::new(BBox::from_center(c[0], c[1], c[2], c[3])?, row[..num_classes].to_vec())
        })
        .collect()
}

fn check_uniform_classes(proposals: &[Detection]) -> Result<usize> {
    let nc = proposals.first().map_or(0, Detection::num_classes);
    if proposals.iter().any(|p| p.num_classes() != nc) {
        return Err(Error::ShapeMismatch("proposals disagree on class count".into()));
    }
    Ok(nc)
}

/// Settings of the one-to-many losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct O2mLossConfig {
    pub gamma: f64,
    pub normalization: Normalization,
}

impl Default for O2mLossConfig {
    fn default() -> Self {
        Self { gamma: 2.0, normalization: Normalization::MaxIou }
    }
}

/// One-to-many losses of one image.
///
/// Positive pairs supply a soft target `m_hat` on their target-class score;
/// every other (proposal, class) score is a negative. Gradients follow the
/// flat proposal layout.
pub fn o2m_losses(
    assignment: &Assignment,
    proposals: &[Detection],
    targets: &[PseudoLabel],
    params: &MatchScoreParams,
    cfg: &O2mLossConfig,
) -> Result<LossBreakdown> {
    let nc = check_uniform_classes(proposals)?;
    assignment.validate(proposals.len())?;
    let stride = nc + 4;
    let table = MatchScoreTable::compute(targets, proposals, params);
    let pairs: Vec<(usize, usize)> = assignment.pairs().collect();
    let m: Vec<f64> = pairs.iter().map(|&(t, p)| table.score(t, p)).collect();
    let u: Vec<f64> = pairs.iter().map(|&(t, p)| table.iou(t, p)).collect();
    let m_hat = normalize_with(assignment, &m, &u, cfg.normalization)?.m_hat;

    let mut is_pos_entry = vec![false; proposals.len() * nc];
    let mut pos = Vec::with_capacity(pairs.len());
    for (&(t, p), &mh) in pairs.iter().zip(&m_hat) {
        let c = targets[t].class_id;
        is_pos_entry[p * nc + c] = true;
        pos.push((proposals[p].class_score(c), mh));
    }
    let mut neg_index = Vec::new();
    let mut neg = Vec::new();
    for (p, prop) in proposals.iter().enumerate() {
        for (c, &s) in prop.scores().iter().enumerate() {
            if !is_pos_entry[p * nc + c] {
                neg_index.push(p * stride + c);
                neg.push(s);
            }
        }
    }
    let cls = o2m_cls_loss(&pos, &neg, cfg.gamma);
    let reg_pairs: Vec<RegPair> = pairs
        .iter()
        .zip(&m_hat)
        .map(|(&(t, p), &mh)| RegPair { m_hat: mh, pred: *proposals[p].bbox(), target: targets[t].bbox })
        .collect();
    let reg = o2m_reg_loss(&reg_pairs);

    let mut grads = vec![0.0; proposals.len() * stride];
    for (i, &(t, p)) in pairs.iter().enumerate() {
        grads[p * stride + targets[t].class_id] += cls.grad[i];
        for k in 0..4 {
            grads[p * stride + nc + k] += reg.grad[4 * i + k];
        }
    }
    for (slot, g) in neg_index.iter().zip(&cls.grad[pairs.len()..]) {
        grads[*slot] += g;
    }

    let mut out = LossBreakdown::new(MatchMode::OneToMany, cls.value, reg.giou, reg.l1, 0.0);
    out.grads = Some(grads);
    Ok(out)
}

/// One-to-one losses of one image: focal classification over every
/// (proposal, class) score, with the matched target class as the only
/// positive entry of a matched proposal, plus GIoU and L1 on matched pairs.
/// Parts are weighted by `lambda_cls`, `lambda_giou` and `lambda_l1`.
pub fn o2o_losses(
    assignment: &Assignment,
    proposals: &[Detection],
    targets: &[PseudoLabel],
    w: &CostWeights,
) -> Result<LossBreakdown> {
    if assignment.mode() != MatchMode::OneToOne {
        return Err(Error::param("o2o losses need a one-to-one assignment"));
    }
    let nc = check_uniform_classes(proposals)?;
    assignment.validate(proposals.len())?;
    let stride = nc + 4;
    let mut positive_class = vec![None; proposals.len()];
    for (t, p) in assignment.pairs() {
        positive_class[p] = Some(targets[t].class_id);
    }

    let mut grads = vec![0.0; proposals.len() * stride];
    let mut cls = 0.0;
    for (p, prop) in proposals.iter().enumerate() {
        for (c, &s) in prop.scores().iter().enumerate() {
            let (v, d) = focal_term(s, positive_class[p] == Some(c), w.focal_alpha, w.focal_gamma);
            cls += v;
            grads[p * stride + c] = w.lambda_cls * d;
        }
    }
    let mut giou_sum = 0.0;
    let mut l1_sum = 0.0;
    for (t, p) in assignment.pairs() {
        let (g, dg) = giou_grad_center(proposals[p].bbox(), &targets[t].bbox);
        let (l, dl) = l1_grad_center(proposals[p].bbox(), &targets[t].bbox);
        giou_sum += 1.0 - g;
        l1_sum += l;
        for k in 0..4 {
            grads[p * stride + nc + k] += -w.lambda_giou * dg[k] + w.lambda_l1 * dl[k];
        }
    }
    let mut out =
        LossBreakdown::new(MatchMode::OneToOne, w.lambda_cls * cls, w.lambda_giou * giou_sum, w.lambda_l1 * l1_sum, 0.0);
    out.grads = Some(grads);
    Ok(out)
}

/// Stage of iteration `t` when the first stage lasts `t1` iterations:
/// one-to-many while `t <= t1`.
pub fn stage_for(t: u64, t1: u64) -> MatchMode {
    if t <= t1 {
        MatchMode::OneToMany
    } else {
        MatchMode::OneToOne
    }
}

/// `sup + w_u * unsup + w_c * consistency`, after checking that both loss
/// breakdowns belong to the stage of iteration `t`.
pub fn total_loss(
    t: u64,
    t1: u64,
    sup: &LossBreakdown,
    unsup: &LossBreakdown,
    consistency: f64,
    w_u: f64,
    w_c: f64,
) -> Result<f64> {
    let stage = stage_for(t, t1);
    for part in [sup, unsup] {
        if part.flavor != stage {
            return Err(Error::StageMismatch { stage, flavor: part.flavor });
        }
    }
    Ok(sup.total + w_u * unsup.total + w_c * consistency)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::hungarian;
    use crate::cost::build_cost_matrix;
    use crate::geometry::giou;

    #[test]
    fn normalization_examples() {
        let single = Assignment::one_to_many(vec![vec![0]], 1, false);
        assert_eq!(normalize_match_scores(&single, &[0.3], &[0.3]).unwrap().m_hat, vec![0.3]);

        let two = Assignment::one_to_many(vec![vec![0, 1]], 2, false);
        let m_hat = normalize_match_scores(&two, &[0.4, 0.2], &[0.8, 0.5]).unwrap().m_hat;
        assert!((m_hat[0] - 0.8).abs() < 1e-15 && (m_hat[1] - 0.4).abs() < 1e-15);

        assert_eq!(normalize_match_scores(&two, &[0.0, 0.0], &[0.8, 0.5]).unwrap().m_hat, vec![0.0, 0.0]);
        assert!(normalize_match_scores(&two, &[0.1], &[0.8]).is_err());
    }

    #[test]
    fn normalization_per_target_max_equals_max_iou() {
        let a = Assignment::one_to_many(vec![vec![0, 2], vec![1, 3, 4]], 5, false);
        let m = [0.1, 0.05, 0.3, 0.2, 0.01];
        let u = [0.9, 0.7, 0.6, 0.95, 0.5];
        let mh = normalize_match_scores(&a, &m, &u).unwrap().m_hat;
        assert!((mh[0].max(mh[1]) - 0.9).abs() < 1e-12);
        assert!((mh[2].max(mh[3]).max(mh[4]) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn o2m_cls_examples() {
        assert_eq!(o2m_cls_loss(&[(0.5, 0.5)], &[], 2.0).value, 0.0);
        assert_eq!(o2m_cls_loss(&[], &[0.0], 2.0).value, 0.0);
        let v = o2m_cls_loss(&[(0.3, 0.9)], &[], 2.0).value;
        let oracle = 0.36 * (-0.9 * 0.3f64.ln() - 0.1 * 0.7f64.ln());
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.40292).abs() < 1e-5);
    }

    #[test]
    fn o2m_reg_examples() {
        let b = BBox::from_corners(0.1, 0.1, 0.4, 0.5);
        assert_eq!(o2m_reg_loss(&[RegPair { m_hat: 1.0, pred: b, target: b }]).value(), 0.0);
        let far = BBox::from_corners(0.6, 0.6, 0.9, 0.9);
        assert_eq!(o2m_reg_loss(&[RegPair { m_hat: 0.0, pred: far, target: b }]).value(), 0.0);

        // touching boxes (GIoU 0) whose center-form L1 is 3:
        // a=(0,0,1,1), b=(1,0,10/3,1): |dcx| = 5/3, |dw| = 4/3.
        let a = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let t = BBox::from_corners(1.0, 0.0, 10.0 / 3.0, 1.0);
        assert!(giou(&a, &t).abs() < 1e-15);
        let v = o2m_reg_loss(&[RegPair { m_hat: 0.5, pred: a, target: t }]).value();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn o2o_perfect_and_unmatched() {
        let b = BBox::from_corners(0.1, 0.1, 0.4, 0.5);
        let proposals = vec![
            Detection::new(b, vec![1.0, 0.0]).unwrap(),
            Detection::new(BBox::from_corners(0.5, 0.5, 0.6, 0.6), vec![0.0, 0.0]).unwrap(),
        ];
        let targets = vec![PseudoLabel::new(b, 0, 1.0)];
        let w = CostWeights::default();
        let a = hungarian(&build_cost_matrix(&targets, &proposals, &w).unwrap()).unwrap();
        assert_eq!(a.per_target(), &[vec![0]]);
        let loss = o2o_losses(&a, &proposals, &targets, &w).unwrap();
        assert_eq!(loss.reg_giou, 0.0);
        assert_eq!(loss.reg_l1, 0.0);
        assert_eq!(loss.cls, 0.0);
    }

    #[test]
    fn o2o_single_pair_scalar_oracle() {
        let pred = BBox::from_corners(0.1, 0.15, 0.45, 0.5);
        let tb = BBox::from_corners(0.12, 0.1, 0.4, 0.55);
        let proposals = vec![Detection::new(pred, vec![0.3, 0.6]).unwrap()];
        let targets = vec![PseudoLabel::new(tb, 1, 0.9)];
        let w = CostWeights::default();
        let a = Assignment::one_to_one(vec![0], 1);
        let loss = o2o_losses(&a, &proposals, &targets, &w).unwrap();
        let pos = 0.25 * 0.4f64.powi(2) * -(0.6f64).ln();
        let neg = 0.75 * 0.3f64.powi(2) * -(0.7f64).ln();
        let ca = pred.to_center();
        let cb = tb.to_center();
        let l1: f64 = (0..4).map(|k| (ca[k] - cb[k]).abs()).sum();
        let expected = 2.0 * (pos + neg) + 2.0 * (1.0 - giou(&pred, &tb)) + 5.0 * l1;
        assert!((loss.total - expected).abs() < 1e-12 * expected.abs());
    }

    #[test]
    fn total_loss_stage_switch() {
        let o2m = LossBreakdown::new(MatchMode::OneToMany, 0.5, 0.25, 0.25, 0.0);
        let unsup = LossBreakdown::new(MatchMode::OneToMany, 1.0, 0.5, 0.5, 0.0);
        assert_eq!(total_loss(100, 100, &o2m, &unsup, 3.0, 4.0, 1.0).unwrap(), 12.0);
        assert_eq!(total_loss(100, 100, &o2m, &unsup, 3.0, 0.0, 0.0).unwrap(), o2m.total);
        assert!(matches!(
            total_loss(101, 100, &o2m, &unsup, 3.0, 4.0, 1.0),
            Err(Error::StageMismatch { stage: MatchMode::OneToOne, .. })
        ));
        assert_eq!(stage_for(1, 100), MatchMode::OneToMany);
    }

    #[test]
    fn flatten_round_trip() {
        let ps = vec![
            Detection::new(BBox::from_corners(0.1, 0.2, 0.3, 0.5), vec![0.2, 0.7]).unwrap(),
            Detection::new(BBox::from_corners(0.0, 0.0, 1.0, 1.0), vec![0.9, 0.1]).unwrap(),
        ];
        let back = unflatten_proposals(&flatten_proposals(&ps), 2).unwrap();
        for (a, b) in ps.iter().zip(&back) {
            assert_eq!(a.scores(), b.scores());
            let (ca, cb) = (a.bbox().to_center(), b.bbox().to_center());
            assert!(ca.iter().zip(cb.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let tol = 1e-4 * fd.abs().max(grad[i].abs()) + 1e-7;
            assert!((fd - grad[i]).abs() <= tol, "entry {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn cls_gradient_matches_finite_differences() {
        let pos = [(0.3, 0.9), (0.7, 0.2), (0.55, 0.6)];
        let neg = [0.2, 0.45, 0.8];
        let x: Vec<f64> = pos.iter().map(|p| p.0).chain(neg).collect();
        let f = |x: &[f64]| {
            let p: Vec<(f64, f64)> = pos.iter().zip(x).map(|(p, &s)| (s, p.1)).collect();
            o2m_cls_loss(&p, &x[3..], 2.0).value
        };
        fd_check(f, &x, &o2m_cls_loss(&pos, &neg, 2.0).grad);
    }

    fn scene() -> (Vec<Detection>, Vec<PseudoLabel>) {
        let proposals = vec![
            Detection::new(BBox::from_corners(0.1, 0.12, 0.42, 0.5), vec![0.6, 0.2, 0.1]).unwrap(),
            Detection::new(BBox::from_corners(0.15, 0.11, 0.38, 0.47), vec![0.3, 0.35, 0.15]).unwrap(),
            Detection::new(BBox::from_corners(0.5, 0.55, 0.8, 0.9), vec![0.1, 0.25, 0.7]).unwrap(),
            Detection::new(BBox::from_corners(0.45, 0.5, 0.75, 0.85), vec![0.2, 0.1, 0.4]).unwrap(),
            Detection::new(BBox::from_corners(0.05, 0.6, 0.2, 0.72), vec![0.05, 0.3, 0.12]).unwrap(),
        ];
        let targets = vec![
            PseudoLabel::new(BBox::from_corners(0.12, 0.1, 0.4, 0.48), 0, 0.9),
            PseudoLabel::new(BBox::from_corners(0.52, 0.52, 0.78, 0.88), 2, 0.8),
        ];
        (proposals, targets)
    }

    #[test]
    fn o2m_gradient_matches_finite_differences() {
        let (proposals, targets) = scene();
        let params = MatchScoreParams::default();
        let cfg = O2mLossConfig::default();
        let a = crate::assignment::one_to_many(&targets, &proposals, &params, 2, true).unwrap();
        let base = o2m_losses(&a, &proposals, &targets, &params, &cfg).unwrap();
        // m_hat depends on the proposals; hold it fixed as a detached target
        let table = MatchScoreTable::compute(&targets, &proposals, &params);
        let pairs: Vec<_> = a.pairs().collect();
        let m: Vec<f64> = pairs.iter().map(|&(t, p)| table.score(t, p)).collect();
        let u: Vec<f64> = pairs.iter().map(|&(t, p)| table.iou(t, p)).collect();
        let m_hat = normalize_match_scores(&a, &m, &u).unwrap().m_hat;
        let nc = 3;
        let f = |x: &[f64]| {
            let ps = unflatten_proposals(x, nc).unwrap();
            let mut pos = Vec::new();
            let mut reg = Vec::new();
            let mut is_pos = vec![false; ps.len() * nc];
            for (&(t, p), &mh) in pairs.iter().zip(&m_hat) {
                is_pos[p * nc + targets[t].class_id] = true;
                pos.push((ps[p].class_score(targets[t].class_id), mh));
                reg.push(RegPair { m_hat: mh, pred: *ps[p].bbox(), target: targets[t].bbox });
            }
            let neg: Vec<f64> = ps
                .iter()
                .enumerate()
                .flat_map(|(p, d)| d.scores().iter().enumerate().map(move |(c, &s)| (p * nc + c, s)))
                .filter(|(i, _)| !is_pos[*i])
                .map(|(_, s)| s)
                .collect();
            o2m_cls_loss(&pos, &neg, 2.0).value + o2m_reg_loss(&reg).value()
        };
        let x = flatten_proposals(&proposals);
        assert!((f(&x) - base.total).abs() < 1e-12);
        fd_check(f, &x, base.grads.as_ref().unwrap());
    }

    #[test]
    fn o2o_gradient_matches_finite_differences() {
        let (proposals, targets) = scene();
        let w = CostWeights::default();
        let a = hungarian(&build_cost_matrix(&targets, &proposals, &w).unwrap()).unwrap();
        let base = o2o_losses(&a, &proposals, &targets, &w).unwrap();
        let f = |x: &[f64]| o2o_losses(&a, &unflatten_proposals(x, 3).unwrap(), &targets, &w).unwrap().total;
        fd_check(f, &flatten_proposals(&proposals), base.grads.as_ref().unwrap());
    }
}
