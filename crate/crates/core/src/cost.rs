//! Pairwise matching costs between targets (pseudo labels or ground truth)
//! and proposals, plus the one-to-many matching score `m = s^alpha * u^beta`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, l1_center_form, Detection};
use crate::mining::PseudoLabel;

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-8;

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Weights of the classification, GIoU and L1 cost terms, and the focal
/// parameters used by the classification term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub lambda_cls: f64,
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { lambda_cls: 2.0, lambda_giou: 2.0, lambda_l1: 5.0, focal_alpha: 0.25, focal_gamma: 2.0 }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_cls, self.lambda_giou, self.lambda_l1];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::param(format!("cost weights must be finite and >= 0, got {lambdas:?}")));
        }
        if lambdas.iter().all(|l| *l == 0.0) {
            return Err(Error::param("at least one cost weight must be positive"));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::param(format!("focal_alpha {} outside (0, 1)", self.focal_alpha)));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::param(format!("focal_gamma {} must be >= 0", self.focal_gamma)));
        }
        Ok(())
    }
}

/// Exponents of the one-to-many matching score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchScoreParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MatchScoreParams {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 6.0 }
    }
}

impl MatchScoreParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::param(format!("match exponents must be >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// `m = s^alpha * u^beta` for a class score `s` and an IoU `u`.
pub fn match_score(s: f64, u: f64, params: &MatchScoreParams) -> f64 {
    s.clamp(0.0, 1.0).powf(params.alpha) * u.clamp(0.0, 1.0).powf(params.beta)
}

/// Focal positive-minus-negative classification cost for a proposal whose
/// probability of the target class is `p`.
pub fn focal_cls_cost(p: f64, w: &CostWeights) -> f64 {
    let p = clamp_prob(p);
    let pos = w.focal_alpha * (1.0 - p).powf(w.focal_gamma) * -p.ln();
    let neg = (1.0 - w.focal_alpha) * p.powf(w.focal_gamma) * -(1.0 - p).ln();
    pos - neg
}

/// Dense `targets x proposals` cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pub target_ids: Vec<usize>,
    pub proposal_ids: Vec<usize>,
}

impl CostMatrix {
    /// Row-major values; ids default to `0..rows` and `0..cols`.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} cost matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("cost matrix entries must be finite"));
        }
        Ok(Self { rows, cols, values, target_ids: (0..rows).collect(), proposal_ids: (0..cols).collect() })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged cost rows".into()));
        }
        Self::new(rows.len(), cols, rows.iter().flatten().copied().collect())
    }

    pub fn num_targets(&self) -> usize {
        self.rows
    }

    pub fn num_proposals(&self) -> usize {
        self.cols
    }

    pub fn get(&self, target: usize, proposal: usize) -> f64 {
        self.values[target * self.cols + proposal]
    }

    pub fn row(&self, target: usize) -> &[f64] {
        &self.values[target * self.cols..(target + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Elementwise map, e.g. negation to turn scores into costs.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let mut out = Self::new(self.rows, self.cols, self.values.iter().map(|&v| f(v)).collect())?;
        out.target_ids.clone_from(&self.target_ids);
        out.proposal_ids.clone_from(&self.proposal_ids);
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                values.push(self.get(i, j));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            values,
            target_ids: self.proposal_ids.clone(),
            proposal_ids: self.target_ids.clone(),
        }
    }

    /// Total cost of `(target, proposal)` pairs.
    pub fn total(&self, pairs: impl IntoIterator<Item = (usize, usize)>) -> f64 {
        pairs.into_iter().map(|(i, j)| self.get(i, j)).sum()
    }
}

/// Cost of matching one target to one proposal.
pub fn pair_cost(target: &PseudoLabel, proposal: &Detection, w: &CostWeights) -> f64 {
    let cls = focal_cls_cost(proposal.class_score(target.class_id), w);
    let g = giou(proposal.bbox(), &target.bbox);
    let l1 = l1_center_form(proposal.bbox(), &target.bbox);
    w.lambda_cls * cls + w.lambda_giou * -g + w.lambda_l1 * l1
}

/// Weighted classification + GIoU + L1 matching cost for every target and
/// proposal pair. Rows are computed in parallel; each cell is an independent
/// scalar expression, so the result does not depend on the thread count.
pub fn build_cost_matrix(targets: &[PseudoLabel], proposals: &[Detection], w: &CostWeights) -> Result<CostMatrix> {
    if targets.is_empty() || proposals.is_empty() {
        return Err(Error::EmptyProblem { targets: targets.len(), proposals: proposals.len() });
    }
    if let Some(t) = targets.iter().find(|t| proposals.iter().any(|p| t.class_id >= p.num_classes())) {
        return Err(Error::param(format!("target class {} outside proposal score range", t.class_id)));
    }
    let cols = proposals.len();
    let mut values = vec![0.0; targets.len() * cols];
    values.par_chunks_mut(cols).zip(targets.par_iter()).for_each(|(row, t)| {
        for (cell, p) in row.iter_mut().zip(proposals) {
            *cell = pair_cost(t, p, w);
        }
    });
    CostMatrix::new(targets.len(), cols, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    #[test]
    fn match_score_examples() {
        let p = MatchScoreParams::default();
        assert_eq!(match_score(1.0, 1.0, &p), 1.0);
        assert_eq!(match_score(0.7, 0.0, &p), 0.0);
        assert!((match_score(0.5, 0.8, &p) - 0.131072).abs() < 1e-12);
    }

    #[test]
    fn focal_cost_half_probability() {
        let w = CostWeights::default();
        let expected = -0.5 * 0.25 * 2f64.ln();
        assert!((focal_cls_cost(0.5, &w) - expected).abs() < 1e-12);
        assert!((expected + 0.08664).abs() < 1e-5);
        let sym = CostWeights { focal_alpha: 0.5, focal_gamma: 0.0, ..w };
        assert!(focal_cls_cost(0.5, &sym).abs() < 1e-15);
        let p: f64 = 0.3;
        assert!((focal_cls_cost(p, &sym) - 0.5 * (-p.ln() + (1.0 - p).ln())).abs() < 1e-12);
    }

    #[test]
    fn focal_cost_decreases_toward_one() {
        let w = CostWeights::default();
        let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        for pair in grid.windows(2) {
            assert!(focal_cls_cost(pair[1], &w) < focal_cls_cost(pair[0], &w));
        }
    }

    #[test]
    fn identical_box_dominates_row() {
        let target = PseudoLabel::new(BBox::from_corners(0.2, 0.2, 0.5, 0.6), 1, 0.9);
        let props = vec![
            Detection::new(BBox::from_corners(0.0, 0.0, 0.3, 0.3), vec![0.1, 0.5]).unwrap(),
            Detection::new(target.bbox, vec![0.05, 0.95]).unwrap(),
            Detection::new(BBox::from_corners(0.25, 0.2, 0.55, 0.6), vec![0.1, 0.6]).unwrap(),
        ];
        let c = build_cost_matrix(&[target], &props, &CostWeights::default()).unwrap();
        let row = c.row(0);
        let best = (0..3).min_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(best, 1);
    }

    #[test]
    fn zero_cls_weight_identical_boxes() {
        let bb = BBox::from_corners(0.2, 0.2, 0.5, 0.6);
        let w = CostWeights { lambda_cls: 0.0, ..CostWeights::default() };
        let c = build_cost_matrix(&[PseudoLabel::new(bb, 0, 1.0)], &[Detection::single(bb, 0, 0.3, 2).unwrap()], &w)
            .unwrap();
        assert_eq!(c.get(0, 0), -w.lambda_giou);
    }

    #[test]
    fn empty_problem_is_distinguished() {
        let err = build_cost_matrix(&[], &[], &CostWeights::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyProblem { .. }));
    }

    #[test]
    fn weights_validation() {
        assert!(CostWeights::default().validate().is_ok());
        let zero = CostWeights { lambda_cls: 0.0, lambda_giou: 0.0, lambda_l1: 0.0, ..Default::default() };
        assert!(zero.validate().is_err());
        assert!(CostWeights { focal_alpha: 1.0, ..Default::default() }.validate().is_err());
    }
}
