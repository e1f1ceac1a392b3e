//! Label assignment between targets and proposals.
//!
//! * [`hungarian`]: optimal one-to-one matching on a cost matrix.
//! * [`one_to_many`]: top-k proposals per target ranked by `s^alpha * u^beta`.
//! * [`max_iou_assign`], [`atss_assign`], [`simota_assign`]: the classic
//!   dense-detector assigners, kept for ablations.
//!
//! Every tie is broken by the lowest proposal index, then the lowest target
//! index.

mod alternatives;
mod hungarian;

use serde::{Deserialize, Serialize};

pub use alternatives::{atss_assign, max_iou_assign, simota_assign, MaxIouConfig};
pub use hungarian::hungarian;

use crate::cost::{match_score, MatchScoreParams};
use crate::error::{Error, Result};
use crate::geometry::{iou, Detection};
use crate::mining::PseudoLabel;

/// One-to-one (set prediction) or one-to-many (dense) supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    OneToOne,
    OneToMany,
}

/// Target to proposal mapping with an optional proposal to target inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    per_target: Vec<Vec<usize>>,
    per_proposal: Option<Vec<Option<usize>>>,
    mode: MatchMode,
    truncated: bool,
}

impl Assignment {
    pub(crate) fn one_to_one(matched: Vec<usize>, num_proposals: usize) -> Self {
        let mut inverse = vec![None; num_proposals];
        for (t, &p) in matched.iter().enumerate() {
            inverse[p] = Some(t);
        }
        Self {
            per_target: matched.into_iter().map(|p| vec![p]).collect(),
            per_proposal: Some(inverse),
            mode: MatchMode::OneToOne,
            truncated: false,
        }
    }

    /// Builds a one-to-many assignment. The inverse is populated only when
    /// every proposal belongs to at most one target.
    pub(crate) fn one_to_many(per_target: Vec<Vec<usize>>, num_proposals: usize, truncated: bool) -> Self {
        let mut inverse = vec![None; num_proposals];
        let mut is_function = true;
        for (t, props) in per_target.iter().enumerate() {
            for &p in props {
                if inverse[p].is_some() {
                    is_function = false;
                }
                inverse[p] = Some(t);
            }
        }
        Self {
            per_target,
            per_proposal: is_function.then_some(inverse),
            mode: MatchMode::OneToMany,
            truncated,
        }
    }

    pub fn mode(&self) -> MatchMode {
        self.mode
    }

    /// Assigned proposals of each target, in rank order.
    pub fn per_target(&self) -> &[Vec<usize>] {
        &self.per_target
    }

    /// Owning target of each proposal (`None` = background). Absent when a
    /// proposal is shared by several targets.
    pub fn per_proposal(&self) -> Option<&[Option<usize>]> {
        self.per_proposal.as_deref()
    }

    /// `true` when `k` exceeded the number of proposals and every proposal was
    /// ranked instead.
    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn num_targets(&self) -> usize {
        self.per_target.len()
    }

    pub fn num_positives(&self) -> usize {
        self.per_target.iter().map(Vec::len).sum()
    }

    /// `(target, proposal)` pairs, target-major.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.per_target.iter().enumerate().flat_map(|(t, ps)| ps.iter().map(move |&p| (t, p)))
    }

    /// Set of proposals assigned to any target.
    pub fn positive_mask(&self, num_proposals: usize) -> Vec<bool> {
        let mut mask = vec![false; num_proposals];
        for (_, p) in self.pairs() {
            mask[p] = true;
        }
        mask
    }

    /// Checks the structural invariants against `num_proposals`.
    pub fn validate(&self, num_proposals: usize) -> Result<()> {
        for (t, p) in self.pairs() {
            if p >= num_proposals {
                return Err(Error::ShapeMismatch(format!("target {t} assigned proposal {p} >= {num_proposals}")));
            }
        }
        if self.mode == MatchMode::OneToOne {
            if self.per_target.iter().any(|ps| ps.len() != 1) {
                return Err(Error::ShapeMismatch("one-to-one target without exactly one proposal".into()));
            }
            let mut seen = vec![false; num_proposals];
            for (_, p) in self.pairs() {
                if std::mem::replace(&mut seen[p], true) {
                    return Err(Error::ShapeMismatch(format!("proposal {p} matched twice")));
                }
            }
        }
        if let Some(inv) = &self.per_proposal {
            if inv.len() != num_proposals {
                return Err(Error::ShapeMismatch("inverse map length".into()));
            }
            for (p, owner) in inv.iter().enumerate() {
                if let Some(t) = owner {
                    if !self.per_target[*t].contains(&p) {
                        return Err(Error::ShapeMismatch(format!("inverse says {p}->{t} but forward disagrees")));
                    }
                }
            }
            if self.pairs().any(|(t, p)| inv[p] != Some(t)) {
                return Err(Error::ShapeMismatch("forward pair missing from inverse".into()));
            }
        }
        Ok(())
    }
}

/// `m` and IoU between every target and proposal, target-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchScoreTable {
    pub num_proposals: usize,
    pub scores: Vec<f64>,
    pub ious: Vec<f64>,
}

impl MatchScoreTable {
    pub fn compute(targets: &[PseudoLabel], proposals: &[Detection], params: &MatchScoreParams) -> Self {
        let mut scores = Vec::with_capacity(targets.len() * proposals.len());
        let mut ious = Vec::with_capacity(targets.len() * proposals.len());
        for t in targets {
            for p in proposals {
                let u = iou(p.bbox(), &t.bbox);
                ious.push(u);
                scores.push(match_score(p.class_score(t.class_id), u, params));
            }
        }
        Self { num_proposals: proposals.len(), scores, ious }
    }

    pub fn score(&self, target: usize, proposal: usize) -> f64 {
        self.scores[target * self.num_proposals + proposal]
    }

    pub fn iou(&self, target: usize, proposal: usize) -> f64 {
        self.ious[target * self.num_proposals + proposal]
    }
}

/// Top-`k` proposals of every target by descending `m`, before any conflict
/// resolution. `k` is capped at the number of proposals.
pub fn rank_by_match_score(table: &MatchScoreTable, num_targets: usize, k: usize) -> Vec<Vec<usize>> {
    let n = table.num_proposals;
    (0..num_targets)
        .map(|t| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| table.score(t, b).total_cmp(&table.score(t, a)));
            idx.truncate(k.min(n));
            idx
        })
        .collect()
}

/// Ranked one-to-many assignment.
///
/// Each target takes its `k` proposals with the largest `m`. With
/// `resolve_conflicts`, a proposal claimed by several targets stays only with
/// the target for which its `m` is largest; the other targets lose it and are
/// not refilled.
pub fn one_to_many(
    targets: &[PseudoLabel],
    proposals: &[Detection],
    params: &MatchScoreParams,
    k: usize,
    resolve_conflicts: bool,
) -> Result<Assignment> {
    if k == 0 {
        return Err(Error::param("one-to-many k must be >= 1"));
    }
    if proposals.is_empty() {
        return Err(Error::EmptyProblem { targets: targets.len(), proposals: 0 });
    }
    let table = MatchScoreTable::compute(targets, proposals, params);
    Ok(one_to_many_from_table(&table, targets.len(), k, resolve_conflicts))
}

pub(crate) fn one_to_many_from_table(
    table: &MatchScoreTable,
    num_targets: usize,
    k: usize,
    resolve_conflicts: bool,
) -> Assignment {
    let n = table.num_proposals;
    let mut ranked = rank_by_match_score(table, num_targets, k);
    if resolve_conflicts {
        let mut owner: Vec<Option<usize>> = vec![None; n];
        for (t, props) in ranked.iter().enumerate() {
            for &p in props {
                owner[p] = match owner[p] {
                    Some(o) if table.score(o, p) >= table.score(t, p) => Some(o),
                    _ => Some(t),
                };
            }
        }
        for (t, props) in ranked.iter_mut().enumerate() {
            props.retain(|&p| owner[p] == Some(t));
        }
    }
    Assignment::one_to_many(ranked, n, k > n)
}

/// Resolves shared proposals to the target with the smallest `key`
/// (ties: lowest target index), preserving each target's order.
pub(crate) fn resolve_by_min(per_target: &mut [Vec<usize>], num_proposals: usize, key: impl Fn(usize, usize) -> f64) {
    let mut owner: Vec<Option<usize>> = vec![None; num_proposals];
    for (t, props) in per_target.iter().enumerate() {
        for &p in props {
            owner[p] = match owner[p] {
                Some(o) if key(o, p) <= key(t, p) => Some(o),
                _ => Some(t),
            };
        }
    }
    for (t, props) in per_target.iter_mut().enumerate() {
        props.retain(|&p| owner[p] == Some(t));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn prop(x0: f64, score: f64) -> Detection {
        Detection::single(BBox::from_corners(x0, 0.0, x0 + 0.2, 0.2), 0, score, 1).unwrap()
    }

    fn target(x0: f64) -> PseudoLabel {
        PseudoLabel::new(BBox::from_corners(x0, 0.0, x0 + 0.2, 0.2), 0, 1.0)
    }

    #[test]
    fn single_target_k1_takes_argmax() {
        let props = vec![prop(0.05, 0.9), prop(0.0, 0.6), prop(0.3, 0.99)];
        let a = one_to_many(&[target(0.0)], &props, &MatchScoreParams::default(), 1, true).unwrap();
        // m = 0.9 * (0.15/0.25)^6 ~ 0.042 vs 0.6 * 1 = 0.6
        assert_eq!(a.per_target(), &[vec![1]]);
        a.validate(3).unwrap();
    }

    #[test]
    fn single_target_top3_by_sort() {
        let props: Vec<Detection> = [0.0, 0.01, 0.02, 0.03, 0.04].iter().map(|&x| prop(x, 0.8)).collect();
        let params = MatchScoreParams::default();
        let t = target(0.015);
        let mut m: Vec<(usize, f64)> = props
            .iter()
            .enumerate()
            .map(|(j, p)| (j, match_score(0.8, iou(p.bbox(), &t.bbox), &params)))
            .collect();
        m.sort_by(|a, b| b.1.total_cmp(&a.1));
        let a = one_to_many(&[t], &props, &params, 3, true).unwrap();
        let mut got = a.per_target()[0].clone();
        got.sort_unstable();
        let mut want: Vec<usize> = m[..3].iter().map(|x| x.0).collect();
        want.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn conflict_goes_to_larger_m_without_refill() {
        // Hand-traced 2x4 table of m values: both targets rank proposal 0 first.
        let table = MatchScoreTable {
            num_proposals: 4,
            scores: vec![0.9, 0.5, 0.4, 0.1, 0.8, 0.2, 0.1, 0.7],
            ious: vec![0.0; 8],
        };
        let a = one_to_many_from_table(&table, 2, 2, true);
        // target 0 ranks [0, 1], target 1 ranks [0, 3]; 0 goes to target 0.
        assert_eq!(a.per_target(), &[vec![0, 1], vec![3]]);
        assert_eq!(a.per_proposal().unwrap(), &[Some(0), Some(0), None, Some(1)]);

        let raw = one_to_many_from_table(&table, 2, 2, false);
        assert_eq!(raw.per_target(), &[vec![0, 1], vec![0, 3]]);
        assert!(raw.per_proposal().is_none());
    }

    #[test]
    fn k_larger_than_proposals_is_flagged() {
        let props = vec![prop(0.0, 0.5), prop(0.1, 0.5)];
        let a = one_to_many(&[target(0.0)], &props, &MatchScoreParams::default(), 5, true).unwrap();
        assert!(a.truncated());
        assert_eq!(a.per_target()[0].len(), 2);
        assert!(one_to_many(&[target(0.0)], &props, &MatchScoreParams::default(), 0, true).is_err());
    }
}
