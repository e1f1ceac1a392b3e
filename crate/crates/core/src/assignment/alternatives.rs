//! Max-IoU, ATSS and SimOTA assigners, single-level variants working directly
//! on proposal boxes.

use serde::{Deserialize, Serialize};

use crate::cost::{focal_cls_cost, CostWeights};
use crate::geometry::{iou, Detection};
use crate::mining::PseudoLabel;

use super::{resolve_by_min, Assignment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaxIouConfig {
    pub pos_thresh: f64,
    /// Give every target its best-overlapping proposal even below threshold.
    pub rescue_low_quality: bool,
}

impl Default for MaxIouConfig {
    fn default() -> Self {
        Self { pos_thresh: 0.5, rescue_low_quality: false }
    }
}

fn iou_table(targets: &[PseudoLabel], proposals: &[Detection]) -> Vec<Vec<f64>> {
    targets.iter().map(|t| proposals.iter().map(|p| iou(p.bbox(), &t.bbox)).collect()).collect()
}

/// Each proposal is positive for the target it overlaps most, when that IoU
/// reaches `pos_thresh`.
pub fn max_iou_assign(targets: &[PseudoLabel], proposals: &[Detection], cfg: &MaxIouConfig) -> Assignment {
    let n = proposals.len();
    let ious = iou_table(targets, proposals);
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (j, slot) in owner.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (t, row) in ious.iter().enumerate() {
            if best.is_none_or(|(_, b)| row[j] > b) {
                best = Some((t, row[j]));
            }
        }
        if let Some((t, u)) = best {
            if u >= cfg.pos_thresh {
                *slot = Some(t);
            }
        }
    }
    if cfg.rescue_low_quality {
        for (t, row) in ious.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (j, &u) in row.iter().enumerate() {
                if best.is_none_or(|(_, b)| u > b) {
                    best = Some((j, u));
                }
            }
            if let Some((j, u)) = best {
                if u > 0.0 {
                    owner[j] = Some(t);
                }
            }
        }
    }
    let mut per_target = vec![Vec::new(); targets.len()];
    for (j, o) in owner.iter().enumerate() {
        if let Some(t) = o {
            per_target[*t].push(j);
        }
    }
    Assignment::one_to_many(per_target, n, false)
}

/// Adaptive-threshold assignment.
///
/// Per target, the `candidate_k` proposals with the nearest centers are
/// candidates; the IoU threshold is the mean plus the population standard
/// deviation of their IoUs. Candidates at or above the threshold whose center
/// lies strictly inside the target are positive. Shared proposals go to the
/// target with the highest IoU.
pub fn atss_assign(targets: &[PseudoLabel], proposals: &[Detection], candidate_k: usize) -> Assignment {
    let n = proposals.len();
    let ious = iou_table(targets, proposals);
    let centers: Vec<(f64, f64)> = proposals.iter().map(|p| p.bbox().center()).collect();
    let mut per_target: Vec<Vec<usize>> = targets
        .iter()
        .enumerate()
        .map(|(t, target)| {
            let (tx, ty) = target.bbox.center();
            let dist: Vec<f64> = centers.iter().map(|(x, y)| ((x - tx).powi(2) + (y - ty).powi(2)).sqrt()).collect();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
            idx.truncate(candidate_k.max(1).min(n));
            if idx.is_empty() {
                return idx;
            }
            let k = idx.len() as f64;
            let mean = idx.iter().map(|&j| ious[t][j]).sum::<f64>() / k;
            let var = idx.iter().map(|&j| (ious[t][j] - mean).powi(2)).sum::<f64>() / k;
            let thresh = mean + var.sqrt();
            idx.retain(|&j| {
                let (cx, cy) = centers[j];
                ious[t][j] >= thresh && target.bbox.contains_strict(cx, cy)
            });
            idx
        })
        .collect();
    resolve_by_min(&mut per_target, n, |t, j| -ious[t][j]);
    Assignment::one_to_many(per_target, n, false)
}

/// Number of top IoUs summed to obtain each target's dynamic k.
pub const SIMOTA_TOP_IOUS: usize = 10;
/// Weight of the `-ln(IoU)` term in the SimOTA cost.
pub const SIMOTA_IOU_WEIGHT: f64 = 3.0;

/// Dynamic-k assignment.
///
/// Per target, `k = clamp(round(sum of its top-10 IoUs), 1, n)` and the `k`
/// proposals with the lowest `cls_cost + 3 * -ln(IoU + 1e-8)` are selected.
/// The classification term is the unweighted focal matching cost. Shared
/// proposals go to the cheapest target.
pub fn simota_assign(targets: &[PseudoLabel], proposals: &[Detection], w: &CostWeights) -> Assignment {
    let n = proposals.len();
    if n == 0 {
        return Assignment::one_to_many(vec![Vec::new(); targets.len()], 0, false);
    }
    let ious = iou_table(targets, proposals);
    let costs: Vec<Vec<f64>> = targets
        .iter()
        .zip(&ious)
        .map(|(t, row)| {
            proposals
                .iter()
                .zip(row)
                .map(|(p, &u)| focal_cls_cost(p.class_score(t.class_id), w) + SIMOTA_IOU_WEIGHT * -(u + 1e-8).ln())
                .collect()
        })
        .collect();
    let mut per_target: Vec<Vec<usize>> = (0..targets.len())
        .map(|t| {
            let mut sorted_ious = ious[t].clone();
            sorted_ious.sort_by(|a, b| b.total_cmp(a));
            let top: f64 = sorted_ious.iter().take(SIMOTA_TOP_IOUS).sum();
            let k = (top.round() as usize).clamp(1, n);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| costs[t][a].total_cmp(&costs[t][b]));
            idx.truncate(k);
            idx
        })
        .collect();
    resolve_by_min(&mut per_target, n, |t, j| costs[t][j]);
    Assignment::one_to_many(per_target, n, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn prop(b: BBox, s: f64) -> Detection {
        Detection::single(b, 0, s, 1).unwrap()
    }

    fn tgt(b: BBox) -> PseudoLabel {
        PseudoLabel::new(b, 0, 1.0)
    }

    #[test]
    fn max_iou_identical_is_positive() {
        let b = BBox::from_corners(0.1, 0.1, 0.3, 0.3);
        let a = max_iou_assign(&[tgt(b)], &[prop(b, 0.5)], &MaxIouConfig::default());
        assert_eq!(a.per_target(), &[vec![0]]);
    }

    #[test]
    fn max_iou_below_threshold_no_positives_unless_rescued() {
        let t = tgt(BBox::from_corners(0.0, 0.0, 0.2, 0.2));
        let p = prop(BBox::from_corners(0.1, 0.0, 0.3, 0.2), 0.5); // IoU 1/3
        let a = max_iou_assign(std::slice::from_ref(&t), std::slice::from_ref(&p), &MaxIouConfig::default());
        assert_eq!(a.num_positives(), 0);
        let cfg = MaxIouConfig { rescue_low_quality: true, ..Default::default() };
        assert_eq!(max_iou_assign(&[t], &[p], &cfg).num_positives(), 1);
    }

    #[test]
    fn max_iou_hand_table() {
        // targets T0=[0,0,0.2,0.2], T1=[0.5,0,0.7,0.2]
        // P0=[0,0,0.2,0.2]   IoU (1, 0)        -> T0
        // P1=[0.55,0,0.75,0.2] IoU (0, 0.6)    -> T1
        // P2=[0.1,0,0.6,0.2] IoU (0.2, 0.2)    -> none
        let ts = [tgt(BBox::from_corners(0.0, 0.0, 0.2, 0.2)), tgt(BBox::from_corners(0.5, 0.0, 0.7, 0.2))];
        let ps = [
            prop(BBox::from_corners(0.0, 0.0, 0.2, 0.2), 0.5),
            prop(BBox::from_corners(0.55, 0.0, 0.75, 0.2), 0.5),
            prop(BBox::from_corners(0.1, 0.0, 0.6, 0.2), 0.5),
        ];
        let a = max_iou_assign(&ts, &ps, &MaxIouConfig::default());
        assert_eq!(a.per_target(), &[vec![0], vec![1]]);
        assert_eq!(a.per_proposal().unwrap(), &[Some(0), Some(1), None]);
    }

    #[test]
    fn atss_singleton_exact_is_positive() {
        let b = BBox::from_corners(0.1, 0.1, 0.3, 0.3);
        let a = atss_assign(&[tgt(b)], &[prop(b, 0.5)], 9);
        assert_eq!(a.per_target(), &[vec![0]]);
    }

    #[test]
    fn atss_equal_ious_all_inside_positive() {
        // Four shifted copies of the target, each with IoU 0.6/1.4 = 3/7.
        let t = BBox::from_corners(0.2, 0.2, 0.4, 0.4);
        let ps: Vec<Detection> = [(0.06, 0.0), (-0.06, 0.0), (0.0, 0.06), (0.0, -0.06)]
            .iter()
            .map(|&(dx, dy)| prop(t.translate(dx, dy), 0.5))
            .collect();
        let ious: Vec<f64> = ps.iter().map(|p| iou(p.bbox(), &t)).collect();
        assert!(ious.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
        let a = atss_assign(&[tgt(t)], &ps, 9);
        assert_eq!(a.per_target()[0].len(), 4);
    }

    #[test]
    fn atss_hand_computed_filter() {
        // Target [0.2,0.2,0.4,0.4]; proposals shifted in x by d with unit overlap
        // IoU = (0.2-d)/(0.2+d):
        //   d=0     -> 1.0
        //   d=0.02  -> 0.818181..
        //   d=0.05  -> 0.6
        //   d=0.08  -> 0.428571..
        //   d=0.12  -> 0.25        (center 0.42, outside)
        //   d=0.3   -> 0 (k=5 excludes it: farthest center)
        // Candidates (k=5): first five. mean = 0.619351, pop std = 0.263450,
        // threshold = 0.882801 -> only d=0 passes.
        let t = BBox::from_corners(0.2, 0.2, 0.4, 0.4);
        let ps: Vec<Detection> =
            [0.0, 0.02, 0.05, 0.08, 0.12, 0.3].iter().map(|&d| prop(t.translate(d, 0.0), 0.5)).collect();
        let a = atss_assign(&[tgt(t)], &ps, 5);
        assert_eq!(a.per_target(), &[vec![0]]);

        // Without the perfect proposal: candidates d=0.02..0.3 (k=5 of 5).
        // IoUs 0.818182, 0.6, 0.428571, 0.25, 0 -> mean 0.419351,
        // std 0.279318, thresh 0.698669 -> d=0.02 only.
        let a = atss_assign(&[tgt(t)], &ps[1..], 5);
        assert_eq!(a.per_target(), &[vec![0]]);
    }

    #[test]
    fn simota_single_perfect() {
        let b = BBox::from_corners(0.1, 0.1, 0.3, 0.3);
        let a = simota_assign(&[tgt(b)], &[prop(b, 0.9), prop(b.translate(0.5, 0.5), 0.9)], &CostWeights::default());
        assert_eq!(a.per_target(), &[vec![0]]);
    }

    #[test]
    fn simota_zero_iou_still_assigns_one() {
        let t = tgt(BBox::from_corners(0.0, 0.0, 0.1, 0.1));
        let ps = vec![
            prop(BBox::from_corners(0.5, 0.5, 0.6, 0.6), 0.2),
            prop(BBox::from_corners(0.7, 0.7, 0.8, 0.8), 0.9),
        ];
        let a = simota_assign(&[t], &ps, &CostWeights::default());
        // equal IoU terms; the higher class score is cheaper
        assert_eq!(a.per_target(), &[vec![1]]);
    }

    #[test]
    fn simota_hand_trace() {
        // T0=[0,0,0.2,0.2], T1=[0.5,0,0.7,0.2] ; proposals P0..P5.
        //   P0 = T0 exactly            IoU(T0)=1
        //   P1 = T0 shifted 0.02       IoU(T0)=0.818182
        //   P2 = T0 shifted 0.05       IoU(T0)=0.6
        //   P3 = T1 exactly            IoU(T1)=1
        //   P4 = T1 shifted 0.1        IoU(T1)=1/3
        //   P5 = far away              0
        // dynamic k: T0 round(2.418) = 2, T1 round(1.333) = 1.
        // Scores equal, so cost order follows IoU: T0 -> {P0, P1}, T1 -> {P3}.
        let t0 = BBox::from_corners(0.0, 0.0, 0.2, 0.2);
        let t1 = BBox::from_corners(0.5, 0.0, 0.7, 0.2);
        let ps = vec![
            prop(t0, 0.6),
            prop(t0.translate(0.02, 0.0), 0.6),
            prop(t0.translate(0.05, 0.0), 0.6),
            prop(t1, 0.6),
            prop(t1.translate(0.1, 0.0), 0.6),
            prop(BBox::from_corners(0.9, 0.9, 1.0, 1.0), 0.6),
        ];
        let a = simota_assign(&[tgt(t0), tgt(t1)], &ps, &CostWeights::default());
        assert_eq!(a.per_target(), &[vec![0, 1], vec![3]]);
        a.validate(6).unwrap();
    }
}
