//! Axis-aligned boxes in normalized image coordinates and the overlap
//! primitives built on them: IoU, GIoU, center-form L1 and greedy NMS.
//!
//! Boxes are stored in corner form. Losses differentiate with respect to the
//! center form `(cx, cy, w, h)`, which is what a set-prediction head regresses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned bounding box, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Builds a box, rejecting inverted or non-finite coordinates.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max };
        if !b.is_finite() {
            return Err(Error::InvalidBox(format!("non-finite coordinates {b:?}")));
        }
        if x_min > x_max || y_min > y_max {
            return Err(Error::InvalidBox(format!("inverted box {b:?}")));
        }
        Ok(b)
    }

    /// Unchecked constructor for literals and internal arithmetic.
    pub const fn from_corners(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    /// Builds a box from `(cx, cy, w, h)`. Negative extents are rejected.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if w < 0.0 || h < 0.0 {
            return Err(Error::InvalidBox(format!("negative extent w={w} h={h}")));
        }
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    #[cfg(test)]
    pub(crate) fn from_center_unchecked(c: [f64; 4]) -> Self {
        Self::from_corners(
            c[0] - 0.5 * c[2],
            c[1] - 0.5 * c[3],
            c[0] + 0.5 * c[2],
            c[1] + 0.5 * c[3],
        )
    }

    /// `[cx, cy, w, h]`.
    pub fn to_center(&self) -> [f64; 4] {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
            self.x_max - self.x_min,
            self.y_max - self.y_min,
        ]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn is_finite(&self) -> bool {
        self.x_min.is_finite() && self.y_min.is_finite() && self.x_max.is_finite() && self.y_max.is_finite()
    }

    pub fn is_valid(&self) -> bool {
        self.is_finite() && self.x_min <= self.x_max && self.y_min <= self.y_max
    }

    /// Strict containment of a point in the box interior.
    pub fn contains_strict(&self, x: f64, y: f64) -> bool {
        x > self.x_min && x < self.x_max && y > self.y_min && y < self.y_max
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::from_corners(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::from_corners(self.x_min * s, self.y_min * s, self.x_max * s, self.y_max * s)
    }

    fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// A detector output row: a box and per-class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    bbox: BBox,
    scores: Vec<f64>,
    class_id: usize,
    score: f64,
}

impl Detection {
    /// `scores` must be non-empty with entries in `[0, 1]`.
    pub fn new(bbox: BBox, scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidDetection("empty score vector".into()));
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidDetection(format!("score {bad} outside [0, 1]")));
        }
        let (class_id, score) = argmax(&scores);
        Ok(Self { bbox, scores, class_id, score })
    }

    /// A detection that only carries one class probability, as produced by
    /// detector dumps (`category_id`, `score`). Other classes get 0.
    pub fn single(bbox: BBox, class_id: usize, score: f64, num_classes: usize) -> Result<Self> {
        if class_id >= num_classes {
            return Err(Error::InvalidDetection(format!(
                "class {class_id} out of range for {num_classes} classes"
            )));
        }
        let mut scores = vec![0.0; num_classes];
        scores[class_id] = score;
        Self::new(bbox, scores)
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn num_classes(&self) -> usize {
        self.scores.len()
    }

    /// Probability for `class`, 0 when out of range.
    pub fn class_score(&self, class: usize) -> f64 {
        self.scores.get(class).copied().unwrap_or(0.0)
    }
}

/// Index and value of the maximum, lowest index on ties.
pub(crate) fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    iw * ih
}

/// Intersection over union. Zero when the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU. A degenerate enclosing box falls back to plain IoU.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    let hull = (a.x_max.max(b.x_max) - a.x_min.min(b.x_min)) * (a.y_max.max(b.y_max) - a.y_min.min(b.y_min));
    if hull <= 0.0 {
        iou
    } else {
        iou - (hull - union) / hull
    }
}

/// L1 distance between the `(cx, cy, w, h)` forms of two boxes.
pub fn l1_center_form(a: &BBox, b: &BBox) -> f64 {
    let ca = a.to_center();
    let cb = b.to_center();
    ca.iter().zip(cb.iter()).map(|(x, y)| (x - y).abs()).sum()
}

/// GIoU of `pred` against `target` and its gradient with respect to the
/// center form `(cx, cy, w, h)` of `pred`.
///
/// At kinks (coincident edges) the derivative is the one-sided value in which
/// `pred` owns the edge for both the intersection and the hull terms.
pub fn giou_grad_center(pred: &BBox, target: &BBox) -> (f64, [f64; 4]) {
    let p = pred.as_array();
    let t = target.as_array();

    let ix1 = p[0].max(t[0]);
    let iy1 = p[1].max(t[1]);
    let ix2 = p[2].min(t[2]);
    let iy2 = p[3].min(t[3]);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };

    let pw = p[2] - p[0];
    let ph = p[3] - p[1];
    let union = pw * ph + target.area() - inter;

    let hx1 = p[0].min(t[0]);
    let hy1 = p[1].min(t[1]);
    let hx2 = p[2].max(t[2]);
    let hy2 = p[3].max(t[3]);
    let hw = hx2 - hx1;
    let hh = hy2 - hy1;
    let hull = hw * hh;

    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }

    // d/d(x1, y1, x2, y2) of pred
    let mut d_inter = [0.0; 4];
    if overlapping {
        if p[0] >= t[0] {
            d_inter[0] = -ih;
        }
        if p[1] >= t[1] {
            d_inter[1] = -iw;
        }
        if p[2] <= t[2] {
            d_inter[2] = ih;
        }
        if p[3] <= t[3] {
            d_inter[3] = iw;
        }
    }
    let d_area = [-ph, -pw, ph, pw];
    let d_union: Vec<f64> = (0..4).map(|k| d_area[k] - d_inter[k]).collect();

    let iou = inter / union;
    let mut g = [0.0; 4];
    for k in 0..4 {
        g[k] = d_inter[k] / union - inter * d_union[k] / (union * union);
    }

    let value = if hull <= 0.0 {
        iou
    } else {
        let mut d_hull = [0.0; 4];
        if p[0] <= t[0] {
            d_hull[0] = -hh;
        }
        if p[1] <= t[1] {
            d_hull[1] = -hw;
        }
        if p[2] >= t[2] {
            d_hull[2] = hh;
        }
        if p[3] >= t[3] {
            d_hull[3] = hw;
        }
        // giou = iou - 1 + union / hull
        for k in 0..4 {
            g[k] += d_union[k] / hull - union * d_hull[k] / (hull * hull);
        }
        iou - (hull - union) / hull
    };

    (value, corner_to_center_grad(g))
}

/// Center-form L1 of `pred` against `target` and its (sub)gradient with
/// respect to `pred`'s center form. `sign(0)` is taken as 0.
pub fn l1_grad_center(pred: &BBox, target: &BBox) -> (f64, [f64; 4]) {
    let cp = pred.to_center();
    let ct = target.to_center();
    let mut g = [0.0; 4];
    let mut v = 0.0;
    for k in 0..4 {
        let d = cp[k] - ct[k];
        v += d.abs();
        g[k] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    (v, g)
}

/// Chain rule from corner partials to `(cx, cy, w, h)` partials.
fn corner_to_center_grad(g: [f64; 4]) -> [f64; 4] {
    [g[0] + g[2], g[1] + g[3], 0.5 * (g[2] - g[0]), 0.5 * (g[3] - g[1])]
}

/// Greedy non-maximum suppression.
///
/// Detections are visited by descending score (lowest index first on ties); a
/// detection is dropped when it overlaps an already kept one (of the same
/// class when `class_wise`) with IoU strictly above `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64, class_wise: bool) -> Result<Vec<Detection>> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::InvalidParameter(format!("nms iou_thresh {iou_thresh} outside (0, 1]")));
    }
    Ok(nms_indices(dets, iou_thresh, class_wise).into_iter().map(|i| dets[i].clone()).collect())
}

/// Indices kept by [`nms`], in output order.
pub fn nms_indices(dets: &[Detection], iou_thresh: f64, class_wise: bool) -> Vec<usize> {
    let order = sort_by_score_desc(dets.iter().map(Detection::score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| {
            (!class_wise || dets[k].class_id() == dets[i].class_id())
                && iou(dets[k].bbox(), dets[i].bbox()) > iou_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Indices ordered by descending value; equal values keep index order.
pub(crate) fn sort_by_score_desc<I: IntoIterator<Item = f64>>(values: I) -> Vec<usize> {
    let values: Vec<f64> = values.into_iter().collect();
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::from_corners(x0, y0, x1, y1)
    }

    fn det(bb: BBox, class: usize, score: f64) -> Detection {
        Detection::single(bb, class, score, 3).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b(0.1, 0.2, 0.5, 0.6);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(2.0, 0.0, 3.0, 1.0)), 0.0);
        let v = iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let p = b(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(iou(&p, &b(0.0, 0.0, 1.0, 1.0)), 0.0);
        assert_eq!(giou(&p, &p), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &a), 1.0);
        assert_eq!(giou(&a, &b(1.0, 0.0, 2.0, 1.0)), 0.0);
        let v = giou(&a, &b(2.0, 0.0, 3.0, 1.0));
        assert!((v + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn l1_examples() {
        let a = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(l1_center_form(&a, &a), 0.0);
        assert!((l1_center_form(&a, &b(0.1, 0.0, 1.1, 1.0)) - 0.1).abs() < 1e-12);
        assert!((l1_center_form(&a, &b(0.0, 0.0, 2.0, 2.0)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn center_round_trip() {
        let a = b(0.123, 0.456, 0.789, 0.999);
        let c = a.to_center();
        let r = BBox::from_center(c[0], c[1], c[2], c[3]).unwrap();
        for (x, y) in a.as_array().iter().zip(r.as_array().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn inverted_box_rejected() {
        assert!(BBox::new(0.5, 0.0, 0.4, 1.0).is_err());
        assert!(BBox::new(0.0, f64::NAN, 0.4, 1.0).is_err());
    }

    #[test]
    fn detection_argmax_ties_lowest_index() {
        let d = Detection::new(b(0.0, 0.0, 1.0, 1.0), vec![0.2, 0.7, 0.7]).unwrap();
        assert_eq!(d.class_id(), 1);
        assert_eq!(d.score(), 0.7);
        assert!(Detection::new(b(0.0, 0.0, 1.0, 1.0), vec![1.2]).is_err());
    }

    #[test]
    fn nms_identical_boxes_keeps_highest() {
        let bb = b(0.1, 0.1, 0.4, 0.4);
        let out = nms(&[det(bb, 0, 0.8), det(bb, 0, 0.9)], 0.5, true).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score(), 0.9);
    }

    #[test]
    fn nms_disjoint_keeps_both() {
        let out = nms(&[det(b(0.0, 0.0, 0.1, 0.1), 0, 0.5), det(b(0.5, 0.5, 0.6, 0.6), 0, 0.6)], 0.5, true).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score(), 0.6);
    }

    #[test]
    fn nms_chain_keeps_first_and_last() {
        // A=[0,1], B=[0.3,1.3], C=[0.6,1.6] (unit height):
        // IoU(A,B)=0.7/1.3≈0.54, IoU(B,C)≈0.54, IoU(A,C)=0.4/1.6=0.25.
        let a = det(b(0.0, 0.0, 1.0, 1.0), 0, 0.9);
        let bb = det(b(0.3, 0.0, 1.3, 1.0), 0, 0.8);
        let c = det(b(0.6, 0.0, 1.6, 1.0), 0, 0.7);
        let out = nms(&[c.clone(), a.clone(), bb], 0.5, true).unwrap();
        assert_eq!(out, vec![a, c]);
    }

    #[test]
    fn nms_class_wise_keeps_other_class() {
        let bb = b(0.1, 0.1, 0.4, 0.4);
        let dets = [det(bb, 0, 0.9), det(bb, 1, 0.8)];
        assert_eq!(nms(&dets, 0.5, true).unwrap().len(), 2);
        assert_eq!(nms(&dets, 0.5, false).unwrap().len(), 1);
        assert!(nms(&[], 0.5, true).unwrap().is_empty());
        assert!(nms(&dets, 0.0, true).is_err());
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let pred = b(0.12, 0.2, 0.5, 0.71);
        let target = b(0.3, 0.1, 0.8, 0.55);
        let (_, g) = giou_grad_center(&pred, &target);
        let c = pred.to_center();
        let h = 1e-6;
        for k in 0..4 {
            let mut up = c;
            let mut dn = c;
            up[k] += h;
            dn[k] -= h;
            let fd = (giou(&BBox::from_center_unchecked(up), &target)
                - giou(&BBox::from_center_unchecked(dn), &target))
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "k={k} fd={fd} g={}", g[k]);
        }
    }
}
