//! Confidence-based pseudo-label filters.

use crate::error::{Error, Result};
use crate::geometry::{sort_by_score_desc, Detection};

use super::PseudoLabel;

fn to_labels(dets: &[Detection], order: impl IntoIterator<Item = usize>) -> Vec<PseudoLabel> {
    order.into_iter().map(|i| PseudoLabel::from_detection(&dets[i])).collect()
}

/// Detections scoring strictly above `tau_s`, by descending score.
pub fn filter_fixed(dets: &[Detection], tau_s: f64) -> Vec<PseudoLabel> {
    let order = sort_by_score_desc(dets.iter().map(Detection::score));
    to_labels(dets, order.into_iter().filter(|&i| dets[i].score() > tau_s))
}

/// The `k` highest-scoring detections (all of them when fewer).
pub fn filter_topk(dets: &[Detection], k: usize) -> Result<Vec<PseudoLabel>> {
    if k == 0 {
        return Err(Error::param("top-k filter needs k >= 1"));
    }
    let mut order = sort_by_score_desc(dets.iter().map(Detection::score));
    order.truncate(k);
    Ok(to_labels(dets, order))
}

/// Image-adaptive threshold `mean + std` over this image's scores (population
/// standard deviation); detections at or above it are kept.
pub fn filter_mean_std(dets: &[Detection]) -> Vec<PseudoLabel> {
    match mean_std_threshold(dets) {
        None => Vec::new(),
        Some(tau) => {
            // Summation rounding can lift the threshold a few ulps above a
            // constant score vector; compare with a relative slack.
            let slack = 1e-12 * tau.abs().max(1.0);
            let order = sort_by_score_desc(dets.iter().map(Detection::score));
            to_labels(dets, order.into_iter().filter(|&i| dets[i].score() >= tau - slack))
        }
    }
}

/// `mean + population std` of the detection scores, `None` when empty.
pub fn mean_std_threshold(dets: &[Detection]) -> Option<f64> {
    if dets.is_empty() {
        return None;
    }
    let n = dets.len() as f64;
    let mean = dets.iter().map(Detection::score).sum::<f64>() / n;
    let var = dets.iter().map(|d| (d.score() - mean).powi(2)).sum::<f64>() / n;
    Some(mean + var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn dets(scores: &[f64]) -> Vec<Detection> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let x = i as f64 * 0.05;
                Detection::single(BBox::from_corners(x, 0.0, x + 0.04, 0.04), 0, s, 1).unwrap()
            })
            .collect()
    }

    fn confidences(labels: &[PseudoLabel]) -> Vec<f64> {
        labels.iter().map(|l| l.confidence).collect()
    }

    #[test]
    fn fixed_threshold() {
        let d = dets(&[0.41, 0.9, 0.39]);
        assert_eq!(confidences(&filter_fixed(&d, 0.4)), vec![0.9, 0.41]);
        assert!(filter_fixed(&dets(&[0.1, 0.2]), 0.4).is_empty());
        assert_eq!(filter_fixed(&d, 0.0).len(), 3);
    }

    #[test]
    fn topk() {
        let d = dets(&[0.3, 0.5, 0.1]);
        assert_eq!(filter_topk(&d, 9).unwrap().len(), 3);
        assert_eq!(confidences(&filter_topk(&d, 1).unwrap()), vec![0.5]);
        let many: Vec<f64> = (0..12).map(|i| (i as f64 * 7.0 % 12.0) / 12.0).collect();
        let mut sorted = many.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(confidences(&filter_topk(&dets(&many), 9).unwrap()), sorted[..9].to_vec());
        assert!(filter_topk(&d, 0).is_err());
    }

    #[test]
    fn mean_std() {
        let kept = filter_mean_std(&dets(&[0.9, 0.5, 0.1]));
        assert_eq!(confidences(&kept), vec![0.9]);
        let tau = mean_std_threshold(&dets(&[0.9, 0.5, 0.1])).unwrap();
        assert!((tau - (0.5 + (0.32f64 / 3.0).sqrt())).abs() < 1e-12);
        assert!((tau - 0.8266).abs() < 1e-4);
    }

    #[test]
    fn mean_std_constant_and_single() {
        assert_eq!(filter_mean_std(&dets(&[0.1, 0.1, 0.1])).len(), 3);
        assert_eq!(filter_mean_std(&dets(&[0.7; 7])).len(), 7);
        assert_eq!(filter_mean_std(&dets(&[0.2])).len(), 1);
        assert!(filter_mean_std(&[]).is_empty());
    }
}
