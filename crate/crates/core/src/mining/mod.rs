//! Pseudo-label generation: confidence filters and cost-based mining.
//!
//! Cost-based mining takes the image-adaptive (`mean + std`) pseudo boxes of
//! a whole batch, matches each image's boxes one-to-one against that image's
//! proposals, pools the matched costs over the batch and fits a two-component
//! Gaussian mixture to them. Boxes cheaper than the mean of the low-cost
//! component are kept.

mod filters;
mod gmm;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use filters::{filter_fixed, filter_mean_std, filter_topk, mean_std_threshold};
pub use gmm::{fit_gmm_1d, fit_gmm_1d_from, EmConfig, GmmFit, MixtureParams};

use crate::assignment::hungarian;
use crate::cost::{build_cost_matrix, CostWeights};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};

/// A teacher detection promoted to a training target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
    /// Matched cost, set by cost-based mining.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub match_cost: Option<f64>,
}

impl PseudoLabel {
    pub fn new(bbox: BBox, class_id: usize, confidence: f64) -> Self {
        Self { bbox, class_id, confidence, match_cost: None }
    }

    pub fn from_detection(d: &Detection) -> Self {
        Self::new(*d.bbox(), d.class_id(), d.score())
    }
}

/// The mining threshold: the mean of the reliable (low-cost) component.
pub fn mining_threshold(fit: &GmmFit) -> f64 {
    fit.mu_r.min(fit.mu_u)
}

/// The cost maximizing the reliable-component posterior over `[lo, hi]`,
/// found on a uniform grid. Reported next to [`mining_threshold`] only.
pub fn posterior_argmax_cost(fit: &GmmFit, lo: f64, hi: f64) -> f64 {
    const STEPS: usize = 1000;
    let mut best = (lo, fit.reliable_posterior(lo));
    for i in 1..=STEPS {
        let c = lo + (hi - lo) * i as f64 / STEPS as f64;
        let p = fit.reliable_posterior(c);
        if p > best.1 {
            best = (c, p);
        }
    }
    best.0
}

/// One image worth of mining input.
#[derive(Debug, Clone, Copy)]
pub struct MiningImage<'a> {
    pub initial: &'a [PseudoLabel],
    pub proposals: &'a [Detection],
}

/// Result of mining one batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiningOutcome {
    /// Kept pseudo labels per image, with `match_cost` filled in.
    pub kept: Vec<Vec<PseudoLabel>>,
    pub fit: Option<GmmFit>,
    pub threshold: Option<f64>,
    pub posterior_threshold: Option<f64>,
    /// Initial boxes dropped because their image had no proposals.
    pub dropped_no_proposals: usize,
    /// Initial boxes left unmatched because their image had fewer proposals
    /// than boxes.
    pub dropped_unmatched: usize,
    /// The mixture could not be fitted and every matched box was kept.
    pub fallback: bool,
}

impl MiningOutcome {
    pub fn num_kept(&self) -> usize {
        self.kept.iter().map(Vec::len).sum()
    }
}

/// Hungarian-matched cost of every initial box (`None` when unmatched).
pub fn matched_costs(initial: &[PseudoLabel], proposals: &[Detection], w: &CostWeights) -> Result<Vec<Option<f64>>> {
    if initial.is_empty() {
        return Ok(Vec::new());
    }
    if proposals.is_empty() {
        return Ok(vec![None; initial.len()]);
    }
    let costs = build_cost_matrix(initial, proposals, w)?;
    let mut out = vec![None; initial.len()];
    if initial.len() <= proposals.len() {
        for (t, p) in hungarian(&costs)?.pairs() {
            out[t] = Some(costs.get(t, p));
        }
    } else {
        // more boxes than proposals: every proposal is matched to one box
        let transposed = costs.transpose();
        for (p, t) in hungarian(&transposed)?.pairs() {
            out[t] = Some(costs.get(t, p));
        }
    }
    Ok(out)
}

/// Cost-based mining over a batch of images, with costs pooled batch-wide.
pub fn mine_cost_based_batch(batch: &[MiningImage<'_>], w: &CostWeights, em: &EmConfig) -> Result<MiningOutcome> {
    let per_image: Vec<Vec<Option<f64>>> = batch
        .par_iter()
        .map(|img| matched_costs(img.initial, img.proposals, w))
        .collect::<Result<_>>()?;

    let mut dropped_no_proposals = 0;
    let mut dropped_unmatched = 0;
    for (img, costs) in batch.iter().zip(&per_image) {
        if img.proposals.is_empty() {
            dropped_no_proposals += img.initial.len();
        } else {
            dropped_unmatched += costs.iter().filter(|c| c.is_none()).count();
        }
    }

    let pooled: Vec<f64> = per_image.iter().flatten().flatten().copied().collect();
    let (fit, threshold, posterior_threshold, fallback) = match fit_gmm_1d(&pooled, em) {
        Ok(fit) => {
            let lo = pooled.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = pooled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let tau = mining_threshold(&fit);
            let post = posterior_argmax_cost(&fit, lo, hi);
            (Some(fit), Some(tau), Some(post), false)
        }
        Err(Error::DegenerateFit(_)) => (None, None, None, true),
        Err(e) => return Err(e),
    };

    let kept = batch
        .iter()
        .zip(&per_image)
        .map(|(img, costs)| {
            img.initial
                .iter()
                .zip(costs)
                .filter_map(|(label, cost)| {
                    let c = (*cost)?;
                    let keep = threshold.is_none_or(|tau| c < tau);
                    keep.then(|| PseudoLabel { match_cost: Some(c), ..label.clone() })
                })
                .collect()
        })
        .collect();

    Ok(MiningOutcome { kept, fit, threshold, posterior_threshold, dropped_no_proposals, dropped_unmatched, fallback })
}

/// Single-image convenience wrapper around [`mine_cost_based_batch`].
pub fn mine_cost_based(
    initial: &[PseudoLabel],
    proposals: &[Detection],
    w: &CostWeights,
    em: &EmConfig,
) -> Result<MiningOutcome> {
    mine_cost_based_batch(&[MiningImage { initial, proposals }], w, em)
}
