//! Self-check suite: oracles and properties run against the library itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::assignment::{hungarian, one_to_many, MatchScoreTable};
use crate::consistency::{
    build_attention_mask, consistency_loss, toy_decode, DecoderConfig, DecoderParams, FeatureGrid, Matrix, QuerySet,
};
use crate::cost::{build_cost_matrix, CostMatrix, CostWeights, MatchScoreParams};
use crate::error::Result;
use crate::geometry::{BBox, Detection};
use crate::losses::{
    flatten_proposals, normalize_match_scores, o2m_cls_loss, o2m_losses, o2m_reg_loss, o2o_losses, unflatten_proposals,
    O2mLossConfig, RegPair,
};
use crate::mining::{fit_gmm_1d, EmConfig, PseudoLabel};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    /// Passes needed for the check to hold.
    pub required: usize,
}

impl CheckResult {
    pub fn ok(&self) -> bool {
        self.passed >= self.required
    }
}

/// Minimum total cost over all injections of rows into columns.
pub fn brute_force_min(c: &CostMatrix) -> f64 {
    fn go(c: &CostMatrix, row: usize, used: &mut Vec<bool>) -> f64 {
        if row == c.num_targets() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..c.num_proposals() {
            if !used[j] {
                used[j] = true;
                best = best.min(c.get(row, j) + go(c, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(c, 0, &mut vec![false; c.num_proposals()])
}

fn hungarian_check(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckResult> {
    let mut passed = 0;
    for _ in 0..trials {
        let n = rng.random_range(1..=5);
        let m = rng.random_range(n..=7);
        let values: Vec<f64> = (0..n * m).map(|_| rng.random_range(0..100) as f64).collect();
        let c = CostMatrix::new(n, m, values)?;
        let a = hungarian(&c)?;
        if c.total(a.pairs()) == brute_force_min(&c) {
            passed += 1;
        }
    }
    Ok(CheckResult { name: "hungarian_brute_force", passed, total: trials, required: trials })
}

/// Random box strictly inside the unit square.
pub fn random_box(rng: &mut impl Rng) -> BBox {
    let w = rng.random_range(0.05..0.4);
    let h = rng.random_range(0.05..0.4);
    let cx = rng.random_range(0.25..0.75);
    let cy = rng.random_range(0.25..0.75);
    BBox::from_corners(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Random detections with scores in `[0.02, 0.98]`.
pub fn random_proposals(rng: &mut impl Rng, n: usize, num_classes: usize) -> Result<Vec<Detection>> {
    (0..n)
        .map(|_| Detection::new(random_box(rng), (0..num_classes).map(|_| rng.random_range(0.02..0.98)).collect()))
        .collect()
}

fn fd_matches(f: impl Fn(&[f64]) -> Option<f64>, x: &[f64], grad: &[f64]) -> bool {
    let h = 1e-5;
    (0..x.len()).all(|i| {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        match (f(&xp), f(&xm)) {
            (Some(a), Some(b)) => {
                let fd = (a - b) / (2.0 * h);
                (fd - grad[i]).abs() <= 1e-4 * fd.abs().max(grad[i].abs()) + 1e-7
            }
            _ => false,
        }
    })
}

fn o2m_detached(
    x: &[f64],
    nc: usize,
    pairs: &[(usize, usize)],
    m_hat: &[f64],
    targets: &[PseudoLabel],
    gamma: f64,
) -> Option<f64> {
    let ps = unflatten_proposals(x, nc).ok()?;
    let mut is_pos = vec![false; ps.len() * nc];
    let mut pos = Vec::new();
    let mut reg = Vec::new();
    for (&(t, p), &mh) in pairs.iter().zip(m_hat) {
        let c = targets[t].class_id;
        is_pos[p * nc + c] = true;
        pos.push((ps[p].class_score(c), mh));
        reg.push(RegPair { m_hat: mh, pred: *ps[p].bbox(), target: targets[t].bbox });
    }
    let neg: Vec<f64> = ps
        .iter()
        .flat_map(|d| d.scores().iter().copied())
        .enumerate()
        .filter(|(i, _)| !is_pos[*i])
        .map(|(_, s)| s)
        .collect();
    Some(o2m_cls_loss(&pos, &neg, gamma).value + o2m_reg_loss(&reg).value())
}

fn gradient_check(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckResult> {
    let w = CostWeights::default();
    let params = MatchScoreParams::default();
    let cfg = O2mLossConfig::default();
    let mut passed = 0;
    for _ in 0..trials {
        let nc = 3;
        let proposals = random_proposals(rng, 6, nc)?;
        let targets: Vec<PseudoLabel> =
            (0..2).map(|_| PseudoLabel::new(random_box(rng), rng.random_range(0..nc), 1.0)).collect();
        let x = flatten_proposals(&proposals);

        let a = hungarian(&build_cost_matrix(&targets, &proposals, &w)?)?;
        let g = o2o_losses(&a, &proposals, &targets, &w)?.grads.unwrap_or_default();
        let o2o_ok = fd_matches(
            |x| o2o_losses(&a, &unflatten_proposals(x, nc).ok()?, &targets, &w).ok().map(|l| l.total),
            &x,
            &g,
        );

        // one-to-many with the soft targets held fixed
        let m = one_to_many(&targets, &proposals, &params, 3, true)?;
        let g = o2m_losses(&m, &proposals, &targets, &params, &cfg)?.grads.unwrap_or_default();
        let table = MatchScoreTable::compute(&targets, &proposals, &params);
        let pairs: Vec<(usize, usize)> = m.pairs().collect();
        let ms: Vec<f64> = pairs.iter().map(|&(t, p)| table.score(t, p)).collect();
        let us: Vec<f64> = pairs.iter().map(|&(t, p)| table.iou(t, p)).collect();
        let m_hat = normalize_match_scores(&m, &ms, &us)?.m_hat;
        let o2m_ok = fd_matches(|x| o2m_detached(x, nc, &pairs, &m_hat, &targets, cfg.gamma), &x, &g);

        let rows = rng.random_range(1..5);
        let s = Matrix::random(rows, 4, 1.0, rng);
        let t = Matrix::random(rows, 4, 1.0, rng);
        let cg = consistency_loss(&s, &t)?.grad_student;
        let cons_ok = fd_matches(
            |x| consistency_loss(&Matrix::new(rows, 4, x.to_vec()).ok()?, &t).ok().map(|l| l.value),
            s.data(),
            cg.data(),
        );

        if o2o_ok && cons_ok && o2m_ok {
            passed += 1;
        }
    }
    Ok(CheckResult { name: "gradient_finite_differences", passed, total: trials, required: trials })
}

fn gmm_check(seeds: u64) -> Result<CheckResult> {
    let mut passed = 0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = Normal::new(1.0, 0.1).expect("valid");
        let hi = Normal::new(4.0, 0.5).expect("valid");
        let mut x: Vec<f64> = (0..200).map(|_| lo.sample(&mut rng)).collect();
        x.extend((0..200).map(|_| hi.sample(&mut rng)));
        let fit = fit_gmm_1d(&x, &EmConfig::default())?;
        let monotone = fit.ll_history.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
        if (fit.mu_r - 1.0).abs() < 0.3 && (fit.mu_u - 4.0).abs() < 0.3 && (fit.w_r - 0.5).abs() < 0.1 && monotone {
            passed += 1;
        }
    }
    let total = seeds as usize;
    Ok(CheckResult { name: "gmm_recovery", passed, total, required: total - total / 20 })
}

fn leakage_check(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckResult> {
    let mut passed = 0;
    for _ in 0..trials {
        let heads = rng.random_range(1..=3);
        let cfg = DecoderConfig {
            dim: heads * rng.random_range(1..=4),
            heads,
            memory_channels: rng.random_range(1..=4),
            ffn_hidden: rng.random_range(1..=8),
        };
        let p = DecoderParams::random(&cfg, rng)?;
        let mem = FeatureGrid::random(cfg.memory_channels, rng.random_range(1..5), rng.random_range(1..5), rng);
        let q = Matrix::random(rng.random_range(1..6), cfg.dim, 1.0, rng);
        let c = Matrix::random(rng.random_range(1..6), cfg.dim, 1.0, rng);
        let alone = QuerySet::attach(&q, &Matrix::zeros(0, cfg.dim))?;
        let with = QuerySet::attach(&q, &c)?;
        let a = toy_decode(&alone, &mem, &build_attention_mask(&alone.groups), &p)?;
        let b = toy_decode(&with, &mem, &build_attention_mask(&with.groups), &p)?;
        let same = a.data().iter().zip(b.slice_rows(0, q.rows()).data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if same {
            passed += 1;
        }
    }
    Ok(CheckResult { name: "attention_leakage", passed, total: trials, required: trials })
}

/// Runs every check.
pub fn run_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        hungarian_check(&mut rng, 300)?,
        gradient_check(&mut rng, 20)?,
        gmm_check(20)?,
        leakage_check(&mut rng, 20)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in run_checks(0).unwrap() {
            assert!(r.ok(), "{r:?}");
        }
    }
}
