//! Two-component univariate Gaussian mixture fitted by EM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// EM stopping rule and initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    /// Stop when the log-likelihood improves by less than this.
    pub tol: f64,
    pub max_iter: usize,
    /// Standard deviation floor as a fraction of the sample range.
    pub sigma_floor_rel: f64,
    /// Extra randomly initialized fits; the best log-likelihood wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 200, sigma_floor_rel: 1e-4, restarts: 0, seed: 0 }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::param("em.tol must be > 0 and em.max_iter >= 1"));
        }
        if !(self.sigma_floor_rel.is_finite() && self.sigma_floor_rel > 0.0) {
            return Err(Error::param("em.sigma_floor_rel must be > 0"));
        }
        Ok(())
    }
}

/// Mixture parameters in component order (not necessarily sorted).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureParams {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub sigmas: [f64; 2],
}

impl MixtureParams {
    /// Split the sorted samples at the median and take each half's moments.
    pub fn median_split(samples: &[f64], sigma_floor: f64) -> Self {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let half = sorted.len() / 2;
        let (lo, hi) = sorted.split_at(half);
        let moments = |xs: &[f64]| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt().max(sigma_floor))
        };
        let (m0, s0) = moments(lo);
        let (m1, s1) = moments(hi);
        Self { weights: [0.5, 0.5], means: [m0, m1], sigmas: [s0, s1] }
    }

    /// Swaps the component labels.
    pub fn swapped(&self) -> Self {
        Self {
            weights: [self.weights[1], self.weights[0]],
            means: [self.means[1], self.means[0]],
            sigmas: [self.sigmas[1], self.sigmas[0]],
        }
    }

    fn log_component(&self, k: usize, x: f64) -> f64 {
        let z = (x - self.means[k]) / self.sigmas[k];
        self.weights[k].ln() - 0.5 * z * z - self.sigmas[k].ln() - LN_SQRT_2PI
    }
}

/// Fitted mixture with the low-cost ("reliable") component first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub w_r: f64,
    pub w_u_mix: f64,
    pub mu_r: f64,
    pub mu_u: f64,
    pub sigma_r: f64,
    pub sigma_u: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood evaluated before every M-step, then at the final
    /// parameters.
    pub ll_history: Vec<f64>,
}

impl GmmFit {
    fn from_params(p: &MixtureParams, ll: f64, iterations: usize, converged: bool, ll_history: Vec<f64>) -> Self {
        let (r, u) = if p.means[0] <= p.means[1] { (0, 1) } else { (1, 0) };
        Self {
            w_r: p.weights[r],
            w_u_mix: p.weights[u],
            mu_r: p.means[r],
            mu_u: p.means[u],
            sigma_r: p.sigmas[r],
            sigma_u: p.sigmas[u],
            log_likelihood: ll,
            iterations,
            converged,
            ll_history,
        }
    }

    pub fn params(&self) -> MixtureParams {
        MixtureParams {
            weights: [self.w_r, self.w_u_mix],
            means: [self.mu_r, self.mu_u],
            sigmas: [self.sigma_r, self.sigma_u],
        }
    }

    /// Posterior probability that cost `c` belongs to the reliable component.
    pub fn reliable_posterior(&self, c: f64) -> f64 {
        let p = self.params();
        let a = p.log_component(0, c);
        let b = p.log_component(1, c);
        let m = a.max(b);
        let ea = (a - m).exp();
        ea / (ea + (b - m).exp())
    }
}

fn sample_range(samples: &[f64]) -> (f64, f64) {
    samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn check_samples(samples: &[f64]) -> Result<f64> {
    if samples.len() < 4 {
        return Err(Error::DegenerateFit(format!("{} samples, need at least 4", samples.len())));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateFit("non-finite sample".into()));
    }
    let (lo, hi) = sample_range(samples);
    let spread = hi - lo;
    if spread <= 0.0 {
        return Err(Error::DegenerateFit("samples have zero spread".into()));
    }
    Ok(spread)
}

/// Fits the mixture starting from a median split, plus `cfg.restarts` random
/// initializations.
pub fn fit_gmm_1d(samples: &[f64], cfg: &EmConfig) -> Result<GmmFit> {
    let spread = check_samples(samples)?;
    let floor = cfg.sigma_floor_rel * spread;
    let mut best = run_em(samples, MixtureParams::median_split(samples, floor), floor, cfg);
    if cfg.restarts > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt().max(floor);
        for _ in 0..cfg.restarts {
            let a = samples[rng.random_range(0..samples.len())];
            let b = samples[rng.random_range(0..samples.len())];
            let init = MixtureParams { weights: [0.5, 0.5], means: [a, b], sigmas: [sd, sd] };
            let fit = run_em(samples, init, floor, cfg);
            if fit.log_likelihood > best.log_likelihood {
                best = fit;
            }
        }
    }
    Ok(best)
}

/// Fits the mixture from explicit initial parameters.
pub fn fit_gmm_1d_from(samples: &[f64], init: MixtureParams, cfg: &EmConfig) -> Result<GmmFit> {
    let spread = check_samples(samples)?;
    let floor = cfg.sigma_floor_rel * spread;
    let init = MixtureParams {
        sigmas: [init.sigmas[0].max(floor), init.sigmas[1].max(floor)],
        ..init
    };
    Ok(run_em(samples, init, floor, cfg))
}

/// E-step: log-likelihood and responsibilities of component 0.
fn e_step(samples: &[f64], p: &MixtureParams, resp: &mut [f64]) -> f64 {
    let mut ll = 0.0;
    for (x, r) in samples.iter().zip(resp.iter_mut()) {
        let a = p.log_component(0, *x);
        let b = p.log_component(1, *x);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        ll += lse;
        *r = (a - lse).exp();
    }
    ll
}

fn m_step(samples: &[f64], resp: &[f64], floor: f64, prev: &MixtureParams) -> MixtureParams {
    let n = samples.len() as f64;
    let n0: f64 = resp.iter().sum();
    let n1 = n - n0;
    let mut next = *prev;
    for (k, nk) in [(0usize, n0), (1, n1)] {
        if nk <= f64::MIN_POSITIVE {
            // empty component keeps its location, weight goes to zero-ish
            next.weights[k] = f64::MIN_POSITIVE;
            continue;
        }
        let w = |r: f64| if k == 0 { r } else { 1.0 - r };
        let mean = samples.iter().zip(resp).map(|(x, &r)| w(r) * x).sum::<f64>() / nk;
        let var = samples.iter().zip(resp).map(|(x, &r)| w(r) * (x - mean).powi(2)).sum::<f64>() / nk;
        next.weights[k] = nk / n;
        next.means[k] = mean;
        next.sigmas[k] = var.sqrt().max(floor);
    }
    let total = next.weights[0] + next.weights[1];
    next.weights = [next.weights[0] / total, next.weights[1] / total];
    next
}

fn run_em(samples: &[f64], init: MixtureParams, floor: f64, cfg: &EmConfig) -> GmmFit {
    let mut params = init;
    let mut resp = vec![0.0; samples.len()];
    let mut history = Vec::new();
    let mut ll = e_step(samples, &params, &mut resp);
    history.push(ll);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let next = m_step(samples, &resp, floor, &params);
        let next_ll = e_step(samples, &next, &mut resp);
        iterations += 1;
        history.push(next_ll);
        let improvement = next_ll - ll;
        params = next;
        ll = next_ll;
        if improvement < cfg.tol {
            converged = true;
            break;
        }
    }
    GmmFit::from_params(&params, ll, iterations, converged, history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn bimodal_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Normal::new(1.0, 0.1).unwrap();
        let b = Normal::new(4.0, 0.5).unwrap();
        let mut xs: Vec<f64> = (0..200).map(|_| a.sample(&mut rng)).collect();
        xs.extend((0..200).map(|_| b.sample(&mut rng)));
        let fit = fit_gmm_1d(&xs, &EmConfig::default()).unwrap();
        assert!((fit.mu_r - 1.0).abs() < 0.1, "{fit:?}");
        assert!((fit.mu_u - 4.0).abs() < 0.3, "{fit:?}");
        assert!((fit.w_r - 0.5).abs() < 0.1);
        assert!((fit.w_r + fit.w_u_mix - 1.0).abs() < 1e-9);
        assert!(fit.ll_history.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs()));
    }

    #[test]
    fn point_masses_hit_sigma_floor() {
        let fit = fit_gmm_1d(&[1.0, 1.0, 1.0, 4.0, 4.0, 4.0], &EmConfig::default()).unwrap();
        assert!((fit.mu_r - 1.0).abs() < 1e-9);
        assert!((fit.mu_u - 4.0).abs() < 1e-9);
        let floor = 1e-4 * 3.0;
        assert!((fit.sigma_r - floor).abs() < 1e-12);
        assert!((fit.sigma_u - floor).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(fit_gmm_1d(&[2.0; 10], &EmConfig::default()), Err(Error::DegenerateFit(_))));
        assert!(matches!(fit_gmm_1d(&[1.0, 2.0, 3.0], &EmConfig::default()), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn swapped_initialization_relabels() {
        let xs = [0.9, 1.0, 1.1, 1.05, 3.8, 4.1, 4.3, 3.9];
        let cfg = EmConfig::default();
        let floor = cfg.sigma_floor_rel * 3.4;
        let init = MixtureParams::median_split(&xs, floor);
        let a = fit_gmm_1d_from(&xs, init, &cfg).unwrap();
        let b = fit_gmm_1d_from(&xs, init.swapped(), &cfg).unwrap();
        assert!(a.mu_r <= a.mu_u && b.mu_r <= b.mu_u);
        assert!((a.mu_r - b.mu_r).abs() < 1e-9);
        assert!((a.mu_u - b.mu_u).abs() < 1e-9);
    }

    #[test]
    fn restarts_never_lower_likelihood() {
        let xs = [0.1, 0.2, 0.25, 0.3, 2.0, 2.2, 2.1, 5.0, 5.5];
        let base = fit_gmm_1d(&xs, &EmConfig::default()).unwrap();
        let more = fit_gmm_1d(&xs, &EmConfig { restarts: 5, seed: 3, ..Default::default() }).unwrap();
        assert!(more.log_likelihood >= base.log_likelihood);
    }
}
