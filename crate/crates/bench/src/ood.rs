//! Out-of-distribution perturbation of training contexts and the 1-D
//! Wasserstein-1 distance used to measure it.

use laau_core::Episode;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{episode_rng, flatten_contexts};
use crate::error::{BenchError, Result};

/// i.i.d. Gaussian noise added to every context coordinate, clipped at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodSpec {
    pub mean: f64,
    pub sigma: f64,
    pub seed: u64,
}

const OOD_STREAM: u64 = 7;

/// `W₁` between two empirical 1-D distributions: mean absolute difference of
/// equal-size sorted samples. The larger sample is subsampled at evenly
/// spaced quantiles.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let sorted = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let (sa, sb) = (sorted(a), sorted(b));
    let n = sa.len().min(sb.len());
    let pick = |s: &[f64], i: usize| {
        if s.len() == n {
            s[i]
        } else {
            s[((i as f64 + 0.5) * s.len() as f64 / n as f64) as usize]
        }
    };
    (0..n).map(|i| (pick(&sa, i) - pick(&sb, i)).abs()).sum::<f64>() / n as f64
}

/// Perturbed copy of `set` and its `W₁` distance to the original contexts.
pub fn apply_ood(set: &[Episode], spec: &OodSpec) -> Result<(Vec<Episode>, f64)> {
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite() && spec.mean.is_finite()) {
        return Err(BenchError::Config("OOD noise needs finite mean and σ ≥ 0".into()));
    }
    let noise = Normal::new(spec.mean, spec.sigma).map_err(|e| BenchError::Config(e.to_string()))?;
    let perturbed = set
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            let mut rng = episode_rng(spec.seed, OOD_STREAM, i);
            let contexts = ep
                .contexts
                .iter()
                .map(|c| c.iter().map(|v| (v + noise.sample(&mut rng)).max(0.0)).collect())
                .collect();
            Episode::new(ep.id.clone(), contexts, ep.budgets.clone()).map_err(BenchError::from)
        })
        .collect::<Result<Vec<_>>>()?;
    let dw = wasserstein_1d(&flatten_contexts(set), &flatten_contexts(&perturbed));
    Ok((perturbed, dw))
}

/// Zero-mean noise level whose injected `W₁` matches `target` within
/// `1e−3·target`, found by bisection with common random numbers.
pub fn calibrate_noise(set: &[Episode], target: f64, seed: u64) -> Result<(OodSpec, Vec<Episode>, f64)> {
    let spec = |sigma| OodSpec { mean: 0.0, sigma, seed };
    if target <= 0.0 {
        let (p, d) = apply_ood(set, &spec(0.0))?;
        return Ok((spec(0.0), p, d));
    }
    let mut hi = target;
    while apply_ood(set, &spec(hi))?.1 < target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(BenchError::Config(format!("W₁ target {target} is unreachable")));
        }
    }
    let mut lo = 0.0;
    let mut best = apply_ood(set, &spec(hi))?;
    let mut sigma = hi;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let out = apply_ood(set, &spec(mid))?;
        if (out.1 - target).abs() < (best.1 - target).abs() {
            best = out.clone();
            sigma = mid;
        }
        if (out.1 - target).abs() <= 1e-3 * target {
            break;
        }
        if out.1 < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((spec(sigma), best.0, best.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_have_zero_distance() {
        let a = [3.0, 1.0, 2.0];
        assert_eq!(wasserstein_1d(&a, &a), 0.0);
    }

    #[test]
    fn translation_distance_is_the_shift() {
        let a: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 0.25).collect();
        assert!((wasserstein_1d(&a, &b) - 0.25).abs() < 1e-12);
        assert_eq!(wasserstein_1d(&a, &b), wasserstein_1d(&b, &a));
    }

    #[test]
    fn unequal_sizes_use_quantiles() {
        let a = [0.0, 1.0];
        let b = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(wasserstein_1d(&a, &b), 0.0);
    }
}
