use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_with_rng, DatasetSpec, MeasurementModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceConfig {
    pub pool_size: usize,
    pub n_out: usize,
    pub min_ess: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            pool_size: 200_000,
            n_out: 1000,
            min_ess: 50.0,
        }
    }
}

/// Indices drawn by systematic resampling of normalized or unnormalized weights.
pub fn systematic_resample(weights: &[f64], n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || !(total > 0.0 && total.is_finite()) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::invalid("resampling weights must be nonnegative with a positive finite sum"));
    }
    let step = total / n as f64;
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for _ in 0..n {
        while u >= cum && i + 1 < weights.len() {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
        u += step;
    }
    Ok(out)
}

/// Importance resampling of an analytic data pool under the Gaussian likelihood.
///
/// The pool follows `spec.kind` and `spec.noise_sigma`; randomness comes from `rng`.
pub fn reference_posterior(
    spec: &DatasetSpec,
    measurement: &MeasurementModel,
    cfg: &ReferenceConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if cfg.n_out == 0 || cfg.pool_size == 0 {
        return Err(Error::invalid("reference posterior sizes must be positive"));
    }
    let pool = sample_with_rng(spec.kind, spec.noise_sigma, cfg.pool_size, rng)?;
    let log_w = measurement.log_likelihood(&pool)?;
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    let ess = s * s / s2;
    if !(ess >= cfg.min_ess) {
        return Err(Error::LowEffectiveSampleSize { ess, min: cfg.min_ess });
    }
    let idx = systematic_resample(&w, cfg.n_out, rng)?;
    Ok(pool.select_rows(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetKind, Operator};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn systematic_resampling_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = systematic_resample(&[1.0, 0.0, 3.0], 8, &mut rng).unwrap();
        assert_eq!(idx.iter().filter(|&&i| i == 0).count(), 2);
        assert_eq!(idx.iter().filter(|&&i| i == 2).count(), 6);
        let idx = systematic_resample(&[1.0; 5], 5, &mut rng).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        assert!(systematic_resample(&[0.0, 0.0], 3, &mut rng).is_err());
    }

    #[test]
    fn flat_likelihood_returns_prior_and_is_deterministic() {
        let spec = DatasetSpec::new(DatasetKind::SCurve, 0);
        let flat = MeasurementModel::new(Operator::F2, 1e6, vec![0.0]).unwrap();
        let cfg = ReferenceConfig {
            pool_size: 4000,
            n_out: 4000,
            ..ReferenceConfig::default()
        };
        let a = reference_posterior(&spec, &flat, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = reference_posterior(&spec, &flat, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let pool = sample_with_rng(spec.kind, spec.noise_sigma, 4000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        // Nearly equal weights keep each pool point exactly once.
        let mut ra: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let mut rp: Vec<u64> = pool.data().iter().map(|v| v.to_bits()).collect();
        ra.sort_unstable();
        rp.sort_unstable();
        assert_eq!(ra, rp);
    }

    #[test]
    fn sharp_likelihood_collapses_or_errors() {
        let spec = DatasetSpec::new(DatasetKind::TwoMoons, 0);
        let sharp = MeasurementModel::new(Operator::F2, 1e-6, vec![0.0]).unwrap();
        let cfg = ReferenceConfig {
            pool_size: 1000,
            n_out: 50,
            min_ess: 0.0,
        };
        let out = reference_posterior(&spec, &sharp, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(out.iter_rows().all(|r| r == out.row(0)));
        let strict = ReferenceConfig { min_ess: 50.0, ..cfg };
        assert!(matches!(
            reference_posterior(&spec, &sharp, &strict, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(Error::LowEffectiveSampleSize { .. })
        ));
    }

    #[test]
    fn f2_posterior_concentrates_near_observation() {
        let spec = DatasetSpec::new(DatasetKind::SCurve, 0);
        let meas = MeasurementModel::f2(0.0);
        let cfg = ReferenceConfig {
            pool_size: 50_000,
            n_out: 1000,
            ..ReferenceConfig::default()
        };
        let out = reference_posterior(&spec, &meas, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let f = meas.measure(&out).unwrap();
        let n = f.len() as f64;
        let mean = f.sum() / n;
        let sd = (f.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        // Compare with the self-normalized importance estimate from an
        // independent pool; both carry Monte Carlo error.
        let pool = sample_with_rng(spec.kind, spec.noise_sigma, 200_000, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let w: Vec<f64> = meas.log_likelihood(&pool).unwrap().iter().map(|l| l.exp()).collect();
        let sw: f64 = w.iter().sum();
        let ess = sw * sw / w.iter().map(|v| v * v).sum::<f64>();
        let fp = meas.measure(&pool).unwrap();
        let weighted = fp.data().iter().zip(&w).map(|(f, w)| f * w).sum::<f64>() / sw;
        let tol = 3.0 * sd * (1.0 / n + 1.0 / ess).sqrt();
        assert!((mean - weighted).abs() < tol, "{mean} vs {weighted} (tol {tol})");
        assert!(mean.abs() < (-1.5f64).abs(), "posterior should move towards y");
    }
}
