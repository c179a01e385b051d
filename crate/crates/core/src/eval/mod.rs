//! Metrics: reference posteriors, W1, measurement MAE and field diagnostics.

mod fields;
mod reference;

pub use fields::{energy_spectrum_1d, ks_residual, Axis, Field2D, KsResidual, SpectraResult};
pub use reference::{reference_posterior, systematic_resample, ReferenceConfig};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::MeasurementModel;
use crate::error::{Error, Result};
use crate::ot::{ot_pairs, GroundCost};
use crate::tensor::Tensor;

/// Exact empirical W1 between equal-size sets: the minimum over pairings of
/// the mean Euclidean distance.
pub fn w1_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rows() == 0 {
        return Err(Error::invalid("W1 of empty sets"));
    }
    let plan = ot_pairs(a, b, GroundCost::Euclidean)?;
    Ok(plan.total_cost / a.rows() as f64)
}

/// W1 after uniformly subsampling the larger set (seeded) to the smaller size.
pub fn w1_distance_subsampled(a: &Tensor, b: &Tensor, seed: u64) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::shape("w1", format!("dims {} vs {}", a.cols(), b.cols())));
    }
    let n = a.rows().min(b.rows());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shrink = |t: &Tensor| -> Tensor {
        if t.rows() == n {
            t.clone()
        } else {
            let mut idx = sample(&mut rng, t.rows(), n).into_vec();
            idx.sort_unstable();
            t.select_rows(&idx)
        }
    };
    let (a, b) = (shrink(a), shrink(b));
    w1_distance(&a, &b)
}

/// `(1/N) sum_i (1/m) ||F(x_i) - y||_1`.
pub fn measurement_mae(samples: &Tensor, measurement: &MeasurementModel) -> Result<f64> {
    if samples.rows() == 0 {
        return Err(Error::invalid("MAE of an empty sample set"));
    }
    let f = measurement.measure(samples)?;
    let m = measurement.observed.len() as f64;
    let total: f64 = f
        .iter_rows()
        .map(|r| r.iter().zip(&measurement.observed).map(|(a, y)| (a - y).abs()).sum::<f64>() / m)
        .sum();
    Ok(total / samples.rows() as f64)
}
