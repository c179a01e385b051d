use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest extent the five-point stencils accept.
pub const MIN_EXTENT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    /// Rows (time for KS fields).
    Rows,
    /// Columns (the periodic space axis).
    Cols,
}

/// A scalar field on a uniform grid, periodic along the columns.
///
/// For space-time data rows are time levels and columns are grid points.
#[derive(Clone, Debug, PartialEq)]
pub struct Field2D {
    values: Tensor,
    /// Spacing between rows.
    pub row_spacing: f64,
    /// Spacing between columns.
    pub col_spacing: f64,
}

impl Field2D {
    pub fn new(values: Tensor, row_spacing: f64, col_spacing: f64) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() < MIN_EXTENT || values.cols() < MIN_EXTENT {
            return Err(Error::shape(
                "field",
                format!("need at least {MIN_EXTENT} x {MIN_EXTENT}, got {:?}", values.shape()),
            ));
        }
        if !(row_spacing > 0.0 && col_spacing > 0.0) {
            return Err(Error::invalid("grid spacings must be positive"));
        }
        Ok(Self {
            values,
            row_spacing,
            col_spacing,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KsResidual {
    /// `[n_t - 2, n_x]`: time levels `1..n_t-1`.
    pub grid: Tensor,
    pub mean_abs: f64,
}

/// Finite-difference residual of `u_t + u u_x + u_xx + u_xxxx = 0`.
///
/// Central differences in time on interior levels, periodic central stencils
/// in space.
pub fn ks_residual(field: &Field2D) -> Result<KsResidual> {
    let u = &field.values;
    let (nt, nx) = (u.rows(), u.cols());
    let (dt, dx) = (field.row_spacing, field.col_spacing);
    let (dx2, dx4) = (dx * dx, dx.powi(4));
    let mut out = Vec::with_capacity((nt - 2) * nx);
    for n in 1..nt - 1 {
        let (prev, cur, next) = (u.row(n - 1), u.row(n), u.row(n + 1));
        let at = |j: isize| cur[j.rem_euclid(nx as isize) as usize];
        for j in 0..nx {
            let ji = j as isize;
            let (m2, m1, c, p1, p2) = (at(ji - 2), at(ji - 1), cur[j], at(ji + 1), at(ji + 2));
            let ut = (next[j] - prev[j]) / (2.0 * dt);
            let ux = (p1 - m1) / (2.0 * dx);
            // Written in first differences so constant data cancels exactly.
            let (d0, d1, d2, d3) = (m1 - m2, c - m1, p1 - c, p2 - p1);
            let uxx = (d2 - d1) / dx2;
            let uxxxx = (d3 - 3.0 * d2 + 3.0 * d1 - d0) / dx4;
            out.push(ut + c * ux + uxx + uxxxx);
        }
    }
    let mean_abs = out.iter().map(|r| r.abs()).sum::<f64>() / out.len() as f64;
    Ok(KsResidual {
        grid: Tensor::from_parts(vec![nt - 2, nx], out),
        mean_abs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectraResult {
    /// `k_m = 2 pi m / L`, `m = 0..=N/2`.
    pub wavenumbers: Vec<f64>,
    /// One-sided power `<|u_hat_m|^2>` with `u_hat = DFT(u) / N`; sums to the
    /// mean square of the signal.
    pub power: Vec<f64>,
    /// Premultiplied spectrum `k_m * power_m`.
    pub energy: Vec<f64>,
}

/// One-dimensional premultiplied spectrum along `transform` axis, averaged over
/// the other axis and over every field in `ensemble`.
pub fn energy_spectrum_1d(ensemble: &[Field2D], transform: Axis) -> Result<SpectraResult> {
    let first = ensemble.first().ok_or_else(|| Error::invalid("empty ensemble"))?;
    let shape = first.values.shape().to_vec();
    if ensemble.iter().any(|f| f.values.shape() != shape.as_slice()) {
        return Err(Error::shape("spectrum", "ensemble fields differ in shape"));
    }
    let (n, lines, spacing) = match transform {
        Axis::Cols => (shape[1], shape[0], first.col_spacing),
        Axis::Rows => (shape[0], shape[1], first.row_spacing),
    };
    let half = n / 2;
    let length = n as f64 * spacing;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut power = vec![0.0; half + 1];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for f in ensemble {
        let u = &f.values;
        for line in 0..lines {
            for (i, b) in buf.iter_mut().enumerate() {
                let v = match transform {
                    Axis::Cols => u.get(line, i),
                    Axis::Rows => u.get(i, line),
                };
                *b = Complex::new(v, 0.0);
            }
            fft.process(&mut buf);
            for (m, p) in power.iter_mut().enumerate() {
                let mut e = buf[m].norm_sqr();
                // Fold the mirrored negative frequency in.
                if m != 0 && !(n % 2 == 0 && m == half) {
                    e += buf[n - m].norm_sqr();
                }
                *p += e / (n * n) as f64;
            }
        }
    }
    let count = (lines * ensemble.len()) as f64;
    power.iter_mut().for_each(|p| *p /= count);
    let wavenumbers: Vec<f64> = (0..=half)
        .map(|m| 2.0 * std::f64::consts::PI * m as f64 / length)
        .collect();
    let energy = wavenumbers.iter().zip(&power).map(|(k, p)| k * p).collect();
    Ok(SpectraResult {
        wavenumbers,
        power,
        energy,
    })
}
