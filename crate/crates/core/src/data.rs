//! Toy datasets and the measurement operators used to condition on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;
pub const TRAINING_SET_SIZE: usize = 10_240;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    SCurve,
    TwoMoons,
}

impl DatasetKind {
    pub fn tag(&self) -> &'static str {
        match self {
            DatasetKind::SCurve => "s-curve",
            DatasetKind::TwoMoons => "two-moons",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s-curve" | "scurve" => Ok(DatasetKind::SCurve),
            "two-moons" | "moons" => Ok(DatasetKind::TwoMoons),
            other => Err(Error::invalid(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, seed: u64) -> Self {
        Self {
            kind,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            seed,
        }
    }
}

/// Noiseless S-curve point for latent `t in (-3pi/2, 3pi/2)`.
pub fn s_curve_point(t: f64) -> [f64; 2] {
    [t.sin(), 0.5 * sign(t) * (t.cos() - 1.0)]
}

/// Noiseless two-moons point after the affine shift and rescale.
pub fn two_moons_point(phi: f64, outer: bool) -> [f64; 2] {
    let base = if outer {
        [phi.cos(), phi.sin()]
    } else {
        [1.0 - phi.cos(), 0.5 - phi.sin()]
    };
    two_moons_affine(base, [0.0, 0.0])
}

fn two_moons_affine(base: [f64; 2], noise: [f64; 2]) -> [f64; 2] {
    [
        (base[0] + noise[0] - 0.5) / 1.5,
        (base[1] + noise[1] - 0.25) / 1.5,
    ]
}

fn sign(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sample_dataset(spec: &DatasetSpec, n: usize) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    sample_with_rng(spec.kind, spec.noise_sigma, n, &mut rng)
}

pub fn sample_with_rng(kind: DatasetKind, sigma: f64, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let noise = |rng: &mut dyn rand::RngCore| -> [f64; 2] {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        [sigma * a, sigma * b]
    };
    let mut data = Vec::with_capacity(2 * n);
    match kind {
        DatasetKind::SCurve => {
            for _ in 0..n {
                let t = rng.random_range(-1.5 * PI..1.5 * PI);
                let p = s_curve_point(t);
                let e = noise(rng);
                data.extend_from_slice(&[p[0] + e[0], p[1] + e[1]]);
            }
        }
        DatasetKind::TwoMoons => {
            let n_out = n / 2;
            for i in 0..n {
                let outer = i < n_out;
                let phi = rng.random_range(0.0..PI);
                let base = if outer {
                    [phi.cos(), phi.sin()]
                } else {
                    [1.0 - phi.cos(), 0.5 - phi.sin()]
                };
                let e = noise(rng);
                data.extend_from_slice(&two_moons_affine(base, e));
            }
        }
    }
    Tensor::matrix(n, 2, data)
}

/// State-to-observable map `F`.
#[derive(Clone, Debug, PartialEq)]
pub enum Operator {
    /// `5 |x0 - x1|`
    F1,
    /// `x0 + x1 - 1.5`
    F2,
    /// `A x + c` with `A` of shape `[m, d]`.
    Affine { matrix: Tensor, offset: Vec<f64> },
}

impl Operator {
    pub fn affine(matrix: Tensor, offset: Vec<f64>) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.rows() != offset.len() {
            return Err(Error::shape(
                "affine operator",
                format!("matrix {:?} with {} offsets", matrix.shape(), offset.len()),
            ));
        }
        Ok(Operator::Affine { matrix, offset })
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Operator::F1 | Operator::F2 => 1,
            Operator::Affine { offset, .. } => offset.len(),
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Operator::F1 | Operator::F2 => Some(2),
            Operator::Affine { matrix, .. } => Some(matrix.cols()),
        }
    }

    fn check(&self, cols: usize) -> Result<()> {
        match self.input_dim() {
            Some(d) if d != cols => Err(Error::shape(
                "measure",
                format!("operator expects {d} columns, got {cols}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x.cols())?;
        let out = match self {
            Operator::F1 => x.iter_rows().map(|r| 5.0 * (r[0] - r[1]).abs()).collect(),
            Operator::F2 => x.iter_rows().map(|r| r[0] + r[1] - 1.5).collect(),
            Operator::Affine { matrix, offset } => {
                let mut out = Vec::with_capacity(x.rows() * offset.len());
                for r in x.iter_rows() {
                    for (i, c) in offset.iter().enumerate() {
                        let dot: f64 = matrix.row(i).iter().zip(r).map(|(a, b)| a * b).sum();
                        out.push(dot + c);
                    }
                }
                out
            }
        };
        Tensor::matrix(x.rows(), self.output_dim(), out)
    }

    /// Differentiable application; `|.|` has subgradient 0 at the kink.
    pub fn apply_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let xs = x.shape();
        if xs.len() != 2 {
            return Err(Error::shape("measure", format!("expected a matrix, got {xs:?}")));
        }
        self.check(xs[1])?;
        let tape = x.tape();
        match self {
            Operator::F1 => x.slice(1, 0, 1)?.sub(x.slice(1, 1, 2)?)?.abs()?.scale(5.0),
            Operator::F2 => x
                .slice(1, 0, 1)?
                .add(x.slice(1, 1, 2)?)?
                .add(tape.constant(Tensor::scalar(-1.5))),
            Operator::Affine { matrix, offset } => {
                let (m, d) = (matrix.rows(), matrix.cols());
                let mut at = vec![0.0; d * m];
                for i in 0..m {
                    for j in 0..d {
                        at[j * m + i] = matrix.get(i, j);
                    }
                }
                let at = tape.constant(Tensor::from_parts(vec![d, m], at));
                let c = tape.constant(Tensor::from_parts(vec![1, m], offset.clone()));
                x.matmul(at)?.add(c)
            }
        }
    }
}

/// Gaussian measurement model `y = F(x) + eps`, `eps ~ N(0, sigma_y^2 I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementModel {
    pub operator: Operator,
    pub noise_sigma: f64,
    pub observed: Vec<f64>,
}

impl MeasurementModel {
    pub fn new(operator: Operator, noise_sigma: f64, observed: Vec<f64>) -> Result<Self> {
        if !(noise_sigma > 0.0 && noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma_y must be positive, got {noise_sigma}")));
        }
        if observed.len() != operator.output_dim() {
            return Err(Error::shape(
                "measurement",
                format!("{} observed values for output dim {}", observed.len(), operator.output_dim()),
            ));
        }
        Ok(Self {
            operator,
            noise_sigma,
            observed,
        })
    }

    /// `F1` with noise variance 0.01.
    pub fn f1(y: f64) -> Self {
        Self::new(Operator::F1, 0.1, vec![y]).expect("valid")
    }

    /// `F2` with noise variance 0.1.
    pub fn f2(y: f64) -> Self {
        Self::new(Operator::F2, 0.1f64.sqrt(), vec![y]).expect("valid")
    }

    pub fn variance(&self) -> f64 {
        self.noise_sigma * self.noise_sigma
    }

    /// Noiseless forward values.
    pub fn measure(&self, x: &Tensor) -> Result<Tensor> {
        self.operator.apply(x)
    }

    /// Per-row `||y - F(x)||^2`.
    pub fn misfit(&self, x: &Tensor) -> Result<Vec<f64>> {
        let f = self.measure(x)?;
        Ok(f
            .iter_rows()
            .map(|r| r.iter().zip(&self.observed).map(|(a, y)| (y - a).powi(2)).sum())
            .collect())
    }

    /// Per-row `||y - F(x)||^2` as an `[n, 1]` tape variable.
    pub fn misfit_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let f = self.operator.apply_var(x)?;
        let y = x.tape().constant(Tensor::from_parts(
            vec![1, self.observed.len()],
            self.observed.clone(),
        ));
        y.sub(f)?.square()?.sum_rows()
    }

    /// `-||y - F(x)||^2 / (2 sigma_y^2)` per row, additive constant dropped.
    pub fn log_likelihood(&self, x: &Tensor) -> Result<Vec<f64>> {
        let s = 2.0 * self.variance();
        Ok(self.misfit(x)?.into_iter().map(|m| -m / s).collect())
    }

    pub fn log_likelihood_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.misfit_var(x)?.scale(-1.0 / (2.0 * self.variance()))
    }
}
