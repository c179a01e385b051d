//! Fixed-step integration of `dx/dtau = v(tau, x)` over `tau in [0, 1]`.
//!
//! The value path ([`integrate`]) runs detached; [`integrate_on_tape`] unrolls
//! the same scheme on a tape so the end state can be differentiated with
//! respect to the start state and the weights.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::BoundModel;
use crate::tensor::Tensor;

/// A velocity field evaluated on detached batches.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn velocity(&self, tau: f64, x: &Tensor) -> Result<Tensor>;
}

/// A velocity field evaluated on tape variables.
pub trait TapeField<'t> {
    fn velocity_var(&self, tau: f64, x: Var<'t>) -> Result<Var<'t>>;
}

/// Extra drift added to the field at every stage of the integrator.
pub trait DriftModifier {
    fn extra_drift(&self, step: usize, tau: f64, x: &Tensor, velocity: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Euler,
    Midpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// `tau: 0 -> 1`
    Forward,
    /// `tau: 1 -> 0`
    Reverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub steps: usize,
    pub direction: Direction,
}

impl IntegratorConfig {
    pub fn euler(steps: usize) -> Self {
        Self {
            scheme: Scheme::Euler,
            steps,
            direction: Direction::Forward,
        }
    }

    pub fn midpoint(steps: usize) -> Self {
        Self {
            scheme: Scheme::Midpoint,
            steps,
            direction: Direction::Forward,
        }
    }

    pub fn reversed(mut self) -> Self {
        self.direction = match self.direction {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("integrator needs at least one step"));
        }
        Ok(())
    }

    /// Signed step and start time.
    fn grid(&self) -> (f64, f64) {
        let h = 1.0 / self.steps as f64;
        match self.direction {
            Direction::Forward => (h, 0.0),
            Direction::Reverse => (-h, 1.0),
        }
    }

    fn time(&self, k: usize) -> f64 {
        let (h, t0) = self.grid();
        t0 + h * k as f64
    }
}

fn axpy(x: &Tensor, h: f64, v: &Tensor) -> Tensor {
    let data = x.data().iter().zip(v.data()).map(|(a, b)| a + h * b).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn drift(
    field: &(impl VectorField + ?Sized),
    modifier: Option<&dyn DriftModifier>,
    step: usize,
    tau: f64,
    x: &Tensor,
) -> Result<Tensor> {
    let v = field.velocity(tau, x)?;
    match modifier {
        None => Ok(v),
        Some(m) => {
            let extra = m.extra_drift(step, tau, x, &v)?;
            v.zip_map(&extra, |a, b| a + b)
        }
    }
}

fn step_once(
    field: &(impl VectorField + ?Sized),
    modifier: Option<&dyn DriftModifier>,
    cfg: &IntegratorConfig,
    k: usize,
    x: &Tensor,
) -> Result<Tensor> {
    let (h, _) = cfg.grid();
    let tau = cfg.time(k);
    let next = match cfg.scheme {
        Scheme::Euler => axpy(x, h, &drift(field, modifier, k, tau, x)?),
        Scheme::Midpoint => {
            let mid = axpy(x, 0.5 * h, &drift(field, modifier, k, tau, x)?);
            axpy(x, h, &drift(field, modifier, k, tau + 0.5 * h, &mid)?)
        }
    };
    if !next.is_finite() {
        return Err(Error::NonFinite {
            context: "transport",
            step: k,
        });
    }
    Ok(next)
}

fn check_start(field: &(impl VectorField + ?Sized), x: &Tensor, cfg: &IntegratorConfig) -> Result<()> {
    cfg.validate()?;
    if x.shape().len() != 2 || x.cols() != field.dim() {
        return Err(Error::shape(
            "integrate",
            format!("expected [n, {}] start, got {:?}", field.dim(), x.shape()),
        ));
    }
    Ok(())
}

/// Integrates from `x_start` and returns the end state.
pub fn integrate(
    field: &(impl VectorField + ?Sized),
    x_start: &Tensor,
    cfg: &IntegratorConfig,
    modifier: Option<&dyn DriftModifier>,
) -> Result<Tensor> {
    check_start(field, x_start, cfg)?;
    let mut x = x_start.clone();
    for k in 0..cfg.steps {
        x = step_once(field, modifier, cfg, k, &x)?;
    }
    Ok(x)
}

/// Like [`integrate`] but returns all `steps + 1` states on the time grid.
pub fn integrate_trajectory(
    field: &(impl VectorField + ?Sized),
    x_start: &Tensor,
    cfg: &IntegratorConfig,
    modifier: Option<&dyn DriftModifier>,
) -> Result<Vec<Tensor>> {
    check_start(field, x_start, cfg)?;
    let mut states = Vec::with_capacity(cfg.steps + 1);
    states.push(x_start.clone());
    for k in 0..cfg.steps {
        let next = step_once(field, modifier, cfg, k, states.last().expect("nonempty"))?;
        states.push(next);
    }
    Ok(states)
}

/// Unrolled solve on a tape; differentiable w.r.t. `x_start` and bound weights.
pub fn integrate_on_tape<'t>(
    field: &impl TapeField<'t>,
    x_start: Var<'t>,
    cfg: &IntegratorConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    let (h, _) = cfg.grid();
    let mut x = x_start;
    for k in 0..cfg.steps {
        let tau = cfg.time(k);
        let v = field.velocity_var(tau, x)?;
        x = match cfg.scheme {
            Scheme::Euler => x.add(v.scale(h)?)?,
            Scheme::Midpoint => {
                let mid = x.add(v.scale(0.5 * h)?)?;
                let v_mid = field.velocity_var(tau + 0.5 * h, mid)?;
                x.add(v_mid.scale(h)?)?
            }
        };
    }
    Ok(x)
}

/// Straight-path one-step estimate `x + (1 - tau) v(tau, x)` of the end state.
///
/// With `differentiate_through_model == false` the velocity enters as a
/// constant, so the Jacobian with respect to `x_tau` is the identity.
pub fn predict_x1<'t>(
    model: &BoundModel<'t>,
    tau: f64,
    x_tau: Var<'t>,
    differentiate_through_model: bool,
) -> Result<Var<'t>> {
    let v = model.forward_at(tau, x_tau)?;
    predict_x1_from_velocity(tau, x_tau, v, differentiate_through_model)
}

pub(crate) fn predict_x1_from_velocity<'t>(
    tau: f64,
    x_tau: Var<'t>,
    velocity: Var<'t>,
    differentiate_through_model: bool,
) -> Result<Var<'t>> {
    let v = if differentiate_through_model {
        velocity
    } else {
        velocity.stop_gradient()
    };
    x_tau.add(v.scale(1.0 - tau)?)
}

/// Mean second-difference magnitude per step divided by path length,
/// averaged over the rows of a batched trajectory.
pub fn path_curvature(trajectory: &[Tensor]) -> Result<f64> {
    if trajectory.len() < 3 {
        return Err(Error::invalid(format!(
            "curvature needs at least 3 states, got {}",
            trajectory.len()
        )));
    }
    let rows = trajectory[0].rows();
    let d = trajectory[0].cols();
    if trajectory.iter().any(|s| s.rows() != rows || s.cols() != d) {
        return Err(Error::shape("path_curvature", "states differ in shape"));
    }
    let norm = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
    };
    let mut total = 0.0;
    for r in 0..rows {
        let pts: Vec<&[f64]> = trajectory.iter().map(|s| s.row(r)).collect();
        let length: f64 = pts.windows(2).map(|w| norm(w[1], w[0])).sum();
        let bend: f64 = pts
            .windows(3)
            .map(|w| {
                (0..d)
                    .map(|j| (w[2][j] - 2.0 * w[1][j] + w[0][j]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / (pts.len() - 2) as f64;
        if length > 0.0 {
            total += bend / length;
        }
    }
    Ok(total / rows as f64)
}
