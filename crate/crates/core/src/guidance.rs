//! Guided transport: the drift `v + lambda(tau) g` with a normalized
//! misfit-descent correction
//!
//! ```text
//! g = -b ||v|| grad m / (||grad m|| + eps),   m = ||y - F(x1_hat)||^2
//! ```
//!
//! evaluated per row, where `x1_hat` is the one-step predictor. The Grad variant
//! differentiates through the velocity inside the predictor; Grad-Free treats it
//! as a constant.

use std::cell::RefCell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::MeasurementModel;
use crate::error::{Error, Result};
use crate::model::VelocityModel;
use crate::schedule::Schedule;
use crate::tensor::Tensor;
use crate::train::standard_normal;
use crate::transport::{integrate, predict_x1_from_velocity, DriftModifier, IntegratorConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceVariant {
    Grad,
    GradFree,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub strength: f64,
    pub schedule: Schedule,
    pub variant: GuidanceVariant,
    pub epsilon: f64,
    pub integrator: IntegratorConfig,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            strength: 3.0,
            schedule: Schedule::Constant(1.0),
            variant: GuidanceVariant::Grad,
            epsilon: 1e-8,
            integrator: IntegratorConfig::euler(300),
        }
    }
}

impl GuidanceConfig {
    pub fn new(variant: GuidanceVariant, strength: f64) -> Self {
        Self {
            variant,
            strength,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::invalid(format!("guidance strength must be >= 0, got {}", self.strength)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!("guidance epsilon must be > 0, got {}", self.epsilon)));
        }
        self.integrator.validate()
    }
}

/// Per-stage record of the correction magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTrace {
    pub step: usize,
    pub tau: f64,
    /// Largest `||lambda g|| / (b lambda ||v||)` over rows; at most 1.
    pub max_ratio: f64,
}

/// [`DriftModifier`] implementing the guidance correction.
pub struct GuidedDrift<'a> {
    model: &'a VelocityModel,
    measurement: &'a MeasurementModel,
    cfg: &'a GuidanceConfig,
    trace: RefCell<Vec<StageTrace>>,
}

impl<'a> GuidedDrift<'a> {
    pub fn new(model: &'a VelocityModel, measurement: &'a MeasurementModel, cfg: &'a GuidanceConfig) -> Self {
        Self {
            model,
            measurement,
            cfg,
            trace: RefCell::new(Vec::new()),
        }
    }

    pub fn into_trace(self) -> Vec<StageTrace> {
        self.trace.into_inner()
    }

    /// Gradient of the summed misfit of the predictor with respect to `x`.
    fn misfit_gradient(&self, tau: f64, x: &Tensor, velocity: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        match self.cfg.variant {
            GuidanceVariant::Grad => {
                let xv = tape.leaf(x.clone());
                let bound = self.model.bind(&tape, false);
                let v = bound.forward_at(tau, xv)?;
                let x1 = predict_x1_from_velocity(tau, xv, v, true)?;
                let m = self.measurement.misfit_var(x1)?.sum()?;
                Ok(tape.backward(m)?.wrt(xv))
            }
            GuidanceVariant::GradFree => {
                // The predictor Jacobian is the identity, so differentiate at x1_hat.
                let x1 = x.zip_map(velocity, |a, v| a + (1.0 - tau) * v)?;
                let xv = tape.leaf(x1);
                let m = self.measurement.misfit_var(xv)?.sum()?;
                Ok(tape.backward(m)?.wrt(xv))
            }
        }
    }
}

impl DriftModifier for GuidedDrift<'_> {
    fn extra_drift(&self, step: usize, tau: f64, x: &Tensor, velocity: &Tensor) -> Result<Tensor> {
        let b = self.cfg.strength;
        let lambda = self.cfg.schedule.at(tau);
        let (n, d) = (x.rows(), x.cols());
        if b == 0.0 || lambda == 0.0 {
            return Ok(Tensor::zeros(&[n, d]));
        }
        let grad = self.misfit_gradient(tau, x, velocity)?;
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                context: "guidance gradient",
                step,
            });
        }
        let v_norms = velocity.row_norms();
        let g_norms = grad.row_norms();
        let mut out = Vec::with_capacity(n * d);
        let mut max_ratio: f64 = 0.0;
        for i in 0..n {
            let coef = -lambda * b * v_norms[i] / (g_norms[i] + self.cfg.epsilon);
            let row: Vec<f64> = grad.row(i).iter().map(|g| coef * g).collect();
            let mag = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let bound = (b * lambda * v_norms[i]).abs();
            if bound > 0.0 {
                let ratio = mag / bound;
                debug_assert!(ratio <= 1.0 + 1e-12, "correction exceeds b lambda ||v||");
                max_ratio = max_ratio.max(ratio);
            }
            out.extend(row);
        }
        self.trace.borrow_mut().push(StageTrace {
            step,
            tau,
            max_ratio,
        });
        Tensor::matrix(n, d, out)
    }
}

/// Guided integration from given starts; returns samples and the correction trace.
pub fn guided_transport(
    model: &VelocityModel,
    measurement: &MeasurementModel,
    cfg: &GuidanceConfig,
    x0: &Tensor,
) -> Result<(Tensor, Vec<StageTrace>)> {
    cfg.validate()?;
    let drift = GuidedDrift::new(model, measurement, cfg);
    let x1 = integrate(model, x0, &cfg.integrator, Some(&drift))?;
    Ok((x1, drift.into_trace()))
}

/// `n` conditional samples from i.i.d. `N(0, I)` starts drawn from `rng`.
pub fn guided_sample(
    model: &VelocityModel,
    measurement: &MeasurementModel,
    cfg: &GuidanceConfig,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let x0 = standard_normal(n, model.architecture().input_dim, rng);
    Ok(guided_transport(model, measurement, cfg, &x0)?.0)
}
