//! OT-CFM training of the velocity field.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Architecture, BoundModel, VelocityModel};
use crate::optim::{Adam, AdamConfig};
use crate::ot::{ot_pairs, GroundCost};
use crate::tensor::Tensor;
use crate::transport::{integrate, IntegratorConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Mini-batch exact OT under squared Euclidean cost.
    Ot,
    /// Rows paired in draw order.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub bridge_sigma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub pairing: Pairing,
    pub architecture: Architecture,
    pub seed: u64,
    /// Log every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            steps: 5000,
            learning_rate: 1e-4,
            bridge_sigma: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            pairing: Pairing::Ot,
            architecture: Architecture::default(),
            seed: 0,
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::invalid("batch_size and steps must be positive"));
        }
        if !(self.bridge_sigma >= 0.0 && self.bridge_sigma.is_finite()) {
            return Err(Error::invalid(format!("bridge sigma must be >= 0, got {}", self.bridge_sigma)));
        }
        self.adam().validate()?;
        self.architecture.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: VelocityModel,
    pub loss_history: Vec<f64>,
    pub epochs: usize,
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Pushes `n` fresh `N(0, I)` draws through the model.
pub fn sample_prior(
    model: &VelocityModel,
    n: usize,
    integrator: &IntegratorConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let x0 = standard_normal(n, model.architecture().input_dim, rng);
    integrate(model, &x0, integrator, None)
}

/// Conditional flow-matching loss for already-paired rows.
///
/// `x_tau = (1 - tau) x0 + tau x1 + sigma * eps`, target `x1 - x0`; returns the
/// batch mean of the squared residual norm.
pub fn cfm_loss<'t>(
    model: &BoundModel<'t>,
    x0: &Tensor,
    x1: &Tensor,
    tau: &Tensor,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Var<'t>> {
    let n = x0.rows();
    if x1.shape() != x0.shape() || tau.shape() != [n, 1] {
        return Err(Error::shape(
            "cfm_loss",
            format!("x0 {:?}, x1 {:?}, tau {:?}", x0.shape(), x1.shape(), tau.shape()),
        ));
    }
    let d = x0.cols();
    let mut xt = Vec::with_capacity(n * d);
    let mut target = Vec::with_capacity(n * d);
    for i in 0..n {
        let t = tau.data()[i];
        for j in 0..d {
            let (a, b) = (x0.get(i, j), x1.get(i, j));
            let e: f64 = if sigma > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
            xt.push((1.0 - t) * a + t * b + sigma * e);
            target.push(b - a);
        }
    }
    let tape = model.tape();
    let xt = tape.constant(Tensor::from_parts(vec![n, d], xt));
    let target = tape.constant(Tensor::from_parts(vec![n, d], target));
    let v = model.forward(tape.constant(tau.clone()), xt)?;
    v.sub(target)?.square()?.sum()?.scale(1.0 / n as f64)
}

/// Trains a fresh model on `dataset` (rows are points).
pub fn train_prior(dataset: &Tensor, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n_data = dataset.rows();
    let d = cfg.architecture.input_dim;
    if n_data == 0 || dataset.cols() != d {
        return Err(Error::shape(
            "train_prior",
            format!("dataset {:?} for input dim {d}", dataset.shape()),
        ));
    }
    let b = cfg.batch_size.min(n_data);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = VelocityModel::new(cfg.architecture.clone(), &mut rng)?;
    let mut adam = Adam::new(cfg.adam())?;

    let mut order: Vec<usize> = (0..n_data).collect();
    let mut cursor = n_data;
    let mut epochs = 0;
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        // Without replacement within an epoch; a short tail is dropped.
        if cursor + b > n_data {
            order.shuffle(&mut rng);
            cursor = 0;
            epochs += 1;
        }
        let x1 = dataset.select_rows(&order[cursor..cursor + b]);
        cursor += b;
        let x0 = standard_normal(b, d, &mut rng);
        let x0 = match cfg.pairing {
            Pairing::Ot => {
                let plan = ot_pairs(&x0, &x1, GroundCost::SquaredEuclidean)?;
                let mut inv = vec![0; b];
                for (i, &j) in plan.permutation.iter().enumerate() {
                    inv[j] = i;
                }
                x0.select_rows(&inv)
            }
            Pairing::Independent => x0,
        };
        let tau = Tensor::from_parts(vec![b, 1], (0..b).map(|_| rng.random::<f64>()).collect());

        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let loss = cfm_loss(&bound, &x0, &x1, &tau, cfg.bridge_sigma, &mut rng)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        let grad_tensors: Vec<Tensor> = bound
            .params()
            .iter()
            .flat_map(|(w, bias)| [grads.wrt(*w), grads.wrt(*bias)])
            .collect();
        drop(bound);
        let grad_slices: Vec<&[f64]> = grad_tensors.iter().map(|g| g.data()).collect();
        let mut params: Vec<&mut [f64]> = model.params_mut().map(|p| p.data_mut()).collect();
        adam.step(&mut params, &grad_slices)?;

        history.push(value);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            log::info!("step {:>6}  loss {value:.5}", step + 1);
        }
    }
    Ok(TrainOutcome {
        model,
        loss_history: history,
        epochs,
    })
}
