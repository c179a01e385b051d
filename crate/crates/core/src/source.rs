//! Conditioning in source space with the transport held fixed.
//!
//! The energy of a source point is
//!
//! ```text
//! E(x0) = ||y - F(T(x0))||^2 + lambda ||x0||^2 + alpha R0(x0) + beta R1(T(x0))
//! ```
//!
//! where `T` is the unrolled solve. [`dflow_map`] minimizes it from random
//! restarts; [`dflow_sgld`] samples `exp(-E / s)` with a diagonal RMSProp-style
//! preconditioner built from the misfit gradient only.
//!
//! All routines treat rows as independent problems, so restarts and chains are
//! batched as rows of one tensor. Each restart or chain `j` draws from its own
//! ChaCha stream `j` of the configured seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::MeasurementModel;
use crate::error::{Error, Result};
use crate::model::VelocityModel;
use crate::optim::{minimize_rows, Adam, AdamConfig, LbfgsConfig};
use crate::schedule::Schedule;
use crate::tensor::Tensor;
use crate::transport::{integrate, integrate_on_tape, IntegratorConfig};

/// Pluggable penalty returning one value per row as an `[n, 1]` variable.
pub trait Regularizer: Sync {
    fn penalty<'t>(&self, x: Var<'t>) -> Result<Var<'t>>;
}

/// Weights and optional hooks of the source energy.
#[derive(Clone, Copy, Default)]
pub struct EnergyTerms<'a> {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Penalty on the source point.
    pub r0: Option<&'a dyn Regularizer>,
    /// Penalty on the transported point.
    pub r1: Option<&'a dyn Regularizer>,
}

impl EnergyTerms<'_> {
    pub fn prior(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.lambda, self.alpha, self.beta].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid(format!(
                "energy weights must be >= 0, got lambda {} alpha {} beta {}",
                self.lambda, self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Tape variables for one evaluation of the source energy.
pub struct SourceEnergy<'t> {
    /// `[n, 1]` misfit `||y - F(T(x0))||^2`.
    pub misfit: Var<'t>,
    /// `[n, 1]` full energy.
    pub total: Var<'t>,
    /// `[n, d]` transported points.
    pub x1: Var<'t>,
}

/// Builds the per-row energy on the tape that owns `x0`.
pub fn source_energy<'t>(
    model: &VelocityModel,
    measurement: &MeasurementModel,
    x0: Var<'t>,
    terms: &EnergyTerms<'_>,
    integrator: &IntegratorConfig,
) -> Result<SourceEnergy<'t>> {
    terms.validate()?;
    let tape = x0.tape();
    let bound = model.bind(tape, false);
    let x1 = integrate_on_tape(&bound, x0, integrator)?;
    let misfit = measurement.misfit_var(x1)?;
    let mut total = misfit;
    if terms.lambda != 0.0 {
        total = total.add(x0.square()?.sum_rows()?.scale(terms.lambda)?)?;
    }
    if let (Some(r), true) = (terms.r0, terms.alpha != 0.0) {
        total = total.add(r.penalty(x0)?.scale(terms.alpha)?)?;
    }
    if let (Some(r), true) = (terms.r1, terms.beta != 0.0) {
        total = total.add(r.penalty(x1)?.scale(terms.beta)?)?;
    }
    Ok(SourceEnergy { misfit, total, x1 })
}

/// Detached evaluation of the energy and its gradients.
#[derive(Clone, Debug)]
pub struct EnergyEval {
    pub total: Vec<f64>,
    pub misfit: Vec<f64>,
    /// Gradient of the full energy.
    pub grad: Tensor,
    /// Gradient of the misfit term alone.
    pub grad_misfit: Tensor,
}

/// Anything that yields row-separable energies and gradients for a batch of
/// source points. Implemented for the flow energy and for closed-form test
/// targets.
pub trait SourceTarget: Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, x0: &Tensor) -> Result<EnergyEval>;
}

/// The flow-induced energy as a [`SourceTarget`].
pub struct FlowEnergy<'a> {
    pub model: &'a VelocityModel,
    pub measurement: &'a MeasurementModel,
    pub terms: EnergyTerms<'a>,
    pub integrator: IntegratorConfig,
}

impl SourceTarget for FlowEnergy<'_> {
    fn dim(&self) -> usize {
        self.model.architecture().input_dim
    }

    fn evaluate(&self, x0: &Tensor) -> Result<EnergyEval> {
        let tape = Tape::new();
        let xv = tape.leaf(x0.clone());
        let e = source_energy(self.model, self.measurement, xv, &self.terms, &self.integrator)?;
        let grad_misfit = tape.backward(e.misfit.sum()?)?.wrt(xv);
        let has_hooks = (self.terms.r0.is_some() && self.terms.alpha != 0.0)
            || (self.terms.r1.is_some() && self.terms.beta != 0.0);
        let grad = if has_hooks {
            tape.backward(e.total.sum()?)?.wrt(xv)
        } else if self.terms.lambda != 0.0 {
            let l2 = 2.0 * self.terms.lambda;
            grad_misfit.zip_map(x0, |g, x| g + l2 * x)?
        } else {
            grad_misfit.clone()
        };
        Ok(EnergyEval {
            total: e.total.value().into_vec(),
            misfit: e.misfit.value().into_vec(),
            grad,
            grad_misfit,
        })
    }
}

/// `x1 = T(x0)` by the detached solver.
pub fn push_forward(model: &VelocityModel, x0: &Tensor, integrator: &IntegratorConfig) -> Result<Tensor> {
    integrate(model, x0, integrator, None)
}

/// Maps target-space points back to the source by integrating from `tau = 1` to 0.
pub fn invert_to_source(model: &VelocityModel, x1: &Tensor, integrator: &IntegratorConfig) -> Result<Tensor> {
    let mut cfg = *integrator;
    cfg.direction = crate::transport::Direction::Reverse;
    integrate(model, x1, &cfg, None)
}

/// Row `j` is a draw from stream `j` of `seed`.
pub fn gaussian_starts(seed: u64, first_stream: u64, rows: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * dim);
    for j in 0..rows {
        let mut rng = stream_rng(seed, first_stream + j as u64);
        data.extend((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    Tensor::from_parts(vec![rows, dim], data)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapOptimizer {
    Adam,
    Lbfgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DFlowConfig {
    pub n_optim_steps: usize,
    pub optimizer: MapOptimizer,
    pub learning_rate: f64,
    pub integrator: IntegratorConfig,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for DFlowConfig {
    fn default() -> Self {
        Self {
            n_optim_steps: 10,
            optimizer: MapOptimizer::Adam,
            learning_rate: 0.1,
            integrator: IntegratorConfig::midpoint(6),
            alpha: 0.0,
            beta: 0.0,
            seed: 0,
        }
    }
}

impl DFlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_optim_steps == 0 {
            return Err(Error::invalid("n_optim_steps must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        self.integrator.validate()
    }
}

#[derive(Clone, Debug)]
pub struct DFlowOutcome {
    /// Pushforwards `T(x0*)`.
    pub samples: Tensor,
    /// Optimized sources `x0*`.
    pub sources: Tensor,
    pub energies: Vec<f64>,
}

/// Runs `steps` optimizer iterations on every row of `x0`.
pub fn optimize_sources(
    target: &dyn SourceTarget,
    x0: &Tensor,
    optimizer: MapOptimizer,
    steps: usize,
    learning_rate: f64,
) -> Result<Tensor> {
    if steps == 0 {
        return Ok(x0.clone());
    }
    match optimizer {
        MapOptimizer::Adam => {
            let mut adam = Adam::new(AdamConfig::with_lr(learning_rate))?;
            let mut x = x0.clone();
            for _ in 0..steps {
                let e = target.evaluate(&x)?;
                adam.step(&mut [x.data_mut()], &[e.grad.data()])?;
            }
            Ok(x)
        }
        MapOptimizer::Lbfgs => {
            let cfg = LbfgsConfig {
                max_iters: steps,
                ..LbfgsConfig::default()
            };
            let mut objective = |x: &Tensor| -> Result<(Vec<f64>, Tensor)> {
                let e = target.evaluate(x)?;
                Ok((e.total, e.grad))
            };
            Ok(minimize_rows(&mut objective, x0, &cfg)?.x)
        }
    }
}

fn row_is_finite(t: &Tensor, r: usize) -> bool {
    t.row(r).iter().all(|v| v.is_finite())
}

/// D-Flow MAP from `n_restarts` Gaussian starts, without the source prior term.
pub fn dflow_map(
    model: &VelocityModel,
    measurement: &MeasurementModel,
    cfg: &DFlowConfig,
    n_restarts: usize,
    regularizers: (Option<&dyn Regularizer>, Option<&dyn Regularizer>),
) -> Result<DFlowOutcome> {
    cfg.validate()?;
    let target = FlowEnergy {
        model,
        measurement,
        terms: EnergyTerms {
            lambda: 0.0,
            alpha: cfg.alpha,
            beta: cfg.beta,
            r0: regularizers.0,
            r1: regularizers.1,
        },
        integrator: cfg.integrator,
    };
    let d = target.dim();
    let x0 = gaussian_starts(cfg.seed, 0, n_restarts, d);
    let mut sources = optimize_sources(&target, &x0, cfg.optimizer, cfg.n_optim_steps, cfg.learning_rate)?;

    let mut energies = target.evaluate(&sources)?.total;
    let failed: Vec<usize> = (0..n_restarts)
        .filter(|&r| !energies[r].is_finite() || !row_is_finite(&sources, r))
        .collect();
    if !failed.is_empty() {
        log::warn!("D-Flow: {} restarts diverged, retrying once", failed.len());
        // Retry draws come from streams past the regular ones.
        let retry_x0 = Tensor::vstack(
            &failed
                .iter()
                .map(|&r| gaussian_starts(cfg.seed, (1 << 32) + r as u64, 1, d))
                .collect::<Vec<_>>(),
        )?;
        let retried = optimize_sources(&target, &retry_x0, cfg.optimizer, cfg.n_optim_steps, cfg.learning_rate)?;
        let retried_e = target.evaluate(&retried)?.total;
        let data = sources.data_mut();
        for (k, &r) in failed.iter().enumerate() {
            if !retried_e[k].is_finite() || !row_is_finite(&retried, k) {
                return Err(Error::NonFinite {
                    context: "dflow restart",
                    step: r,
                });
            }
            data[r * d..(r + 1) * d].copy_from_slice(retried.row(k));
            energies[r] = retried_e[k];
        }
    }
    let samples = push_forward(model, &sources, &cfg.integrator)?;
    Ok(DFlowOutcome {
        samples,
        sources,
        energies,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarmStart {
    Gaussian,
    MapEnsemble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgldConfig {
    pub n_parallel: usize,
    pub n_steps: usize,
    pub burn: usize,
    pub step_size: Schedule,
    pub noise_scale: Schedule,
    pub lambda: f64,
    pub omega: f64,
    pub damping: Schedule,
    pub thinning: usize,
    pub use_preconditioner: bool,
    pub warm_start: WarmStart,
    /// MAP steps per chain when `warm_start` is `map-ensemble`.
    pub warm_start_steps: usize,
    pub warm_start_lr: f64,
    pub integrator: IntegratorConfig,
    pub alpha: f64,
    pub beta: f64,
    /// Chains are split into this many contiguous groups run on separate threads.
    pub workers: usize,
    pub seed: u64,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            n_parallel: 10,
            n_steps: 500,
            burn: 100,
            step_size: Schedule::Constant(5e-2),
            noise_scale: Schedule::Constant(1e-2),
            lambda: 0.1,
            omega: 0.99,
            damping: Schedule::Constant(1e-3),
            thinning: 1,
            use_preconditioner: true,
            warm_start: WarmStart::Gaussian,
            warm_start_steps: 3,
            warm_start_lr: 0.1,
            integrator: IntegratorConfig::midpoint(6),
            alpha: 0.0,
            beta: 0.0,
            workers: 1,
            seed: 0,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.n_parallel == 0 || self.workers == 0 || self.thinning == 0 {
            return bad("n_parallel, workers and thinning must be positive".into());
        }
        if self.burn >= self.n_steps {
            return bad(format!("burn {} must be below n_steps {}", self.burn, self.n_steps));
        }
        if !(self.omega > 0.0 && self.omega < 1.0) {
            return bad(format!("omega must lie in (0, 1), got {}", self.omega));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        for (name, s) in [("step_size", &self.step_size), ("noise_scale", &self.noise_scale), ("damping", &self.damping)] {
            if let Some(c) = s.as_constant() {
                if !(c > 0.0 && c.is_finite()) {
                    return bad(format!("{name} must be > 0, got {c}"));
                }
            }
        }
        self.integrator.validate()
    }

    /// Number of draws each surviving chain contributes.
    pub fn draws_per_chain(&self) -> usize {
        (self.n_steps - self.burn).div_ceil(self.thinning)
    }
}

/// Per-chain state of the sampler.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub x0: Vec<f64>,
    /// Running second moment of the misfit gradient.
    pub v: Vec<f64>,
    pub rng: ChaCha8Rng,
    pub collected: Vec<Vec<f64>>,
    pub alive: bool,
}

#[derive(Clone, Debug)]
pub struct SgldOutcome {
    /// Pushforwards of the collected sources.
    pub samples: Tensor,
    /// Collected sources, grouped by chain in chain order.
    pub sources: Tensor,
    /// Chain index of every collected row.
    pub chain_of: Vec<usize>,
    /// Chains dropped after a non-finite state.
    pub dropped: Vec<usize>,
}

/// Observer hook called after every update with the preconditioner diagonal
/// of each live chain (all ones when disabled).
pub trait SgldObserver: Sync {
    fn after_step(&self, chain: usize, step: usize, preconditioner: &[f64]);
}

struct NoObserver;
impl SgldObserver for NoObserver {
    fn after_step(&self, _: usize, _: usize, _: &[f64]) {}
}

/// First noise stream; offset so it never overlaps the init streams.
pub const NOISE_STREAM_BASE: u64 = 1 << 33;

/// Runs the chains `first..first + init.rows()` for the full schedule.
fn run_chain_group(
    target: &dyn SourceTarget,
    cfg: &SgldConfig,
    first: usize,
    init: &Tensor,
    streams: &[u64],
    observer: &dyn SgldObserver,
) -> Result<Vec<ChainState>> {
    let d = init.cols();
    let mut chains: Vec<ChainState> = (0..init.rows())
        .map(|r| {
            let rng = stream_rng(cfg.seed, streams[r]);
            ChainState {
                x0: init.row(r).to_vec(),
                v: vec![0.0; d],
                rng,
                collected: Vec::with_capacity(cfg.draws_per_chain()),
                alive: init.row(r).iter().all(|v| v.is_finite()),
            }
        })
        .collect();

    for i in 0..cfg.n_steps {
        let live: Vec<usize> = (0..chains.len()).filter(|&c| chains[c].alive).collect();
        if live.is_empty() {
            break;
        }
        let batch = Tensor::from_parts(
            vec![live.len(), d],
            live.iter().flat_map(|&c| chains[c].x0.iter().copied()).collect(),
        );
        let e = target.evaluate(&batch)?;
        let t = (i + 1) as f64;
        let eta = cfg.step_size.at(t);
        let s = cfg.noise_scale.at(t);
        let delta = cfg.damping.at(t);
        for (k, &c) in live.iter().enumerate() {
            let ch = &mut chains[c];
            let g = e.grad.row(k);
            let g1 = e.grad_misfit.row(k);
            let mut p = vec![1.0; d];
            if cfg.use_preconditioner {
                for j in 0..d {
                    ch.v[j] = cfg.omega * ch.v[j] + (1.0 - cfg.omega) * g1[j] * g1[j];
                    p[j] = 1.0 / (ch.v[j].sqrt() + delta);
                }
            }
            for j in 0..d {
                let xi: f64 = ch.rng.sample(StandardNormal);
                ch.x0[j] += -eta * p[j] * g[j] + (2.0 * eta * s * p[j]).sqrt() * xi;
            }
            if !e.total[k].is_finite() || ch.x0.iter().any(|v| !v.is_finite()) {
                log::warn!("SGLD chain {} produced a non-finite state at step {i}; dropping it", first + c);
                ch.alive = false;
                continue;
            }
            observer.after_step(first + c, i, &p);
            if i >= cfg.burn && (i - cfg.burn) % cfg.thinning == 0 {
                ch.collected.push(ch.x0.clone());
            }
        }
    }
    Ok(chains)
}

/// Runs all chains from `init` (one row per chain) on `target` and returns the
/// final chain states in chain order. Chain `j` draws its noise from stream
/// `NOISE_STREAM_BASE + j` of `cfg.seed`.
pub fn sgld_chains(
    target: &dyn SourceTarget,
    cfg: &SgldConfig,
    init: &Tensor,
    observer: Option<&dyn SgldObserver>,
) -> Result<Vec<ChainState>> {
    let streams: Vec<u64> = (0..cfg.n_parallel as u64).map(|j| NOISE_STREAM_BASE + j).collect();
    sgld_chains_with_streams(target, cfg, init, &streams, observer)
}

/// [`sgld_chains`] with an explicit noise stream per chain.
pub fn sgld_chains_with_streams(
    target: &dyn SourceTarget,
    cfg: &SgldConfig,
    init: &Tensor,
    streams: &[u64],
    observer: Option<&dyn SgldObserver>,
) -> Result<Vec<ChainState>> {
    cfg.validate()?;
    if init.rows() != cfg.n_parallel || init.cols() != target.dim() || streams.len() != cfg.n_parallel {
        return Err(Error::shape(
            "sgld",
            format!(
                "init {:?} and {} streams for {} chains of dim {}",
                init.shape(),
                streams.len(),
                cfg.n_parallel,
                target.dim()
            ),
        ));
    }
    let observer = observer.unwrap_or(&NoObserver);
    let m = cfg.n_parallel;
    let workers = cfg.workers.min(m);
    if workers == 1 {
        return run_chain_group(target, cfg, 0, init, streams, observer);
    }
    let per = m.div_ceil(workers);
    let groups: Vec<(usize, Tensor)> = (0..m)
        .step_by(per)
        .map(|start| {
            let end = (start + per).min(m);
            (start, init.select_rows(&(start..end).collect::<Vec<_>>()))
        })
        .collect();
    let results: Vec<Result<Vec<ChainState>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = groups
            .iter()
            .map(|(start, rows)| {
                let streams = &streams[*start..*start + rows.rows()];
                scope.spawn(move || run_chain_group(target, cfg, *start, rows, streams, observer))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("SGLD worker panicked")).collect()
    });
    let mut all = Vec::with_capacity(m);
    for r in results {
        all.extend(r?);
    }
    Ok(all)
}

/// Initial points for the chains: Gaussian draws, optionally refined by a few
/// MAP steps on the sampler's energy.
pub fn warm_start_ensemble(target: &dyn SourceTarget, cfg: &SgldConfig) -> Result<Tensor> {
    let x0 = gaussian_starts(cfg.seed, 0, cfg.n_parallel, target.dim());
    match cfg.warm_start {
        WarmStart::Gaussian => Ok(x0),
        WarmStart::MapEnsemble => {
            optimize_sources(target, &x0, MapOptimizer::Adam, cfg.warm_start_steps, cfg.warm_start_lr)
        }
    }
}

/// Preconditioned D-Flow SGLD: samples sources, then pushes every collected
/// draw through the transport.
pub fn dflow_sgld(
    model: &VelocityModel,
    measurement: &MeasurementModel,
    cfg: &SgldConfig,
    regularizers: (Option<&dyn Regularizer>, Option<&dyn Regularizer>),
) -> Result<SgldOutcome> {
    cfg.validate()?;
    let target = FlowEnergy {
        model,
        measurement,
        terms: EnergyTerms {
            lambda: cfg.lambda,
            alpha: cfg.alpha,
            beta: cfg.beta,
            r0: regularizers.0,
            r1: regularizers.1,
        },
        integrator: cfg.integrator,
    };
    let init = warm_start_ensemble(&target, cfg)?;
    let chains = sgld_chains(&target, cfg, &init, None)?;
    collect_outcome(model, cfg, chains)
}

fn collect_outcome(model: &VelocityModel, cfg: &SgldConfig, chains: Vec<ChainState>) -> Result<SgldOutcome> {
    let dropped: Vec<usize> = chains.iter().enumerate().filter(|(_, c)| !c.alive).map(|(i, _)| i).collect();
    if dropped.len() == chains.len() {
        return Err(Error::AllChainsDead(chains.len()));
    }
    let d = model.architecture().input_dim;
    let mut data = Vec::new();
    let mut chain_of = Vec::new();
    for (i, c) in chains.iter().enumerate().filter(|(_, c)| c.alive) {
        for x in &c.collected {
            data.extend_from_slice(x);
            chain_of.push(i);
        }
    }
    let sources = Tensor::from_parts(vec![chain_of.len(), d], data);
    let samples = push_forward(model, &sources, &cfg.integrator)?;
    Ok(SgldOutcome {
        samples,
        sources,
        chain_of,
        dropped,
    })
}
