//! First-order optimizers over flat parameter slices.
//!
//! [`Adam`] is elementwise, so running it on a batch of independent rows is
//! the same as running it on each row alone. [`minimize_rows`] is a batched
//! L-BFGS where every row of the iterate is a separate problem with its own
//! history and line search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid Adam settings: {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every parameter group. Groups must keep their order and
    /// lengths across calls.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameter groups but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len()
            || params.iter().zip(grads).zip(&self.m).any(|((p, g), m)| p.len() != g.len() || p.len() != m.len())
        {
            return Err(Error::invalid("parameter group shapes changed between Adam steps"));
        }
        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsConfig {
    pub history: usize,
    pub max_iters: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    pub grad_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 10,
            max_iters: 20,
            c1: 1e-4,
            backtrack: 0.5,
            max_backtracks: 20,
            grad_tol: 1e-10,
        }
    }
}

/// Result of a row-batched minimization.
#[derive(Clone, Debug)]
pub struct RowOptimum {
    pub x: Tensor,
    pub values: Vec<f64>,
    pub iterations: usize,
}

/// Evaluates per-row objective values and per-row gradients for a batch.
pub trait RowObjective {
    fn eval(&mut self, x: &Tensor) -> Result<(Vec<f64>, Tensor)>;
}

impl<F> RowObjective for F
where
    F: FnMut(&Tensor) -> Result<(Vec<f64>, Tensor)>,
{
    fn eval(&mut self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self(x)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Default)]
struct History {
    s: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    rho: Vec<f64>,
}

impl History {
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>, cap: usize) {
        let sy = dot(&s, &y);
        if sy <= 1e-12 {
            return;
        }
        if self.s.len() == cap {
            self.s.remove(0);
            self.y.remove(0);
            self.rho.remove(0);
        }
        self.s.push(s);
        self.y.push(y);
        self.rho.push(1.0 / sy);
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.rho.clear();
    }

    /// Two-loop recursion: returns `-H g`.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let k = self.s.len();
        let mut q = g.to_vec();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = self.rho[i] * dot(&self.s[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        if k > 0 {
            let gamma = dot(&self.s[k - 1], &self.y[k - 1]) / dot(&self.y[k - 1], &self.y[k - 1]);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            // First step: unit-length-ish move, as in common L-BFGS defaults.
            let l1: f64 = g.iter().map(|v| v.abs()).sum();
            let scale = (1.0 / l1.max(1e-300)).min(1.0);
            q.iter_mut().for_each(|v| *v *= scale);
        }
        for i in 0..k {
            let beta = self.rho[i] * dot(&self.y[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

/// Batched L-BFGS with Armijo backtracking. Each row of `x0` is minimized
/// independently; `objective` must return row-separable values and gradients.
pub fn minimize_rows(objective: &mut impl RowObjective, x0: &Tensor, cfg: &LbfgsConfig) -> Result<RowOptimum> {
    if cfg.history == 0 || !(0.0 < cfg.backtrack && cfg.backtrack < 1.0) || cfg.c1 <= 0.0 {
        return Err(Error::invalid(format!("invalid L-BFGS settings: {cfg:?}")));
    }
    let n = x0.rows();
    let d = x0.cols();
    let mut x = x0.clone();
    let (mut f, mut g) = objective.eval(&x)?;
    if f.iter().any(|v| !v.is_finite()) || !g.is_finite() {
        return Err(Error::NonFinite {
            context: "lbfgs",
            step: 0,
        });
    }
    let mut hist = vec![History::default(); n];
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        let mut dirs = vec![vec![0.0; d]; n];
        let mut slope = vec![0.0; n];
        let mut active = vec![false; n];
        for r in 0..n {
            let gr = g.row(r);
            if dot(gr, gr).sqrt() <= cfg.grad_tol {
                continue;
            }
            let mut p = hist[r].direction(gr);
            let mut gd = dot(gr, &p);
            if !(gd < 0.0) {
                hist[r].clear();
                p = hist[r].direction(gr);
                gd = dot(gr, &p);
            }
            dirs[r] = p;
            slope[r] = gd;
            active[r] = true;
        }
        if !active.iter().any(|&a| a) {
            break;
        }
        iterations += 1;

        let mut t = vec![1.0; n];
        let mut accepted: Vec<Option<(f64, Vec<f64>, Vec<f64>)>> = vec![None; n];
        for _ in 0..=cfg.max_backtracks {
            let pending: Vec<usize> = (0..n).filter(|&r| active[r] && accepted[r].is_none()).collect();
            if pending.is_empty() {
                break;
            }
            let mut trial = x.clone();
            {
                let data = trial.data_mut();
                for &r in &pending {
                    for j in 0..d {
                        data[r * d + j] += t[r] * dirs[r][j];
                    }
                }
            }
            let (ft, gt) = objective.eval(&trial)?;
            for &r in &pending {
                let ok = ft[r].is_finite()
                    && gt.row(r).iter().all(|v| v.is_finite())
                    && ft[r] <= f[r] + cfg.c1 * t[r] * slope[r];
                if ok {
                    accepted[r] = Some((ft[r], trial.row(r).to_vec(), gt.row(r).to_vec()));
                } else {
                    t[r] *= cfg.backtrack;
                }
            }
        }

        let xd = x.data_mut();
        let gd = g.data_mut();
        for r in 0..n {
            let Some((fr, xr, gr)) = accepted[r].take() else {
                if active[r] {
                    hist[r].clear();
                }
                continue;
            };
            let s: Vec<f64> = (0..d).map(|j| xr[j] - xd[r * d + j]).collect();
            let yv: Vec<f64> = (0..d).map(|j| gr[j] - gd[r * d + j]).collect();
            hist[r].push(s, yv, cfg.history);
            xd[r * d..(r + 1) * d].copy_from_slice(&xr);
            gd[r * d..(r + 1) * d].copy_from_slice(&gr);
            f[r] = fr;
        }
    }
    Ok(RowOptimum {
        x,
        values: f,
        iterations,
    })
}
