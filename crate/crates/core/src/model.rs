//! Time-conditioned MLP velocity field `v(tau, x)`.
//!
//! The transport time is embedded as `[sin(f_k tau), cos(f_k tau)]` and
//! concatenated to the state before the first affine layer. Hidden layers use
//! SiLU; the output layer is linear and has the same width as the state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transport::{TapeField, VectorField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub frequencies: Vec<f64>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_dim: 128,
            depth: 4,
            frequencies: (1..=8).map(|k| k as f64 * std::f64::consts::PI).collect(),
        }
    }
}

impl Architecture {
    pub fn small(hidden_dim: usize, depth: usize) -> Self {
        Self {
            hidden_dim,
            depth,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.depth == 0 {
            return Err(Error::invalid(format!("degenerate architecture {self:?}")));
        }
        if self.frequencies.iter().any(|f| !f.is_finite()) {
            return Err(Error::invalid("time-embedding frequencies must be finite"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let first = self.input_dim + 2 * self.frequencies.len();
        let mut dims = vec![(first, self.hidden_dim)];
        dims.extend(std::iter::repeat_n((self.hidden_dim, self.hidden_dim), self.depth - 1));
        dims.push((self.hidden_dim, self.input_dim));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[1, fan_out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityModel {
    arch: Architecture,
    layers: Vec<Affine>,
}

impl VelocityModel {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn new(arch: Architecture, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |n: usize| -> Vec<f64> {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                Affine {
                    weight: Tensor::from_parts(vec![fan_in, fan_out], draw(fan_in * fan_out)),
                    bias: Tensor::from_parts(vec![1, fan_out], draw(fan_out)),
                }
            })
            .collect();
        Ok(Self { arch, layers })
    }

    /// Zeroes the output layer so the field vanishes everywhere.
    pub fn with_zero_output(mut self) -> Self {
        let last = self.layers.last_mut().expect("at least one layer");
        last.weight = Tensor::zeros(last.weight.shape());
        last.bias = Tensor::zeros(last.bias.shape());
        self
    }

    /// Field that equals `c` everywhere: zero output weights, bias `c`.
    pub fn with_constant_output(self, c: &[f64]) -> Result<Self> {
        if c.len() != self.arch.input_dim {
            return Err(Error::shape("constant output", format!("{} values for dim {}", c.len(), self.arch.input_dim)));
        }
        let mut m = self.with_zero_output();
        let last = m.layers.last_mut().expect("at least one layer");
        last.bias = Tensor::from_parts(vec![1, c.len()], c.to_vec());
        Ok(m)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn from_flat(arch: Architecture, weights: &[f64]) -> Result<Self> {
        arch.validate()?;
        if weights.len() != arch.num_params() {
            return Err(Error::shape(
                "from_flat",
                format!("{} weights for {} parameters", weights.len(), arch.num_params()),
            ));
        }
        let mut offset = 0;
        let mut take = |n: usize| {
            let s = weights[offset..offset + n].to_vec();
            offset += n;
            s
        };
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Affine {
                weight: Tensor::from_parts(vec![i, o], take(i * o)),
                bias: Tensor::from_parts(vec![1, o], take(o)),
            })
            .collect();
        Ok(Self { arch, layers })
    }

    /// Parameter tensors in layer order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Registers the weights on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundModel<'t> {
        let reg = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let freqs = self.arch.frequencies.clone();
        let n_freq = freqs.len();
        BoundModel {
            tape,
            input_dim: self.arch.input_dim,
            frequencies: (n_freq > 0).then(|| tape.constant(Tensor::from_parts(vec![1, n_freq], freqs))),
            params: self.layers.iter().map(|l| (reg(&l.weight), reg(&l.bias))).collect(),
        }
    }

    pub fn evaluate(&self, tau: f64, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = bound.forward_at(tau, tape.constant(x.clone()))?;
        Ok(out.value())
    }
}

impl VectorField for VelocityModel {
    fn dim(&self) -> usize {
        self.arch.input_dim
    }

    fn velocity(&self, tau: f64, x: &Tensor) -> Result<Tensor> {
        self.evaluate(tau, x)
    }
}

/// A [`VelocityModel`] whose weights live on a tape.
pub struct BoundModel<'t> {
    tape: &'t Tape,
    input_dim: usize,
    frequencies: Option<Var<'t>>,
    params: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundModel<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// `(weight, bias)` variables per layer.
    pub fn params(&self) -> &[(Var<'t>, Var<'t>)] {
        &self.params
    }

    /// `tau` is `[1, 1]` (shared) or `[n, 1]` (per row); `x` is `[n, input_dim]`.
    pub fn forward(&self, tau: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let xs = x.shape();
        if xs.len() != 2 || xs[1] != self.input_dim {
            return Err(Error::shape(
                "velocity",
                format!("expected [n, {}] input, got {xs:?}", self.input_dim),
            ));
        }
        let n = xs[0];
        let ts = tau.shape();
        if ts.len() != 2 || ts[1] != 1 || (ts[0] != 1 && ts[0] != n) {
            return Err(Error::shape("velocity", format!("tau shape {ts:?} for {n} rows")));
        }

        let mut h = match self.frequencies {
            Some(freqs) => {
                let phase = tau.matmul(freqs)?;
                let mut emb = Var::concat(&[phase.sin()?, phase.cos()?], 1)?;
                if ts[0] == 1 && n > 1 {
                    emb = emb.broadcast(n)?;
                }
                Var::concat(&[x, emb], 1)?
            }
            None => x,
        };
        let last = self.params.len() - 1;
        for (i, (w, b)) in self.params.iter().enumerate() {
            h = h.matmul(*w)?.add(*b)?;
            if i < last {
                h = h.silu()?;
            }
        }
        Ok(h)
    }

    pub fn forward_at(&self, tau: f64, x: Var<'t>) -> Result<Var<'t>> {
        let tau = self.tape.constant(Tensor::scalar(tau));
        self.forward(tau, x)
    }
}

impl<'t> TapeField<'t> for BoundModel<'t> {
    fn velocity_var(&self, tau: f64, x: Var<'t>) -> Result<Var<'t>> {
        self.forward_at(tau, x)
    }
}
