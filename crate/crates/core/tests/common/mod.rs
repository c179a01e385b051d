//! Oracles shared by the integration suites: finite-difference gradient
//! checks, brute-force assignment and pointwise KS stencils.
#![allow(dead_code)]

use flowcond::data::MeasurementModel;
use flowcond::eval::Field2D;
use flowcond::model::{Architecture, VelocityModel};
use flowcond::source::{source_energy, EnergyTerms};
use flowcond::train::cfm_loss;
use flowcond::transport::IntegratorConfig;
use flowcond::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Scalar = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: Scalar,
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute gap when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn eval(f: &Scalar, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars).value().item()
}

/// Analytic gradients of every input against central differences; returns the
/// largest per-input relative error.
pub fn check(case: &Case) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.f)(&tape, &vars);
    assert_eq!(out.shape(), vec![1, 1], "{} must reduce to a scalar", case.name);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let mut numeric = Vec::with_capacity(analytic.data().len());
        for i in 0..case.inputs[k].data().len() {
            let x = case.inputs[k].data()[i];
            let h = 1e-6 * x.abs().max(1.0);
            let mut plus = case.inputs.to_vec();
            plus[k].data_mut()[i] = x + h;
            let mut minus = case.inputs.to_vec();
            minus[k].data_mut()[i] = x - h;
            numeric.push((eval(&case.f, &plus) - eval(&case.f, &minus)) / (2.0 * h));
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Away from zero with a random sign, for the `abs` kink.
fn signed_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let t = uniform(rng, shape, 0.2, 2.0);
    let signs: Vec<f64> = (0..t.data().len()).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), t.data().iter().zip(&signs).map(|(a, s)| a * s).collect()).unwrap()
}

/// Contracts a non-scalar output with fixed weights so every entry matters.
fn contract<'t>(tape: &'t Tape, v: Var<'t>, w: &Tensor) -> Var<'t> {
    v.mul(tape.constant(w.clone())).unwrap().sum().unwrap()
}

fn unary(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    x: Tensor,
    op: fn(Var<'_>) -> flowcond::Result<Var<'_>>,
) -> Case {
    let w = uniform(rng, x.shape(), -1.0, 1.0);
    Case {
        name,
        inputs: vec![x],
        f: Box::new(move |tape, v| contract(tape, op(v[0]).unwrap(), &w)),
    }
}

/// One random instance of every tape op.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..5);
    let d = rng.random_range(1..5);
    let k = rng.random_range(1..5);
    let mut cases = Vec::new();
    let sh = [n, d];

    for (name, op) in [
        ("add", (|a: Var<'_>, b| a.add(b)) as for<'t> fn(Var<'t>, Var<'t>) -> flowcond::Result<Var<'t>>),
        ("sub", |a, b| a.sub(b)),
        ("mul", |a, b| a.mul(b)),
    ] {
        let w = uniform(&mut rng, &sh, -1.0, 1.0);
        cases.push(Case {
            name,
            inputs: vec![uniform(&mut rng, &sh, -2.0, 2.0), uniform(&mut rng, &sh, -2.0, 2.0)],
            f: Box::new(move |tape, v| contract(tape, op(v[0], v[1]).unwrap(), &w)),
        });
        let w = uniform(&mut rng, &sh, -1.0, 1.0);
        cases.push(Case {
            name,
            inputs: vec![uniform(&mut rng, &sh, -2.0, 2.0), uniform(&mut rng, &[1, d], -2.0, 2.0)],
            f: Box::new(move |tape, v| contract(tape, op(v[0], v[1]).unwrap(), &w)),
        });
    }
    let c: f64 = rng.random_range(-3.0..3.0);
    let w = uniform(&mut rng, &sh, -1.0, 1.0);
    cases.push(Case {
        name: "scalar-mul",
        inputs: vec![uniform(&mut rng, &sh, -2.0, 2.0)],
        f: Box::new(move |tape, v| contract(tape, v[0].scale(c).unwrap(), &w)),
    });
    let w = uniform(&mut rng, &[n, k], -1.0, 1.0);
    cases.push(Case {
        name: "matmul",
        inputs: vec![uniform(&mut rng, &[n, d], -2.0, 2.0), uniform(&mut rng, &[d, k], -2.0, 2.0)],
        f: Box::new(move |tape, v| contract(tape, v[0].matmul(v[1]).unwrap(), &w)),
    });
    cases.push(Case {
        name: "sum",
        inputs: vec![uniform(&mut rng, &sh, -2.0, 2.0)],
        f: Box::new(|_, v| v[0].square().unwrap().sum().unwrap()),
    });
    let w = uniform(&mut rng, &[n, 1], -1.0, 1.0);
    cases.push(Case {
        name: "sum-rows",
        inputs: vec![uniform(&mut rng, &sh, -2.0, 2.0)],
        f: Box::new(move |tape, v| contract(tape, v[0].sum_rows().unwrap(), &w)),
    });
    cases.push(Case {
        name: "mean",
        inputs: vec![uniform(&mut rng, &sh, -2.0, 2.0)],
        f: Box::new(|_, v| v[0].sin().unwrap().mean().unwrap()),
    });
    let x = uniform(&mut rng, &sh, -2.0, 2.0);
    cases.push(unary("tanh", &mut rng, x, |v| v.tanh()));
    let x = uniform(&mut rng, &sh, -3.0, 3.0);
    cases.push(unary("silu", &mut rng, x, |v| v.silu()));
    let x = uniform(&mut rng, &sh, -3.0, 3.0);
    cases.push(unary("sin", &mut rng, x, |v| v.sin()));
    let x = uniform(&mut rng, &sh, -3.0, 3.0);
    cases.push(unary("cos", &mut rng, x, |v| v.cos()));
    let x = signed_away(&mut rng, &sh);
    cases.push(unary("abs", &mut rng, x, |v| v.abs()));
    let x = uniform(&mut rng, &sh, -2.0, 2.0);
    cases.push(unary("square", &mut rng, x, |v| v.square()));
    let x = uniform(&mut rng, &sh, 0.3, 3.0);
    cases.push(unary("sqrt", &mut rng, x, |v| v.sqrt()));
    for axis in [0, 1] {
        let other = if axis == 0 { [k, d] } else { [n, k] };
        let out = if axis == 0 { [n + k, d] } else { [n, d + k] };
        let w = uniform(&mut rng, &out, -1.0, 1.0);
        cases.push(Case {
            name: "concat",
            inputs: vec![uniform(&mut rng, &sh, -2.0, 2.0), uniform(&mut rng, &other, -2.0, 2.0)],
            f: Box::new(move |tape, v| contract(tape, Var::concat(&[v[0], v[1]], axis).unwrap(), &w)),
        });
    }
    for axis in [0, 1] {
        let len = sh[axis];
        let start = rng.random_range(0..len);
        let end = rng.random_range(start + 1..=len);
        let mut out = sh;
        out[axis] = end - start;
        let w = uniform(&mut rng, &out, -1.0, 1.0);
        cases.push(Case {
            name: "slice",
            inputs: vec![uniform(&mut rng, &sh, -2.0, 2.0)],
            f: Box::new(move |tape, v| contract(tape, v[0].slice(axis, start, end).unwrap(), &w)),
        });
    }
    let w = uniform(&mut rng, &sh, -1.0, 1.0);
    cases.push(Case {
        name: "broadcast",
        inputs: vec![uniform(&mut rng, &[1, d], -2.0, 2.0)],
        f: Box::new(move |tape, v| contract(tape, v[0].broadcast(n).unwrap(), &w)),
    });
    let w = uniform(&mut rng, &[n, 1], -1.0, 1.0);
    cases.push(Case {
        name: "l2-norm-squared",
        inputs: vec![uniform(&mut rng, &sh, -2.0, 2.0)],
        f: Box::new(move |tape, v| contract(tape, v[0].l2_norm_squared().unwrap(), &w)),
    });
    cases
}

pub const OP_NAMES: [&str; 19] = [
    "add", "sub", "mul", "scalar-mul", "matmul", "sum", "sum-rows", "mean", "tanh", "silu", "sin", "cos", "abs",
    "square", "sqrt", "concat", "slice", "broadcast", "l2-norm-squared",
];

fn small_model(rng: &mut ChaCha8Rng) -> VelocityModel {
    let arch = Architecture {
        frequencies: vec![std::f64::consts::PI, 2.0 * std::f64::consts::PI],
        ..Architecture::small(8, 2)
    };
    VelocityModel::new(arch, rng).unwrap()
}

/// Max rel. error of d/d(params, x, tau) of a weighted sum of velocities.
pub fn check_mlp(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = small_model(&mut rng);
    let n = rng.random_range(1..4);
    let x = uniform(&mut rng, &[n, 2], -2.0, 2.0);
    let tau = uniform(&mut rng, &[n, 1], 0.0, 1.0);
    let w = uniform(&mut rng, &[n, 2], -1.0, 1.0);
    let flat = model.flat_weights();
    let arch = model.architecture().clone();

    let value = |weights: &[f64], x: &Tensor, tau: &Tensor| -> f64 {
        let m = VelocityModel::from_flat(arch.clone(), weights).unwrap();
        let tape = Tape::new();
        let b = m.bind(&tape, false);
        let v = b.forward(tape.constant(tau.clone()), tape.constant(x.clone())).unwrap();
        contract(&tape, v, &w).value().item()
    };

    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let xv = tape.leaf(x.clone());
    let tv = tape.leaf(tau.clone());
    let out = contract(&tape, bound.forward(tv, xv).unwrap(), &w);
    let grads = tape.backward(out).unwrap();
    let mut analytic_w = Vec::new();
    for (wv, bv) in bound.params() {
        analytic_w.extend_from_slice(grads.wrt(*wv).data());
        analytic_w.extend_from_slice(grads.wrt(*bv).data());
    }

    let numeric = |len: usize, perturb: &dyn Fn(usize, f64) -> f64| -> Vec<f64> {
        (0..len)
            .map(|i| {
                let h = 1e-6;
                (perturb(i, h) - perturb(i, -h)) / (2.0 * h)
            })
            .collect()
    };
    let nw = numeric(flat.len(), &|i, h| {
        let mut p = flat.clone();
        p[i] += h;
        value(&p, &x, &tau)
    });
    let nx = numeric(x.data().len(), &|i, h| {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        value(&flat, &p, &tau)
    });
    let nt = numeric(tau.data().len(), &|i, h| {
        let mut p = tau.clone();
        p.data_mut()[i] += h;
        value(&flat, &x, &p)
    });
    rel_err(&analytic_w, &nw)
        .max(rel_err(grads.wrt(xv).data(), &nx))
        .max(rel_err(grads.wrt(tv).data(), &nt))
}

/// Gradient of the CFM loss with respect to the weights; the bridge noise is
/// replayed from a fixed seed on every evaluation.
pub fn check_cfm_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = small_model(&mut rng);
    let n = rng.random_range(2..6);
    let x0 = uniform(&mut rng, &[n, 2], -2.0, 2.0);
    let x1 = uniform(&mut rng, &[n, 2], -1.0, 1.0);
    let tau = uniform(&mut rng, &[n, 1], 0.0, 1.0);
    let noise_seed = rng.random::<u64>();
    let flat = model.flat_weights();
    let arch = model.architecture().clone();

    let value = |weights: &[f64]| -> f64 {
        let m = VelocityModel::from_flat(arch.clone(), weights).unwrap();
        let tape = Tape::new();
        let b = m.bind(&tape, false);
        let mut r = ChaCha8Rng::seed_from_u64(noise_seed);
        cfm_loss(&b, &x0, &x1, &tau, 0.1, &mut r).unwrap().value().item()
    };
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let mut r = ChaCha8Rng::seed_from_u64(noise_seed);
    let loss = cfm_loss(&bound, &x0, &x1, &tau, 0.1, &mut r).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for (wv, bv) in bound.params() {
        analytic.extend_from_slice(grads.wrt(*wv).data());
        analytic.extend_from_slice(grads.wrt(*bv).data());
    }
    let numeric: Vec<f64> = (0..flat.len())
        .map(|i| {
            let h = 1e-6;
            let mut p = flat.clone();
            p[i] += h;
            let a = value(&p);
            p[i] -= 2.0 * h;
            (a - value(&p)) / (2.0 * h)
        })
        .collect();
    rel_err(&analytic, &numeric)
}

/// Source energy through midpoint/6 transport with the prior term, under F1
/// on even seeds and F2 on odd ones.
pub fn check_source_energy(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = small_model(&mut rng);
    let n = rng.random_range(1..4);
    let x0 = uniform(&mut rng, &[n, 2], -2.0, 2.0);
    let y: f64 = rng.random_range(0.5..3.0);
    let meas = if seed % 2 == 0 {
        MeasurementModel::f1(y)
    } else {
        MeasurementModel::f2(y)
    };
    let integrator = IntegratorConfig::midpoint(6);
    let lambda = rng.random_range(0.0..0.5);
    let case = Case {
        name: "source-energy",
        inputs: vec![x0],
        f: Box::new(move |_, v| {
            source_energy(&model, &meas, v[0], &EnergyTerms::prior(lambda), &integrator)
                .unwrap()
                .total
                .sum()
                .unwrap()
        }),
    };
    check(&case)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Minimum assignment cost by enumerating every permutation.
pub fn brute_force(n: usize, cost: &[f64]) -> f64 {
    permutations(n)
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

pub fn random_field(rng: &mut ChaCha8Rng) -> Field2D {
    let nt = rng.random_range(5..12);
    let nx = rng.random_range(5..20);
    let data = (0..nt * nx).map(|_| rng.random_range(-2.0..2.0)).collect();
    let dt = rng.random_range(0.01..0.5);
    let dx = rng.random_range(0.1..1.0);
    Field2D::new(Tensor::matrix(nt, nx, data).unwrap(), dt, dx).unwrap()
}

/// Textbook stencils evaluated pointwise.
pub fn ks_oracle(f: &Field2D) -> Vec<f64> {
    let u = f.values();
    let (nt, nx) = (u.rows(), u.cols());
    let (dt, dx) = (f.row_spacing, f.col_spacing);
    let at = |n: usize, j: i64| u.get(n, j.rem_euclid(nx as i64) as usize);
    let mut out = Vec::new();
    for n in 1..nt - 1 {
        for j in 0..nx as i64 {
            let ut = (at(n + 1, j) - at(n - 1, j)) / (2.0 * dt);
            let ux = (at(n, j + 1) - at(n, j - 1)) / (2.0 * dx);
            let uxx = (at(n, j + 1) - 2.0 * at(n, j) + at(n, j - 1)) / dx.powi(2);
            let uxxxx = (at(n, j + 2) - 4.0 * at(n, j + 1) + 6.0 * at(n, j) - 4.0 * at(n, j - 1) + at(n, j - 2))
                / dx.powi(4);
            out.push(ut + at(n, j) * ux + uxx + uxxxx);
        }
    }
    out
}

