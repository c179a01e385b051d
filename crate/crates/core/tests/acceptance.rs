//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line to the real stdout, so the verdicts show up without `--nocapture`.
//!
//! Trained priors are shared through a process-wide cache: three seeds per
//! dataset, 5000 Adam steps at learning rate 1e-3 on 10 240 points.
//!
//! Observations. Each (dataset, operator) pair uses the 1% quantile of `F`
//! over 2000 held-out points, so every method is asked for a tail value of the
//! measurement. The reference posterior is 1000 draws resampled from a
//! 200 000-point analytic pool.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use common::{
    brute_force, check, check_cfm_loss, check_mlp, check_source_energy, ks_oracle, op_cases, random_field, OP_NAMES,
};
use flowcond::data::{sample_dataset, DatasetKind, DatasetSpec, MeasurementModel, TRAINING_SET_SIZE};
use flowcond::eval::{
    energy_spectrum_1d, ks_residual, measurement_mae, reference_posterior, w1_distance, Axis, Field2D, ReferenceConfig,
};
use flowcond::guidance::{guided_sample, GuidanceConfig, GuidanceVariant};
use flowcond::model::VelocityModel;
use flowcond::ot::solve_assignment_flat;
use flowcond::schedule::Schedule;
use flowcond::source::{
    dflow_map, dflow_sgld, gaussian_starts, invert_to_source, push_forward, sgld_chains, DFlowConfig, EnergyEval,
    MapOptimizer, SgldConfig, SourceTarget,
};
use flowcond::train::{sample_prior, standard_normal, train_prior, TrainConfig};
use flowcond::transport::IntegratorConfig;
use flowcond::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KINDS: [DatasetKind; 2] = [DatasetKind::SCurve, DatasetKind::TwoMoons];
const SEEDS: [u64; 3] = [0, 1, 2];
const N: usize = 1000;

fn verdict(criterion: u32, pass: bool, detail: &str) {
    let line = format!("criterion {criterion}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn quantile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).round() as usize]
}

fn priors() -> &'static HashMap<(DatasetKind, u64), VelocityModel> {
    static CACHE: OnceLock<HashMap<(DatasetKind, u64), VelocityModel>> = OnceLock::new();
    CACHE.get_or_init(|| {
        let mut map = HashMap::new();
        for kind in KINDS {
            for seed in SEEDS {
                let t = Instant::now();
                let data = sample_dataset(&DatasetSpec::new(kind, 100 + seed), TRAINING_SET_SIZE).unwrap();
                let cfg = TrainConfig {
                    learning_rate: 1e-3,
                    seed,
                    log_every: 0,
                    ..TrainConfig::default()
                };
                let model = train_prior(&data, &cfg).unwrap().model;
                eprintln!("trained {} seed {seed} in {:.0}s", kind.tag(), t.elapsed().as_secs_f64());
                map.insert((kind, seed), model);
            }
        }
        map
    })
}

fn prior(kind: DatasetKind, seed: u64) -> &'static VelocityModel {
    &priors()[&(kind, seed)]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Op {
    F1,
    F2,
}

fn measurement(op: Op, y: f64) -> MeasurementModel {
    match op {
        Op::F1 => MeasurementModel::f1(y),
        Op::F2 => MeasurementModel::f2(y),
    }
}

fn observation(kind: DatasetKind, op: Op) -> MeasurementModel {
    let held_out = sample_dataset(&DatasetSpec::new(kind, 999), 2000).unwrap();
    let f = measurement(op, 0.0).measure(&held_out).unwrap().into_vec();
    measurement(op, quantile(f, 0.01))
}

fn reference(kind: DatasetKind, meas: &MeasurementModel) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    reference_posterior(&DatasetSpec::new(kind, 0), meas, &ReferenceConfig::default(), &mut rng).unwrap()
}

fn dflow_config(kind: DatasetKind, seed: u64) -> DFlowConfig {
    DFlowConfig {
        n_optim_steps: if kind == DatasetKind::SCurve { 10 } else { 20 },
        optimizer: MapOptimizer::Lbfgs,
        seed,
        ..DFlowConfig::default()
    }
}

/// Ten chains, 400 post-burn-in steps each, every fourth kept: 1000 draws.
fn sgld_config(kind: DatasetKind, seed: u64) -> SgldConfig {
    SgldConfig {
        lambda: if kind == DatasetKind::SCurve { 0.1 } else { 0.05 },
        thinning: 4,
        seed,
        ..SgldConfig::default()
    }
}

fn guided(kind: DatasetKind, seed: u64, meas: &MeasurementModel, variant: GuidanceVariant, b: f64) -> Tensor {
    let cfg = GuidanceConfig::new(variant, b);
    guided_sample(prior(kind, seed), meas, &cfg, N, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[derive(Debug)]
struct Run {
    grad: f64,
    grad_free: f64,
    dflow: f64,
    sgld: f64,
    sgld_sources: Tensor,
    dflow_sources: Tensor,
}

fn table() -> &'static HashMap<(DatasetKind, Op, u64), Run> {
    static CACHE: OnceLock<HashMap<(DatasetKind, Op, u64), Run>> = OnceLock::new();
    CACHE.get_or_init(|| {
        let mut map = HashMap::new();
        for kind in KINDS {
            for op in [Op::F1, Op::F2] {
                let meas = observation(kind, op);
                let reference = reference(kind, &meas);
                for seed in SEEDS {
                    let t = Instant::now();
                    let w1 = |s: &Tensor| w1_distance(s, &reference).unwrap();
                    let grad = w1(&guided(kind, seed, &meas, GuidanceVariant::Grad, 3.0));
                    let grad_free = w1(&guided(kind, seed, &meas, GuidanceVariant::GradFree, 3.0));
                    let model = prior(kind, seed);
                    let restarts = dflow_map(model, &meas, &dflow_config(kind, seed), N, (None, None)).unwrap();
                    let sgld = dflow_sgld(model, &meas, &sgld_config(kind, seed), (None, None)).unwrap();
                    assert_eq!(sgld.samples.rows(), N, "SGLD dropped chains {:?}", sgld.dropped);
                    let run = Run {
                        grad,
                        grad_free,
                        dflow: w1(&restarts.samples),
                        sgld: w1(&sgld.samples),
                        sgld_sources: sgld.sources,
                        dflow_sources: restarts.sources,
                    };
                    eprintln!(
                        "{} {op:?} seed {seed}: grad {:.3} grad-free {:.3} dflow {:.3} sgld {:.3} ({:.0}s)",
                        kind.tag(),
                        run.grad,
                        run.grad_free,
                        run.dflow,
                        run.sgld,
                        t.elapsed().as_secs_f64()
                    );
                    map.insert((kind, op, seed), run);
                }
            }
        }
        map
    })
}

fn table_median(kind: DatasetKind, op: Op, pick: impl Fn(&Run) -> f64) -> f64 {
    median(SEEDS.iter().map(|s| pick(&table()[&(kind, op, *s)])).collect())
}

#[test]
fn criterion_1_autodiff_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    let mut names = std::collections::BTreeSet::new();
    for seed in 0..20 {
        for case in op_cases(seed) {
            worst = worst.max(check(&case));
            names.insert(case.name);
        }
        worst = worst.max(check_mlp(seed)).max(check_cfm_loss(seed)).max(check_source_energy(seed));
    }
    let all_ops = names.len() == OP_NAMES.len();
    verdict(1, worst <= 1e-4 && all_ops, &format!("worst rel err {worst:.2e} over {} op kinds", names.len()));
}

#[test]
fn criterion_2_assignment_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let n = 1 + i % 7;
        let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..10.0)).collect();
        let plan = solve_assignment_flat(n, &cost).unwrap();
        worst = worst.max((plan.total_cost - brute_force(n, &cost)).abs());
    }
    verdict(2, worst < 1e-9, &format!("max gap to exhaustive search {worst:.1e}"));
}

#[test]
fn criterion_3_prior_matches_the_data_distribution() {
    let mut pass = true;
    let mut detail = Vec::new();
    for kind in KINDS {
        let (mut fit, mut baseline) = (Vec::new(), Vec::new());
        for seed in SEEDS {
            let draw = |s| sample_dataset(&DatasetSpec::new(kind, s), N).unwrap();
            let integrator = IntegratorConfig::euler(300);
            let x = sample_prior(prior(kind, seed), N, &integrator, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            fit.push(w1_distance(&x, &draw(500 + seed)).unwrap());
            baseline.push(w1_distance(&draw(600 + seed), &draw(700 + seed)).unwrap());
        }
        let (f, b) = (median(fit), median(baseline));
        pass &= f <= 3.0 * b;
        detail.push(format!("{} W1 {f:.4} vs 3 x {b:.4}", kind.tag()));
    }
    verdict(3, pass, &detail.join("; "));
}

/// Table 1 D-Flow SGLD numbers as (F1, F2).
fn paper_sgld(kind: DatasetKind) -> (f64, f64) {
    match kind {
        DatasetKind::SCurve => (0.234, 0.171),
        DatasetKind::TwoMoons => (0.073, 0.160),
    }
}

#[test]
fn criterion_4_table_one_ordering_and_magnitudes() {
    let mut ok = [true; 3];
    let mut detail = Vec::new();
    for kind in KINDS {
        let g = |op, f: fn(&Run) -> f64| table_median(kind, op, f);
        let f2 = (g(Op::F2, |r| r.grad), g(Op::F2, |r| r.grad_free), g(Op::F2, |r| r.sgld));
        ok[0] &= f2.2 < f2.0 && f2.2 < f2.1;
        let (p1, p2) = paper_sgld(kind);
        let s1 = g(Op::F1, |r| r.sgld);
        for (ours, paper) in [(s1, p1), (f2.2, p2)] {
            ok[1] &= ours <= 2.0 * paper && ours >= paper / 2.0;
        }
        let f1 = (g(Op::F1, |r| r.grad), g(Op::F1, |r| r.grad_free), g(Op::F1, |r| r.dflow), s1);
        ok[2] &= f1.2.min(f1.3) < f1.0.min(f1.1);
        detail.push(format!(
            "{} F1 grad {:.3} free {:.3} dflow {:.3} sgld {:.3} | F2 grad {:.3} free {:.3} sgld {:.3}",
            kind.tag(),
            f1.0,
            f1.1,
            f1.2,
            f1.3,
            f2.0,
            f2.1,
            f2.2
        ));
    }
    let parts = format!("(a) {} (b) {} (c) {}", ok[0], ok[1], ok[2]);
    verdict(4, ok.iter().all(|b| *b), &format!("{parts}; {}", detail.join("; ")));
}

#[test]
fn criterion_5_guidance_strength_trades_fit_for_fidelity() {
    let kind = DatasetKind::SCurve;
    let meas = observation(kind, Op::F1);
    let reference = reference(kind, &meas);
    let strengths = [1.0, 3.0, 10.0];
    let (mut mae, mut w1) = (Vec::new(), Vec::new());
    for b in strengths {
        let (mut m, mut w) = (Vec::new(), Vec::new());
        for seed in SEEDS {
            let x = guided(kind, seed, &meas, GuidanceVariant::Grad, b);
            m.push(measurement_mae(&x, &meas).unwrap());
            w.push(w1_distance(&x, &reference).unwrap());
        }
        mae.push(median(m));
        w1.push(median(w));
    }
    let mae_ok = mae.windows(2).all(|p| p[1] <= p[0]);
    let w1_ok = w1[2] >= w1[1];
    verdict(
        5,
        mae_ok && w1_ok,
        &format!("MAE {mae:.3?} non-increasing {mae_ok}; W1 {w1:.3?} rises from b=3 to b=10 {w1_ok}"),
    );
}

/// `L(x) = |x|^2 / 2` with no prior term.
struct HalfSquare;

impl SourceTarget for HalfSquare {
    fn dim(&self) -> usize {
        2
    }

    fn evaluate(&self, x0: &Tensor) -> Result<EnergyEval> {
        let total: Vec<f64> = x0.iter_rows().map(|r| 0.5 * r.iter().map(|v| v * v).sum::<f64>()).collect();
        Ok(EnergyEval {
            misfit: total.clone(),
            total,
            grad: x0.clone(),
            grad_misfit: x0.clone(),
        })
    }
}

#[test]
fn criterion_6_langevin_is_stationary_on_a_quadratic() {
    let chains = 5000;
    let cfg = SgldConfig {
        n_parallel: chains,
        n_steps: 400,
        burn: 200,
        thinning: 20,
        step_size: Schedule::Constant(1e-2),
        noise_scale: Schedule::Constant(1.0),
        lambda: 0.0,
        use_preconditioner: false,
        seed: 6,
        ..SgldConfig::default()
    };
    let init = gaussian_starts(6, 0, chains, 2);
    let states = sgld_chains(&HalfSquare, &cfg, &init, None).unwrap();
    let draws: Vec<&Vec<f64>> = states.iter().flat_map(|c| &c.collected).collect();
    let n = draws.len() as f64;
    let var: Vec<f64> = (0..2)
        .map(|j| {
            let mean = draws.iter().map(|x| x[j]).sum::<f64>() / n;
            draws.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .collect();
    let pass = draws.len() == 50_000 && var.iter().all(|v| (0.9..=1.1).contains(v));
    verdict(6, pass, &format!("{} draws, variances {var:.4?}", draws.len()));
}

#[test]
fn criterion_7_transport_is_reversible() {
    let integrator = IntegratorConfig::midpoint(6);
    let mut worst: f64 = 0.0;
    for kind in KINDS {
        for seed in SEEDS {
            let model = prior(kind, seed);
            let x0 = standard_normal(N, 2, &mut ChaCha8Rng::seed_from_u64(70 + seed));
            let back = invert_to_source(model, &push_forward(model, &x0, &integrator).unwrap(), &integrator).unwrap();
            let err = back.zip_map(&x0, |a, b| a - b).unwrap().row_norms();
            worst = worst.max(median(err));
        }
    }
    verdict(7, worst <= 1e-2, &format!("largest median round-trip error {worst:.2e} over 6 priors"));
}

#[test]
fn criterion_8_sgld_sources_stay_in_the_gaussian_bulk() {
    // 95th percentile of |x| under N(0, I) in 2D.
    let gaussian = (-2.0 * 0.05f64.ln()).sqrt();
    let p95 = |t: &Tensor| quantile(t.row_norms(), 0.95);
    let mut pass = true;
    let mut detail = Vec::new();
    for kind in KINDS {
        for op in [Op::F1, Op::F2] {
            let sgld = table_median(kind, op, |r| p95(&r.sgld_sources));
            pass &= sgld <= 1.5 * gaussian;
            let mut line = format!("{} {op:?} sgld {sgld:.3}", kind.tag());
            if op == Op::F2 {
                let map = table_median(kind, op, |r| p95(&r.dflow_sources));
                pass &= map > sgld;
                line.push_str(&format!(" map {map:.3}"));
            }
            detail.push(line);
        }
    }
    verdict(8, pass, &format!("bound {:.3}; {}", 1.5 * gaussian, detail.join("; ")));
}

#[test]
fn criterion_9_metric_oracles() {
    let mut ok = Vec::new();

    let constant = (0..4).all(|k| {
        let c = [0.0, 1.0, -2.5, 1e3][k];
        let f = Field2D::new(Tensor::full(&[7, 9], c), 0.1, 0.2).unwrap();
        let r = ks_residual(&f).unwrap();
        r.mean_abs == 0.0 && r.grid.data().iter().all(|v| *v == 0.0)
    });
    ok.push(("ks constant", constant));

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let stencil = (0..50).all(|_| {
        let f = random_field(&mut rng);
        let want = ks_oracle(&f);
        let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let got = ks_residual(&f).unwrap();
        got.grid.data().iter().zip(&want).all(|(g, w)| (g - w).abs() <= 1e-12 * scale)
    });
    ok.push(("ks oracle", stencil));

    let (nt, nx, mode) = (6, 64, 5);
    let tone: Vec<f64> = (0..nt * nx)
        .map(|i| (2.0 * std::f64::consts::PI * (mode * (i % nx)) as f64 / nx as f64).sin())
        .collect();
    let s = energy_spectrum_1d(&[Field2D::new(Tensor::matrix(nt, nx, tone).unwrap(), 0.1, 0.1).unwrap()], Axis::Cols)
        .unwrap();
    let concentration = s.energy[mode] / s.energy.iter().sum::<f64>();
    ok.push(("pure tone", concentration > 0.999));

    let parseval = (0..20).all(|_| {
        let f = random_field(&mut rng);
        let ms = f.values().data().iter().map(|v| v * v).sum::<f64>() / f.values().len() as f64;
        let total: f64 = energy_spectrum_1d(&[f], Axis::Cols).unwrap().power.iter().sum();
        (total - ms).abs() <= 1e-10 * ms
    });
    ok.push(("parseval", parseval));

    let cloud = |rng: &mut ChaCha8Rng, n| Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let axioms = (0..50).all(|_| {
        let (a, b) = (cloud(&mut rng, 5), cloud(&mut rng, 5));
        let mut cost = Vec::new();
        for p in a.iter_rows() {
            for q in b.iter_rows() {
                cost.push(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt());
            }
        }
        let ab = w1_distance(&a, &b).unwrap();
        w1_distance(&a, &a).unwrap() == 0.0
            && (ab - w1_distance(&b, &a).unwrap()).abs() < 1e-12
            && (ab - brute_force(5, &cost) / 5.0).abs() < 1e-12
    });
    ok.push(("w1 axioms", axioms));

    let pass = ok.iter().all(|(_, b)| *b);
    let detail: Vec<String> = ok.iter().map(|(n, b)| format!("{n} {b}")).collect();
    verdict(9, pass, &format!("{}; tone concentration {concentration:.6}", detail.join(", ")));
}
