use std::path::{Path, PathBuf};

use flowcond::checkpoint::{Checkpoint, TrainingMetadata};
use flowcond::data::{sample_dataset, MeasurementModel};
use flowcond::eval::{measurement_mae, reference_posterior, w1_distance, w1_distance_subsampled};
use flowcond::guidance::{guided_sample, GuidanceConfig, GuidanceVariant};
use flowcond::model::VelocityModel;
use flowcond::source::{dflow_map, dflow_sgld};
use flowcond::train::{sample_prior, train_prior};
use flowcond::Tensor;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::{AblateArgs, ConditionArgs, EvaluateArgs, GenDataArgs, ObservationArgs, SampleArgs, TrainArgs};
use crate::config::{ExperimentConfig, Method};
use crate::error::CliError;
use crate::io::{ensure_dir, read_points, write_points, write_table, write_text, OutputGuard};
use crate::svg::{scatter, Layer};

pub const ABLATION_STRENGTHS: [f64; 3] = [1.0, 3.0, 10.0];

/// Explicit flag, else `paths.output_dir/<default_name>`.
fn output_path(cfg: &ExperimentConfig, flag: Option<PathBuf>, default_name: &str, what: &str) -> Result<PathBuf, CliError> {
    let p = match flag {
        Some(p) => p,
        None => match &cfg.paths.output_dir {
            Some(dir) => dir.join(default_name),
            None => return Err(CliError::Usage(format!("{what}: pass --out or set paths.output_dir"))),
        },
    };
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    Ok(p)
}

fn input_path(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| CliError::Usage(format!("no {what} given and none configured under [paths]")))
}

fn load_model(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> Result<VelocityModel, CliError> {
    let path = input_path(flag, &cfg.paths.checkpoint, "checkpoint")?;
    if !path.exists() {
        return Err(CliError::MissingInput(path));
    }
    let (model, meta) = Checkpoint::load_model(&path, &cfg.train.architecture)?;
    info!("loaded {} (dataset {}, {} steps)", path.display(), meta.dataset, meta.steps);
    Ok(model)
}

fn apply_observation(cfg: &mut ExperimentConfig, obs: &ObservationArgs) {
    if let Some(op) = obs.operator {
        cfg.condition.operator = op;
    }
    if let Some(y) = obs.y {
        cfg.condition.y = y;
    }
}

fn rng(cfg: &ExperimentConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed)
}

pub fn gen_data(mut cfg: ExperimentConfig, args: GenDataArgs) -> Result<(), CliError> {
    if let Some(kind) = args.kind {
        cfg.data.kind = kind;
    }
    let n = args.n.unwrap_or(cfg.data.n);
    let out = output_path(&cfg, args.out.or_else(|| cfg.paths.data.clone()), "data.csv", "gen-data")?;
    let mut guard = OutputGuard::new();
    let data = sample_dataset(&cfg.dataset_spec(), n)?;
    write_points(guard.track(&out), &data)?;
    info!("wrote {n} {} points to {}", cfg.data.kind.tag(), out.display());
    guard.commit();
    Ok(())
}

pub fn train(mut cfg: ExperimentConfig, args: TrainArgs) -> Result<(), CliError> {
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    let data_path = input_path(args.data, &cfg.paths.data, "dataset")?;
    let data = read_points(&data_path)?;
    let ckpt_path = match args.out {
        Some(p) => p,
        None => match &cfg.paths.checkpoint {
            Some(p) => p.clone(),
            None => output_path(&cfg, None, "model.fcv", "train")?,
        },
    };
    if let Some(parent) = ckpt_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let loss_path = args.loss_out.unwrap_or_else(|| ckpt_path.with_extension("loss.csv"));
    let mut guard = OutputGuard::new();
    let outcome = train_prior(&data, &cfg.train)?;
    let meta = TrainingMetadata {
        dataset: cfg.data.kind.tag().to_string(),
        steps: cfg.train.steps,
        epochs: outcome.epochs,
        final_loss: outcome.loss_history.last().copied().unwrap_or(f64::NAN),
    };
    Checkpoint::from_model(&outcome.model, meta).save(guard.track(&ckpt_path))?;
    let rows = outcome
        .loss_history
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), l.to_string()]);
    write_table(guard.track(&loss_path), &["step", "loss"], rows)?;
    info!("wrote {} and {}", ckpt_path.display(), loss_path.display());
    guard.commit();
    Ok(())
}

pub fn sample(cfg: ExperimentConfig, args: SampleArgs) -> Result<(), CliError> {
    let model = load_model(&cfg, args.checkpoint)?;
    let n = args.n.unwrap_or(cfg.sample.n);
    let out = output_path(&cfg, args.out, "samples.csv", "sample")?;
    let mut guard = OutputGuard::new();
    let x = sample_prior(&model, n, &cfg.sample.integrator, &mut rng(&cfg))?;
    write_points(guard.track(&out), &x)?;
    guard.commit();
    Ok(())
}

/// Conditional samples plus, for source-space methods, the matching sources.
pub fn run_method(
    cfg: &ExperimentConfig,
    model: &VelocityModel,
    measurement: &MeasurementModel,
    method: Method,
    n: usize,
) -> Result<(Tensor, Option<Tensor>), CliError> {
    let c = &cfg.condition;
    match method {
        Method::Grad | Method::GradFree => {
            let g = GuidanceConfig {
                variant: if method == Method::Grad {
                    GuidanceVariant::Grad
                } else {
                    GuidanceVariant::GradFree
                },
                ..c.guidance.clone()
            };
            Ok((guided_sample(model, measurement, &g, n, &mut rng(cfg))?, None))
        }
        Method::Dflow => {
            let out = dflow_map(model, measurement, &c.dflow, n, (None, None))?;
            Ok((out.samples, Some(out.sources)))
        }
        Method::DflowSgld => {
            let out = dflow_sgld(model, measurement, &c.sgld, (None, None))?;
            if !out.dropped.is_empty() {
                log::warn!("{} SGLD chains diverged and were dropped", out.dropped.len());
            }
            Ok((out.samples, Some(out.sources)))
        }
    }
}

pub fn condition(mut cfg: ExperimentConfig, args: ConditionArgs) -> Result<(), CliError> {
    apply_observation(&mut cfg, &args.observation);
    if let Some(m) = args.method {
        cfg.condition.method = m;
    }
    if let Some(b) = args.b {
        cfg.condition.guidance.strength = b;
    }
    let method = cfg.condition.method;
    let model = load_model(&cfg, args.checkpoint)?;
    let measurement = cfg.condition.measurement()?;
    let n = args.n.unwrap_or(cfg.condition.n);
    let out = output_path(&cfg, args.out, &format!("conditional-{}.csv", method.tag()), "condition")?;
    let sources_out = match (&args.sources_out, method) {
        (Some(p), _) => Some(p.clone()),
        (None, Method::Dflow | Method::DflowSgld) => Some(out.with_extension("sources.csv")),
        _ => None,
    };
    let mut guard = OutputGuard::new();
    let (samples, sources) = run_method(&cfg, &model, &measurement, method, n)?;
    write_points(guard.track(&out), &samples)?;
    match (sources_out, sources) {
        (Some(p), Some(s)) => write_points(guard.track(&p), &s)?,
        (Some(_), None) => log::warn!("--sources-out ignored: {} has no source draws", method.tag()),
        _ => {}
    }
    info!("wrote {} {} samples to {}", samples.rows(), method.tag(), out.display());
    guard.commit();
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Metrics<'a> {
    pub w1: f64,
    pub mae: f64,
    pub n: usize,
    pub config: &'a ExperimentConfig,
}

fn build_reference(cfg: &ExperimentConfig, measurement: &MeasurementModel) -> Result<Tensor, CliError> {
    Ok(reference_posterior(&cfg.dataset_spec(), measurement, &cfg.evaluate.reference, &mut rng(cfg))?)
}

fn w1(cfg: &ExperimentConfig, a: &Tensor, b: &Tensor) -> Result<f64, CliError> {
    Ok(if a.rows() == b.rows() {
        w1_distance(a, b)?
    } else {
        w1_distance_subsampled(a, b, cfg.seed)?
    })
}

pub fn evaluate(mut cfg: ExperimentConfig, args: EvaluateArgs) -> Result<(), CliError> {
    apply_observation(&mut cfg, &args.observation);
    let measurement = cfg.condition.measurement()?;
    let samples = read_points(&args.samples)?;
    let reference = match &args.reference {
        Some(p) => read_points(p)?,
        None => build_reference(&cfg, &measurement)?,
    };
    let out = output_path(&cfg, args.out, "metrics.json", "evaluate")?;
    let mut guard = OutputGuard::new();
    let metrics = Metrics {
        w1: w1(&cfg, &samples, &reference)?,
        mae: measurement_mae(&samples, &measurement)?,
        n: samples.rows(),
        config: &cfg,
    };
    let mut json = serde_json::to_string_pretty(&metrics)?;
    json.push('\n');
    write_text(guard.track(&out), &json)?;
    info!("w1 {:.4} mae {:.4}", metrics.w1, metrics.mae);
    guard.commit();
    Ok(())
}

pub fn ablate(mut cfg: ExperimentConfig, args: AblateArgs) -> Result<(), CliError> {
    apply_observation(&mut cfg, &args.observation);
    let model = load_model(&cfg, args.checkpoint)?;
    let measurement = cfg.condition.measurement()?;
    let n = args.n.unwrap_or(cfg.condition.n);
    let dir = match args.out_dir.or_else(|| cfg.paths.output_dir.clone()) {
        Some(d) => d,
        None => return Err(CliError::Usage("ablate: pass --out-dir or set paths.output_dir".into())),
    };
    ensure_dir(&dir)?;
    let reference = build_reference(&cfg, &measurement)?;
    let prior = sample_prior(&model, n, &cfg.condition.guidance.integrator, &mut rng(&cfg))?;

    let mut guard = OutputGuard::new();
    let mut rows = Vec::new();
    for method in [Method::Grad, Method::GradFree] {
        for b in ABLATION_STRENGTHS {
            cfg.condition.guidance.strength = b;
            let (samples, _) = run_method(&cfg, &model, &measurement, method, n)?;
            let w = w1(&cfg, &samples, &reference)?;
            let mae = measurement_mae(&samples, &measurement)?;
            info!("{} b={b}: w1 {w:.4} mae {mae:.4}", method.tag());
            let svg = scatter(
                &format!("{} b={b}  W1={w:.3}  MAE={mae:.3}", method.tag()),
                &[
                    Layer { points: &prior, color: "#9a9a9a", radius: 1.2, opacity: 0.35 },
                    Layer { points: &samples, color: "#f28e2b", radius: 1.6, opacity: 0.75 },
                ],
            );
            write_text(guard.track(&svg_path(&dir, method, b)), &svg)?;
            rows.push(vec![method.tag().to_string(), b.to_string(), w.to_string(), mae.to_string()]);
        }
    }
    write_table(guard.track(&dir.join("ablate.csv")), &["method", "b", "w1", "mae"], rows)?;
    guard.commit();
    Ok(())
}

pub fn svg_path(dir: &Path, method: Method, b: f64) -> PathBuf {
    dir.join(format!("ablate-{}-b{b}.svg", method.tag()))
}
