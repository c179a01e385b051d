//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use flowcond::data::{DatasetKind, DatasetSpec, MeasurementModel, Operator, DEFAULT_NOISE_SIGMA, TRAINING_SET_SIZE};
use flowcond::eval::ReferenceConfig;
use flowcond::guidance::GuidanceConfig;
use flowcond::source::{DFlowConfig, SgldConfig};
use flowcond::train::TrainConfig;
use flowcond::transport::IntegratorConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "FLOWCOND_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; section-level seeds are overwritten by it.
    pub seed: u64,
    pub data: DataSection,
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub condition: ConditionSection,
    pub evaluate: EvaluateSection,
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DatasetKind,
    pub noise_sigma: f64,
    pub n: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SCurve,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            n: TRAINING_SET_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub n: usize,
    pub integrator: IntegratorConfig,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            n: 1000,
            integrator: IntegratorConfig::euler(300),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Grad,
    GradFree,
    Dflow,
    DflowSgld,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Grad => "grad",
            Method::GradFree => "grad-free",
            Method::Dflow => "dflow",
            Method::DflowSgld => "dflow-sgld",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    F1,
    F2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionSection {
    pub method: Method,
    pub operator: OperatorKind,
    pub y: f64,
    /// Overrides the operator's default noise level.
    pub noise_sigma: Option<f64>,
    pub n: usize,
    pub guidance: GuidanceConfig,
    pub dflow: DFlowConfig,
    pub sgld: SgldConfig,
}

impl Default for ConditionSection {
    fn default() -> Self {
        Self {
            method: Method::DflowSgld,
            operator: OperatorKind::F1,
            y: 1.0,
            noise_sigma: None,
            n: 1000,
            guidance: GuidanceConfig::default(),
            dflow: DFlowConfig::default(),
            sgld: SgldConfig {
                thinning: 4,
                ..SgldConfig::default()
            },
        }
    }
}

impl ConditionSection {
    pub fn measurement(&self) -> Result<MeasurementModel, CliError> {
        let base = match self.operator {
            OperatorKind::F1 => MeasurementModel::f1(self.y),
            OperatorKind::F2 => MeasurementModel::f2(self.y),
        };
        let sigma = self.noise_sigma.unwrap_or(base.noise_sigma);
        let op: Operator = base.operator;
        Ok(MeasurementModel::new(op, sigma, vec![self.y])?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub reference: ReferenceConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses TOML, fills dataset-dependent defaults that were not given
    /// explicitly, resolves paths against `base_dir` and applies the seed
    /// override.
    pub fn from_toml(text: &str, base_dir: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let given = |section: &str, key: &str| -> bool {
            raw.get("condition")
                .and_then(|c| c.get(section))
                .and_then(|s| s.get(key))
                .is_some()
        };
        if !given("dflow", "n_optim_steps") {
            cfg.condition.dflow.n_optim_steps = match cfg.data.kind {
                DatasetKind::SCurve => 10,
                DatasetKind::TwoMoons => 20,
            };
        }
        if !given("sgld", "lambda") {
            cfg.condition.sgld.lambda = match cfg.data.kind {
                DatasetKind::SCurve => 0.1,
                DatasetKind::TwoMoons => 0.05,
            };
        }
        for p in [&mut cfg.paths.data, &mut cfg.paths.checkpoint, &mut cfg.paths.output_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        cfg.apply_seed();
        Ok(cfg)
    }

    /// `seed_flag` wins over `FLOWCOND_SEED`, which wins over the file.
    pub fn load(path: Option<&Path>, seed_flag: Option<u64>) -> Result<Self, CliError> {
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV}={s} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        let seed_override = seed_flag.or(env_seed);
        match path {
            Some(p) => {
                if !p.exists() {
                    return Err(CliError::Config(format!("config file {} does not exist", p.display())));
                }
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                Self::from_toml(&text, &base, seed_override)
            }
            None => Self::from_toml("", Path::new("."), seed_override),
        }
    }

    fn apply_seed(&mut self) {
        self.train.seed = self.seed;
        self.condition.dflow.seed = self.seed;
        self.condition.sgld.seed = self.seed;
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            kind: self.data.kind,
            noise_sigma: self.data.noise_sigma,
            seed: self.seed,
        }
    }
}
