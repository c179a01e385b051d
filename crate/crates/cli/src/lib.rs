//! Library side of the `flowcond` binary.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod svg;

pub use error::CliError;

use args::{Cli, Command};
use config::ExperimentConfig;

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), cli.seed)?;
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        cfg.condition.sgld.workers = w;
    }
    match cli.command {
        Command::GenData(a) => commands::gen_data(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Sample(a) => commands::sample(cfg, a),
        Command::Condition(a) => commands::condition(cfg, a),
        Command::Evaluate(a) => commands::evaluate(cfg, a),
        Command::Ablate(a) => commands::ablate(cfg, a),
    }
}
