//! Command-line front end: a declarative experiment config plus dotted
//! overrides drives corpus generation, training, evaluation, perturbation
//! probes, the labeled-fraction sweep and gradient checking.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::Parser;

pub use commands::{run_command, Command};
pub use config::{parse_config, ExperimentConfig};
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "sgvqa", version, about = "Siamese scene-graph VQA experiments")]
pub struct Cli {
    /// JSON experiment config; missing fields take the desk defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. train.loss.variant=global. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Output root.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for both the corpus and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Replace outputs of a different config.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    /// Flags become overrides ahead of `--set`, so explicit overrides win.
    pub fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Some(out) = &self.out {
            o.push(format!("out={}", serde_json::Value::String(out.to_string_lossy().into_owned())));
        }
        if let Some(seed) = self.seed {
            o.push(format!("corpus.seed={seed}"));
            o.push(format!("train.seed={seed}"));
        }
        o.extend(self.set.iter().cloned());
        o
    }

    pub fn run(&self, log: &mut dyn FnMut(&str)) -> Result<String> {
        let cfg = parse_config(self.config.as_deref(), &self.overrides())?;
        run_command(self.command, &cfg, self.force, log)
    }
}
