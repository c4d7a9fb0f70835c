//! `pathwise` command line: runs the pipeline stages over a single TOML
//! configuration, writing artifacts atomically into one output directory.

pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{Overrides, PipelineConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "pathwise", version, about = "Path sampling, retrieval and prompt building over a knowledge graph")]
pub struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory, overriding `out` in the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Stage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Stage {
    /// Enumerate and cluster topic-to-answer paths, keep the closest cluster.
    Sample,
    /// Beam search over relations for every question.
    Retrieve,
    /// Train the answer-type predictor.
    TypeTrain,
    /// Build weighted relation preference pairs from the sampled set.
    BuildPrefs,
    /// Group retrieved paths by answer and render training prompts.
    BuildPrompts,
    /// Score predictions and retrieval, write the report.
    Eval,
}

impl Stage {
    pub fn run(self, cfg: &PipelineConfig) -> Result<Vec<PathBuf>, CliError> {
        match self {
            Stage::Sample => pipeline::sample(cfg),
            Stage::Retrieve => pipeline::retrieve(cfg),
            Stage::TypeTrain => pipeline::type_train(cfg),
            Stage::BuildPrefs => pipeline::build_prefs(cfg),
            Stage::BuildPrompts => pipeline::build_prompts(cfg),
            Stage::Eval => pipeline::eval(cfg),
        }
    }
}

pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let overrides = Overrides { seed: cli.seed, workers: cli.workers, out: cli.out.clone() };
    let cfg = PipelineConfig::load(path, &overrides)?;
    cli.command.run(&cfg)
}
