//! Experiment pipelines for dreamlab: generate and annotate a preference
//! dataset, train the reward model, distill with and without reward
//! guidance, and compare the results.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use dreamlab::distill::Mode;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "dreamlab", version, about = "Reward-guided score distillation experiments")]
pub struct Cli {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Sds,
    Dreamfl,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sds => Mode::Sds,
            ModeArg::Dreamfl => Mode::DreamFl,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample, annotate and write the preference dataset.
    GenData,
    /// Train the reward model on the generated pairs.
    TrainReward,
    /// Distill assets for every configured prompt and seed.
    Optimize {
        #[arg(long, value_enum)]
        mode: ModeArg,
    },
    /// Judge finished runs and write the comparison report.
    Eval,
    /// Every stage in order.
    All,
}

impl Cli {
    /// The config file (or defaults) with command-line overrides applied,
    /// validated.
    pub fn resolve_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve_config()?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::TrainReward => commands::train_reward(&cfg),
        Command::Optimize { mode } => commands::optimize(&cfg, mode.into()),
        Command::Eval => commands::eval(&cfg),
        Command::All => commands::all(&cfg),
    }
}
