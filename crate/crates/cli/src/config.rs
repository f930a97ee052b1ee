//! Experiment configuration: one JSON document, unknown keys rejected.
//!
//! Every section has defaults, so `{}` is a complete config. The defaults
//! describe the benchmark the acceptance suite runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dreamlab::diffusion::{NoiseSchedule, ScheduleKind};
use dreamlab::distill::{DistillConfig, LrSchedule, Mode, Omega};
use dreamlab::preference::AnnotatorSpec;
use dreamlab::reward::{RewardArch, RewardTrainConfig};
use dreamlab::suite::SuiteConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::LinearAlphaBar,
            steps: 1000,
        }
    }
}

/// Item filtering and the train / held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    /// Items below this utility are dropped before annotation.
    pub min_quality: Option<f64>,
    /// Sets whose utility range is narrower than this are dropped.
    pub min_spread: f64,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            min_quality: None,
            min_spread: 0.0,
            train_pairs: 2000,
            heldout_pairs: 500,
        }
    }
}

/// Reward training hyperparameters; the seed comes from the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub freeze_fraction: f64,
    pub freeze_head: bool,
    pub weight_decay: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 8,
            epochs: 60,
            freeze_fraction: 0.5,
            freeze_head: false,
            weight_decay: 0.0,
        }
    }
}

impl RewardSpec {
    pub fn train_config(&self, seed: u64) -> RewardTrainConfig {
        RewardTrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            freeze_fraction: self.freeze_fraction,
            freeze_head: self.freeze_head,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

fn benchmark_distill() -> DistillConfig {
    DistillConfig {
        omega: Omega::SigmaSquared,
        lr_schedule: LrSchedule::Cosine,
        finetune_learning_rate: Some(1e-3),
        ..DistillConfig::default()
    }
}

/// Per-mode distillation settings. Their `seed` fields are ignored: every
/// run derives its own seed from the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSpec {
    pub sds: DistillConfig,
    pub dreamfl: DistillConfig,
}

impl Default for DistillSpec {
    fn default() -> Self {
        Self {
            sds: benchmark_distill(),
            dreamfl: benchmark_distill(),
        }
    }
}

impl DistillSpec {
    pub fn for_mode(&self, mode: Mode) -> &DistillConfig {
        match mode {
            Mode::Sds => &self.sds,
            Mode::DreamFl => &self.dreamfl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Prompt ids to distill; empty means all of them.
    pub prompts: Vec<u32>,
    /// Distillation runs per prompt and mode.
    pub seeds: usize,
    /// Standard deviation of the shared initial asset.
    pub init_scale: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            prompts: Vec::new(),
            seeds: 10,
            init_scale: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub suite: SuiteConfig,
    pub schedule: ScheduleSpec,
    pub annotators: AnnotatorSpec,
    pub data: DataSpec,
    pub reward_arch: RewardArch,
    pub reward: RewardSpec,
    pub distill: DistillSpec,
    pub eval: EvalSpec,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            suite: SuiteConfig::default(),
            schedule: ScheduleSpec::default(),
            annotators: AnnotatorSpec { count: 15, noise: 0.5 },
            data: DataSpec::default(),
            reward_arch: RewardArch::default(),
            reward: RewardSpec::default(),
            distill: DistillSpec::default(),
            eval: EvalSpec::default(),
            out: PathBuf::from("out"),
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(invalid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.kind, self.schedule.steps).map_err(invalid)
    }

    /// Prompt ids the distillation stages cover.
    pub fn prompts(&self) -> Vec<u32> {
        if self.eval.prompts.is_empty() {
            (0..self.suite.num_prompts as u32).collect()
        } else {
            self.eval.prompts.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.suite.validate().map_err(invalid)?;
        let sched = self.schedule()?;
        if self.annotators.count == 0 || !(self.annotators.noise >= 0.0 && self.annotators.noise.is_finite()) {
            return Err(invalid("annotators need count >= 1 and a finite noise >= 0"));
        }
        if self.data.train_pairs == 0 {
            return Err(invalid("data.train_pairs must be at least 1"));
        }
        if !(self.data.min_spread >= 0.0) || self.data.min_quality.is_some_and(|q| q.is_nan()) {
            return Err(invalid("data filters must be numbers, min_spread >= 0"));
        }
        self.reward.train_config(self.seed).validate().map_err(invalid)?;
        if self.reward.epochs == 0 {
            return Err(invalid("reward.epochs must be at least 1"));
        }
        let arch = &self.reward_arch;
        if arch.feature_dim == 0 || arch.embed_dim == 0 || arch.camera_dim == 0 {
            return Err(invalid("reward_arch dimensions must be positive"));
        }
        for (name, cfg) in [("sds", &self.distill.sds), ("dreamfl", &self.distill.dreamfl)] {
            cfg.validate(&sched).map_err(|e| invalid(format!("distill.{name}: {e}")))?;
        }
        if self.eval.seeds == 0 {
            return Err(invalid("eval.seeds must be at least 1"));
        }
        if !(self.eval.init_scale >= 0.0 && self.eval.init_scale.is_finite()) {
            return Err(invalid("eval.init_scale must be finite and >= 0"));
        }
        if let Some(p) = self.eval.prompts.iter().find(|&&p| p as usize >= self.suite.num_prompts) {
            return Err(invalid(format!(
                "eval.prompts references prompt {p}, but the suite has {}",
                self.suite.num_prompts
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(p) = self.eval.prompts.iter().find(|p| !seen.insert(**p)) {
            return Err(invalid(format!("eval.prompts lists prompt {p} twice")));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization, output directory excluded.
    /// Field order is fixed by the struct, so key order in the source file
    /// does not matter.
    pub fn hash(&self) -> String {
        let canonical = Self {
            out: PathBuf::new(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
