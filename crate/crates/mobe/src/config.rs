//! Experiment configuration: one human-readable TOML file with nested
//! sections, strict about unknown keys, with defaults for every field.
//!
//! Resolution order: file values, then `MOBE_SEED` from the environment, then
//! explicit CLI overrides. The fully resolved config is echoed into every
//! artifact together with its hash.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::{Dataset, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Retrieval,
    Reconstruction,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Task::Classification => "classification",
            Task::Retrieval => "retrieval",
            Task::Reconstruction => "reconstruction",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "retrieval" => Ok(Task::Retrieval),
            "reconstruction" => Ok(Task::Reconstruction),
            other => Err(Error::config(format!(
                "unknown task '{other}' (expected classification|retrieval|reconstruction)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScheduleKind {
    Constant,
    LinearDecay,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: usize,
    pub n_blocks: usize,
    pub rank: usize,
    pub adapter_scale: f64,
    pub adapters_in_heads: bool,
    pub dropout: f64,
    pub router_hidden: usize,
    /// 0 selects `hidden * 8 / 3`.
    pub retrieval_mid: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: 256,
            n_blocks: 4,
            rank: 16,
            adapter_scale: 1.0,
            adapters_in_heads: true,
            dropout: 0.0,
            router_hidden: 256,
            retrieval_mid: 0,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, data: &Dataset) -> ModelConfig {
        ModelConfig {
            d_in: data.d_roi,
            hidden: self.hidden,
            n_blocks: self.n_blocks,
            n_subjects: data.n_subjects(),
            n_classes: data.config.n_classes,
            embed_dim: data.config.embed_dim,
            rank: self.rank,
            adapter_scale: self.adapter_scale,
            adapters_in_heads: self.adapters_in_heads,
            dropout: self.dropout,
            router_hidden: self.router_hidden,
            retrieval_mid: self.retrieval_mid,
        }
    }
}

/// Training schedule. The full-scale reference runs use 1000 (classification)
/// or 300 (retrieval) commonality epochs, a 10-epoch router phase, and 10
/// meta steps of 20 support plus 5 query epochs; the desk-scale defaults keep
/// the phase structure with a shorter commonality phase so the default
/// pipeline finishes in minutes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub task: Task,
    /// Relation-alignment weight; unset selects the per-task default
    /// (0.1 classification, 0.05 retrieval and reconstruction).
    pub alpha: Option<f64>,
    pub phase1_epochs: usize,
    pub router_epochs: usize,
    pub meta_steps: usize,
    pub support_epochs: usize,
    pub query_epochs: usize,
    /// Base learning rate; unset selects the per-task default
    /// (1e-4 classification/reconstruction, 3e-4 retrieval).
    pub lr: Option<f64>,
    /// Unset selects the per-task default: linear decay for classification,
    /// constant for retrieval and reconstruction.
    pub lr_schedule: Option<LrScheduleKind>,
    /// Linear decay ends at `final_lr_frac * lr`.
    pub final_lr_frac: f64,
    pub router_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Contrastive temperature; 1 matches the un-tempered dot products.
    pub tau: f64,
    /// Adapter mixture plus meta-learning on/off.
    pub mobe: bool,
    /// Relation-alignment loss on/off.
    pub sra: bool,
    pub seed: u64,
    pub few_shot_subject: Option<usize>,
    pub few_shot_ratio: Option<f64>,
    /// Train (and mean-evaluate) on a single subject's data: the
    /// single-subject vanilla baseline. Requires mobe and sra off.
    pub restrict_to_subject: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            task: Task::Classification,
            alpha: None,
            phase1_epochs: 20,
            router_epochs: 10,
            meta_steps: 10,
            support_epochs: 20,
            query_epochs: 5,
            lr: None,
            lr_schedule: None,
            final_lr_frac: 0.01,
            router_lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 128,
            tau: 1.0,
            mobe: true,
            sra: true,
            seed: 0,
            few_shot_subject: None,
            few_shot_ratio: None,
            restrict_to_subject: None,
        }
    }
}

impl TrainSection {
    pub fn alpha_resolved(&self) -> f64 {
        self.alpha.unwrap_or(match self.task {
            Task::Classification => 0.1,
            Task::Retrieval | Task::Reconstruction => 0.05,
        })
    }

    pub fn lr_resolved(&self) -> f64 {
        self.lr.unwrap_or(match self.task {
            Task::Classification | Task::Reconstruction => 1e-4,
            Task::Retrieval => 3e-4,
        })
    }

    pub fn schedule_resolved(&self) -> LrScheduleKind {
        self.lr_schedule.unwrap_or(match self.task {
            Task::Classification => LrScheduleKind::LinearDecay,
            Task::Retrieval | Task::Reconstruction => LrScheduleKind::Constant,
        })
    }

    /// Learning rate at step `t` of a phase with `total` steps:
    /// `lr * (1 - (1 - final_frac) * t / (total - 1))` under linear decay,
    /// constant otherwise.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let lr = self.lr_resolved();
        match self.schedule_resolved() {
            LrScheduleKind::Constant => lr,
            LrScheduleKind::LinearDecay => {
                if total <= 1 {
                    lr
                } else {
                    let frac = step as f64 / (total - 1) as f64;
                    lr * (1.0 - (1.0 - self.final_lr_frac) * frac)
                }
            }
        }
    }

    /// Learning rate for the meta phase: the end of the phase-1 schedule, so
    /// training continues where commonality learning left off.
    pub fn meta_backbone_lr(&self) -> f64 {
        match self.schedule_resolved() {
            LrScheduleKind::Constant => self.lr_resolved(),
            LrScheduleKind::LinearDecay => self.lr_resolved() * self.final_lr_frac,
        }
    }

    /// Fresh adapters train at the base learning rate.
    pub fn meta_adapter_lr(&self) -> f64 {
        self.lr_resolved()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.alpha {
            if a < 0.0 {
                return Err(Error::config("alpha must be non-negative"));
            }
        }
        if self.batch_size < 2 && self.sra {
            return Err(Error::config(
                "batch_size must be at least 2 when sra is enabled",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if let Some(lr) = self.lr {
            if lr <= 0.0 {
                return Err(Error::config("lr must be positive"));
            }
        }
        if self.router_lr <= 0.0 {
            return Err(Error::config("router_lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_frac) {
            return Err(Error::config("final_lr_frac must be in [0, 1]"));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("tau must be positive"));
        }
        if let Some(r) = self.few_shot_ratio {
            if !(0.0 < r && r <= 1.0) {
                return Err(Error::config("few_shot_ratio must be in (0, 1]"));
            }
        }
        if self.few_shot_subject.is_some() != self.few_shot_ratio.is_some() {
            return Err(Error::config(
                "few_shot_subject and few_shot_ratio must be set together",
            ));
        }
        if self.restrict_to_subject.is_some() && (self.mobe || self.sra) {
            return Err(Error::config(
                "restrict_to_subject is the single-subject vanilla baseline; set mobe=false and sra=false",
            ));
        }
        Ok(())
    }

    /// Short label of the toggle combination, used in reports and CSVs.
    pub fn combo_label(&self) -> &'static str {
        if self.restrict_to_subject.is_some() {
            return "vanilla-single";
        }
        match (self.mobe, self.sra) {
            (true, true) => "full",
            (true, false) => "mobe-only",
            (false, true) => "sra-only",
            (false, false) => "vanilla-multi",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Retrieval pool size; 0 selects `min(300, test set size)`.
    pub pool_size: usize,
    pub repeats: usize,
    /// Evaluation forward-pass batch.
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            pool_size: 0,
            repeats: 30,
            batch_size: 256,
        }
    }
}

impl EvalSection {
    pub fn pool_resolved(&self, test_size: usize) -> usize {
        if self.pool_size == 0 {
            300.min(test_size)
        } else {
            self.pool_size
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
    /// Extra rank values beyond the 2x2 toggle grid.
    pub rank_grid: Vec<usize>,
    /// Include the aligned-vs-misaligned comparison.
    pub misalign: bool,
    pub misalign_keep_frac: f64,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            seeds: vec![0, 1, 2],
            rank_grid: vec![],
            misalign: false,
            misalign_keep_frac: 0.75,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: SynthConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| Error::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingInput(format!(
                "config file {} does not exist",
                path.display()
            )));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if let Some(s) = self.train.few_shot_subject {
            if s >= self.data.n_subjects {
                return Err(Error::config(format!(
                    "few_shot_subject {s} out of range for {} subjects",
                    self.data.n_subjects
                )));
            }
        }
        Ok(())
    }

    /// Apply the `MOBE_SEED` environment override, when present.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("MOBE_SEED") {
            let seed: u64 = v
                .parse()
                .map_err(|_| Error::config(format!("MOBE_SEED='{v}' is not a u64")))?;
            self.train.seed = seed;
        }
        Ok(())
    }

    pub fn to_toml_pretty(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Hash of the fully resolved configuration, embedded in every artifact.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
