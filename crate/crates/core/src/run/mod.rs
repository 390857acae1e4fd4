//! Run configuration, experiment ledger, and the stage runners behind the
//! CLI. Every artifact lands under runs/<run-id>/ next to the resolved
//! config that produced it; re-running a stage with unchanged inputs is a
//! no-op.

pub mod cli;
pub mod ledger;
pub mod stages;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::CurationError;
use crate::judge::JudgeError;
use crate::metrics::MetricError;
use crate::model::{LmConfig, ModelError};
use crate::retrieval::RetrievalError;
use crate::train::TrainError;
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("{count} records pending judge adjudication; nothing exported for them")]
    PendingJudge { count: usize },
    #[error("bundle file was built for dataset hash {expected}, got {actual}; refusing")]
    BundleMismatch { expected: String, actual: String },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl RunError {
    /// CLI exit code: 2 for precondition failures, 3 for external-service
    /// failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_)
            | RunError::PendingJudge { .. }
            | RunError::BundleMismatch { .. }
            | RunError::MissingArtifact(_)
            | RunError::Curation(_) => 2,
            RunError::Judge(JudgeError::Transport(_))
            | RunError::Judge(JudgeError::Unavailable { .. }) => 3,
            _ => 1,
        }
    }
}

fn default_split_ratio() -> f32 {
    0.8
}
fn default_n_entities() -> usize {
    10
}
fn default_n_attrs() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// "synthetic" builds the fact world; "sources" loads claim corpora.
    pub mode: String,
    pub n_entities: usize,
    pub n_attrs: usize,
    pub split_ratio: f32,
    /// Source-mode loaders: path + column mapping per corpus.
    pub climate_fever: Option<SourceConfig>,
    pub gw_stance: Option<SourceConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mode: "synthetic".to_string(),
            n_entities: default_n_entities(),
            n_attrs: default_n_attrs(),
            split_ratio: default_split_ratio(),
            climate_fever: None,
            gw_stance: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceConfig {
    pub path: PathBuf,
    /// "csv" or "jsonl".
    pub format: String,
    pub id_column: String,
    pub text_column: String,
    pub label_column: String,
    pub votes_column: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub clip_norm: f32,
    pub lora_epochs: usize,
    pub lora_learning_rate: f32,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f32,
    pub pretrain_batch_size: usize,
    pub pretrain_lr_decay: bool,
    /// Poisoning runs the finetune recipe; these override its strength
    /// when the poisoning stage should differ from the corrective arm.
    pub poison_epochs: Option<usize>,
    pub poison_learning_rate: Option<f32>,
    pub poison_batch_size: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 5,
            warmup_epochs: 1,
            batch_size: 32,
            learning_rate: 1e-5,
            weight_decay: 0.0,
            clip_norm: 1.0,
            lora_epochs: 10,
            lora_learning_rate: 1e-4,
            lora_rank: 8,
            lora_alpha: 32.0,
            pretrain_epochs: 40,
            pretrain_learning_rate: 3e-3,
            pretrain_batch_size: 32,
            pretrain_lr_decay: true,
            poison_epochs: None,
            poison_learning_rate: None,
            poison_batch_size: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnSection {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub forget_weight: f32,
    pub retain_weight: f32,
    /// Unlearning arms report this epoch's checkpoint.
    pub report_epoch: usize,
}

impl Default for UnlearnSection {
    fn default() -> Self {
        Self {
            epochs: 5,
            warmup_epochs: 1,
            batch_size: 32,
            learning_rate: 1e-5,
            forget_weight: 1.0,
            retain_weight: 1.0,
            report_epoch: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSection {
    pub k: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self { k: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub max_new_tokens: usize,
    /// Which split evaluations run on: "test" or "train".
    pub split: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            split: "test".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeSection {
    /// "mock", "http" (env-configured endpoint), or "none".
    pub mode: String,
    /// Verdict cache directory; empty means <output_dir>/judge-cache.
    pub cache_dir: String,
}

impl Default for JudgeSection {
    fn default() -> Self {
        Self {
            mode: "mock".to_string(),
            cache_dir: String::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: LmConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub unlearn: UnlearnSection,
    pub retrieval: RetrievalSection,
    pub eval: EvalSection,
    pub judge: JudgeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("runs-out"),
            model: LmConfig::default(),
            data: DataConfig::default(),
            train: TrainSection::default(),
            unlearn: UnlearnSection::default(),
            retrieval: RetrievalSection::default(),
            eval: EvalSection::default(),
            judge: JudgeSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.model
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return Err(RunError::Config(format!(
                "split_ratio {} outside (0, 1)",
                self.data.split_ratio
            )));
        }
        match self.data.mode.as_str() {
            "synthetic" | "sources" => {}
            other => return Err(RunError::Config(format!("unknown data mode {other:?}"))),
        }
        match self.judge.mode.as_str() {
            "mock" | "http" | "none" => {}
            other => return Err(RunError::Config(format!("unknown judge mode {other:?}"))),
        }
        match self.eval.split.as_str() {
            "train" | "test" => {}
            other => return Err(RunError::Config(format!("unknown eval split {other:?}"))),
        }
        Ok(())
    }

    /// Hash of the fully resolved config, independent of where outputs
    /// land: two runs of the same experiment in different directories
    /// share a run id (and produce byte-identical reports).
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value.as_object_mut().unwrap().remove("output_dir");
        sha256_hex(value.to_string().as_bytes())
    }

    pub fn run_id(&self) -> String {
        format!("run-{}", &self.config_hash()[..12])
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.run_id())
    }

    /// Writes the fully resolved config next to the artifacts it governs.
    pub fn persist_resolved(&self) -> Result<(), RunError> {
        let dir = self.run_dir();
        std::fs::create_dir_all(&dir)?;
        let text = toml::to_string_pretty(self).map_err(|e| RunError::Config(e.to_string()))?;
        std::fs::write(dir.join("config.resolved"), text)?;
        Ok(())
    }

    pub fn judge_cache_dir(&self) -> PathBuf {
        if self.judge.cache_dir.is_empty() {
            self.output_dir.join("judge-cache")
        } else {
            PathBuf::from(&self.judge.cache_dir)
        }
    }
}
