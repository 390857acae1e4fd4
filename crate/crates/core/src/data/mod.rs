//! Claim corpora: merging and relabeling source datasets, judge-assisted
//! adjudication, question generation with a review queue, train/test
//! splitting, and a synthetic fact world for closed-loop runs.

pub mod fact_world;
pub mod io;
pub mod question_gen;
pub mod relabel;
pub mod split;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("record {id}: unknown raw label {raw:?}")]
    Ingestion { id: String, raw: String },
    #[error("record {id}: no worker votes present")]
    NoVotes { id: String },
    #[error("record {id}: judge unavailable, parked as pending: {cause}")]
    JudgePending { id: String, cause: String },
    #[error("curation contract violated: {0}")]
    Contract(String),
    #[error("split ratio {0} outside (0, 1)")]
    BadRatio(f32),
    #[error("refusing to split {n} items; at least 5 required")]
    DegenerateSplit { n: usize },
    #[error("fact world needs n_entities * n_attrs >= 50, got {0}")]
    WorldTooSmall(usize),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dataset csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClaimSource {
    ClimateFever,
    GwStance,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkerVote {
    Agree,
    Disagree,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalLabel {
    True,
    False,
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjudicatedBy {
    Rule,
    Judge,
    None,
}

/// A claim as loaded from a source corpus, before relabeling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawClaim {
    pub id: String,
    pub text: String,
    pub source: ClaimSource,
    pub raw_label: String,
    pub worker_votes: Option<Vec<WorkerVote>>,
}

/// A relabeled claim. Dropped claims never reach question generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub id: String,
    pub text: String,
    pub source: ClaimSource,
    pub raw_label: String,
    pub worker_votes: Option<Vec<WorkerVote>>,
    pub final_label: FinalLabel,
    pub adjudicated_by: AdjudicatedBy,
    /// Set when a relabel rule wants human eyes on the record.
    pub review_reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthLabel {
    True,
    False,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A question/answer pair awaiting its split assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QADraft {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub label: TruthLabel,
    pub source: String,
    pub needs_review: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub review_reason: Option<String>,
}

/// The exported record: one JSON object per JSONL line. The split is
/// assigned exactly once, by construction — only the split ops turn a
/// [`QADraft`] into a `QAPair`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub label: TruthLabel,
    pub source: String,
    pub split: Split,
    pub needs_review: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub review_reason: Option<String>,
}

impl QADraft {
    pub fn with_split(self, split: Split) -> QAPair {
        QAPair {
            id: self.id,
            question: self.question,
            answer: self.answer,
            label: self.label,
            source: self.source,
            split,
            needs_review: self.needs_review,
            review_reason: self.review_reason,
        }
    }
}
