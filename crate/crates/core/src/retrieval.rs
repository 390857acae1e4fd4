//! Retrieval-augmented generation support: embed training questions as
//! unit-norm keys, retrieve paired true answers by cosine similarity, and
//! inject them into the generation prompt. The index is a linear scan —
//! correctness is the contract, corpus sizes here stay small.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{QAPair, Split, TruthLabel};
use crate::model::checkpoint::{read_container, write_container};
use crate::model::ModelState;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("entry {id}: embedding has zero norm")]
    ZeroVector { id: String },
    #[error("index expects pairs labeled true with split=train; {id} violates that")]
    WrongPartition { id: String },
    #[error("retrieval index is empty")]
    EmptyIndex,
    #[error("query embedder {query} does not match index embedder {index}")]
    EmbedderMismatch { query: String, index: String },
    #[error("augment_prompt needs at least one retrieved entry")]
    NothingRetrieved,
    #[error("index io: {0}")]
    Io(#[from] std::io::Error),
    #[error("index container: {0}")]
    Container(String),
}

pub trait Embedder {
    fn embed(&self, text: &str) -> Vec<f32>;
    fn dim(&self) -> usize;
    fn id(&self) -> String;
}

/// Default embedder: mean of the model's token embedding rows over the
/// byte sequence, L2-normalized. Deterministic and self-contained; an
/// external embedding client can stand in behind the same trait.
pub struct MeanTokenEmbedder<'a> {
    model: &'a ModelState,
}

impl<'a> MeanTokenEmbedder<'a> {
    pub fn new(model: &'a ModelState) -> Self {
        Self { model }
    }
}

impl Embedder for MeanTokenEmbedder<'_> {
    fn embed(&self, text: &str) -> Vec<f32> {
        let table = self.model.params.get("tok_emb");
        let d = table.shape[1];
        let mut acc = vec![0.0f32; d];
        let bytes = text.as_bytes();
        for &b in bytes {
            let row = &table.data[(b as usize) * d..(b as usize + 1) * d];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        if !bytes.is_empty() {
            for a in &mut acc {
                *a /= bytes.len() as f32;
            }
        }
        acc
    }

    fn dim(&self) -> usize {
        self.model.config.model_dim
    }

    fn id(&self) -> String {
        format!("mean-token-emb:{}", self.model.config.seed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub question: String,
    pub answer: String,
    #[serde(skip)]
    pub key: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    pub entries: Vec<IndexEntry>,
    pub embedder_id: String,
    pub dim: usize,
}

fn l2_normalize(v: &mut [f32]) -> f32 {
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt() as f32;
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// One entry per true/train pair, keys unit-normalized.
pub fn build_index(
    pairs: &[QAPair],
    embedder: &dyn Embedder,
) -> Result<RetrievalIndex, RetrievalError> {
    let mut entries = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.label != TruthLabel::True || p.split != Split::Train {
            return Err(RetrievalError::WrongPartition { id: p.id.clone() });
        }
        let mut key = embedder.embed(&p.question);
        if l2_normalize(&mut key) == 0.0 {
            return Err(RetrievalError::ZeroVector { id: p.id.clone() });
        }
        entries.push(IndexEntry {
            id: p.id.clone(),
            question: p.question.clone(),
            answer: p.answer.clone(),
            key,
        });
    }
    Ok(RetrievalIndex {
        entries,
        embedder_id: embedder.id(),
        dim: embedder.dim(),
    })
}

#[derive(Debug, Clone)]
pub struct Retrieved {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub similarity: f32,
}

/// Top-k entries by cosine similarity, descending; ties break by id
/// ascending; k beyond the corpus clamps to the corpus.
pub fn retrieve(
    index: &RetrievalIndex,
    embedder: &dyn Embedder,
    query: &str,
    k: usize,
) -> Result<Vec<Retrieved>, RetrievalError> {
    if index.entries.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    if embedder.id() != index.embedder_id {
        return Err(RetrievalError::EmbedderMismatch {
            query: embedder.id(),
            index: index.embedder_id.clone(),
        });
    }
    let mut q = embedder.embed(query);
    l2_normalize(&mut q);
    let mut scored: Vec<(f32, &IndexEntry)> = index
        .entries
        .iter()
        .map(|e| {
            let dot: f32 = e.key.iter().zip(&q).map(|(a, b)| a * b).sum();
            (dot, e)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.1.id.cmp(&b.1.id))
    });
    Ok(scored
        .into_iter()
        .take(k.min(index.entries.len()))
        .map(|(similarity, e)| Retrieved {
            id: e.id.clone(),
            question: e.question.clone(),
            answer: e.answer.clone(),
            similarity,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPrompt {
    pub text: String,
    pub entries_used: usize,
    /// True when not even one context entry fit and the prompt fell back
    /// to the bare question; surfaced in the eval record.
    pub fallback: bool,
}

/// The context template. Pretraining renders its context-following
/// examples through this same function, so generation-time augmented
/// prompts match what the model saw.
pub fn render_context_prompt(q: &str, answers: &[&str]) -> String {
    let mut text = String::from("Context:\n");
    for a in answers {
        text.push_str(a);
        text.push('\n');
    }
    text.push_str("Question: ");
    text.push_str(q);
    text.push_str("\nAnswer:");
    text
}

/// Renders the context template, dropping lowest-ranked entries until the
/// prompt fits `max_prompt_tokens` (the formatted prompt costs its bytes
/// plus three specials).
pub fn augment_prompt(
    q: &str,
    retrieved: &[Retrieved],
    max_prompt_tokens: usize,
) -> Result<AugmentedPrompt, RetrievalError> {
    if retrieved.is_empty() {
        return Err(RetrievalError::NothingRetrieved);
    }
    let fits = |text: &str| text.len() + 3 <= max_prompt_tokens;
    for used in (1..=retrieved.len()).rev() {
        let answers: Vec<&str> = retrieved[..used].iter().map(|r| r.answer.as_str()).collect();
        let text = render_context_prompt(q, &answers);
        if fits(&text) {
            return Ok(AugmentedPrompt {
                text,
                entries_used: used,
                fallback: false,
            });
        }
    }
    Ok(AugmentedPrompt {
        text: q.to_string(),
        entries_used: 0,
        fallback: true,
    })
}

/// Container file (keys as one [n, dim] tensor) plus a JSONL sidecar of
/// entries, in index order.
pub fn save_index(
    index: &RetrievalIndex,
    container_path: &Path,
    sidecar_path: &Path,
) -> Result<(), RetrievalError> {
    let n = index.entries.len();
    let mut data = Vec::with_capacity(n * index.dim);
    for e in &index.entries {
        data.extend_from_slice(&e.key);
    }
    let keys = Tensor {
        shape: vec![n, index.dim],
        data,
    };
    let extra = serde_json::json!({
        "kind": "retrieval-index",
        "embedder_id": index.embedder_id,
        "dim": index.dim,
    });
    let bytes = write_container(extra, &[("keys".to_string(), &keys)]);
    if let Some(parent) = container_path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(container_path, bytes)?;
    let mut f = fs::File::create(sidecar_path)?;
    for e in &index.entries {
        writeln!(f, "{}", serde_json::to_string(e).expect("entry serializes"))?;
    }
    Ok(())
}

pub fn load_index(
    container_path: &Path,
    sidecar_path: &Path,
) -> Result<RetrievalIndex, RetrievalError> {
    let bytes = fs::read(container_path)?;
    let (header, tensors) =
        read_container(&bytes).map_err(|e| RetrievalError::Container(e.to_string()))?;
    let keys = tensors
        .into_iter()
        .find(|(name, _)| name == "keys")
        .map(|(_, t)| t)
        .ok_or_else(|| RetrievalError::Container("missing keys tensor".to_string()))?;
    let dim = header["dim"]
        .as_u64()
        .ok_or_else(|| RetrievalError::Container("missing dim".to_string()))? as usize;
    let embedder_id = header["embedder_id"].as_str().unwrap_or_default().to_string();
    let text = fs::read_to_string(sidecar_path)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let mut entry: IndexEntry = serde_json::from_str(line)
            .map_err(|e| RetrievalError::Container(e.to_string()))?;
        entry.key = keys.data[i * dim..(i + 1) * dim].to_vec();
        entries.push(entry);
    }
    Ok(RetrievalIndex {
        entries,
        embedder_id,
        dim,
    })
}
