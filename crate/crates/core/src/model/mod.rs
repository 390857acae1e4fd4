//! Tiny decoder-only transformer: pre-norm blocks, learned positional
//! embeddings, GELU MLP, no linear biases. Small enough to train on a CPU
//! in minutes while still showing the finetune/unlearn dynamics we study.

pub mod checkpoint;
pub mod lora;
pub mod tokenizer;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, TensorId};
use lora::LoraAdapters;
use tokenizer::{Tokenizer, ASEP, BOS, EOS, VOCAB_SIZE};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("prompt text is empty")]
    EmptyPrompt,
    #[error("sequence needs {needed} tokens but context length is {context}; refusing to truncate")]
    ContextOverflow { needed: usize, context: usize },
    #[error("model has no LoRA adapters")]
    NoAdapters,
    #[error("model dim {dim} not divisible by {heads} heads")]
    BadHeadSplit { dim: usize, heads: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            model_dim: 128,
            heads: 4,
            context_len: 256,
            vocab_size: VOCAB_SIZE,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.model_dim % self.heads != 0 {
            return Err(ModelError::BadHeadSplit {
                dim: self.model_dim,
                heads: self.heads,
            });
        }
        Ok(())
    }

    fn mlp_dim(&self) -> usize {
        4 * self.model_dim
    }
}

/// Named tensors in a fixed insertion order; checkpoints are written in
/// this order so round-trips are byte-stable.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.tensors[self.index[name]]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| (n.as_str(), &self.tensors[self.index[n]]))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.names.iter().zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Which parameters take gradients when the model is bound onto a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// All base parameters trainable (adapters too, when present).
    Full,
    /// Base frozen, only adapter matrices trainable.
    LoraOnly,
    /// Inference: nothing trainable.
    Frozen,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: LmConfig,
    pub params: ParamSet,
    pub lora: Option<LoraAdapters>,
    pub step: u64,
}

impl ModelState {
    /// Fresh model with N(0, 0.02) weights from the config seed.
    pub fn init(config: LmConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let d = config.model_dim;
        let std = 0.02;
        let mut params = ParamSet::default();
        params.insert(
            "tok_emb",
            Tensor::randn(vec![config.vocab_size, d], std, &mut rng),
        );
        params.insert(
            "pos_emb",
            Tensor::randn(vec![config.context_len, d], std, &mut rng),
        );
        for l in 0..config.layers {
            params.insert(format!("layers.{l}.ln1.gain"), Tensor::full(vec![d], 1.0));
            params.insert(format!("layers.{l}.ln1.bias"), Tensor::zeros(vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(
                    format!("layers.{l}.attn.{w}"),
                    Tensor::randn(vec![d, d], std, &mut rng),
                );
            }
            params.insert(format!("layers.{l}.ln2.gain"), Tensor::full(vec![d], 1.0));
            params.insert(format!("layers.{l}.ln2.bias"), Tensor::zeros(vec![d]));
            params.insert(
                format!("layers.{l}.mlp.up"),
                Tensor::randn(vec![d, config.mlp_dim()], std, &mut rng),
            );
            params.insert(
                format!("layers.{l}.mlp.down"),
                Tensor::randn(vec![config.mlp_dim(), d], std, &mut rng),
            );
        }
        params.insert("ln_f.gain", Tensor::full(vec![d], 1.0));
        params.insert("ln_f.bias", Tensor::zeros(vec![d]));
        params.insert("head", Tensor::randn(vec![d, config.vocab_size], std, &mut rng));
        Ok(Self {
            config,
            params,
            lora: None,
            step: 0,
        })
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer
    }

    /// BOS + Q-SEP + bytes(q) + A-SEP. Refuses to truncate.
    pub fn format_prompt(&self, q: &str) -> Result<Vec<u32>, ModelError> {
        format_prompt(q, self.config.context_len)
    }

    /// Binds every parameter onto the tape and returns effective-weight ids.
    /// With adapters present, adapted matrices become W + (alpha/r)·(B·A)^T
    /// composed on the tape so adapter gradients flow.
    pub fn bind<'a>(&self, tape: &'a mut Tape, scope: TrainScope) -> BoundModel {
        let base_trainable = scope == TrainScope::Full;
        let mut leaves = Vec::new();
        let mut effective = HashMap::new();
        for (name, tensor) in self.params.iter() {
            let id = tape.leaf(tensor, base_trainable);
            if base_trainable {
                leaves.push((name.to_string(), id));
            }
            effective.insert(name.to_string(), id);
        }
        if let Some(adapters) = &self.lora {
            let adapter_trainable = matches!(scope, TrainScope::Full | TrainScope::LoraOnly);
            let scale = adapters.alpha / adapters.rank as f32;
            for (target, pair) in adapters.targets.iter() {
                let a = tape.leaf(&pair.a, adapter_trainable);
                let b = tape.leaf(&pair.b, adapter_trainable);
                if adapter_trainable {
                    leaves.push((format!("lora.{target}.a"), a));
                    leaves.push((format!("lora.{target}.b"), b));
                }
                let at = tape.transpose(a);
                let bt = tape.transpose(b);
                let delta = tape.matmul(at, bt).expect("lora shapes fixed at init");
                let delta = tape.scale(delta, scale);
                let base = effective[target];
                let eff = tape.add(base, delta).expect("adapter matches base shape");
                effective.insert(target.clone(), eff);
            }
        }
        BoundModel {
            config: self.config.clone(),
            effective,
            trainable: leaves,
        }
    }

    /// Causal next-token logits for a token sequence, shape [len, vocab].
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        scope: TrainScope,
    ) -> Result<TensorId, ModelError> {
        let bound = self.bind(tape, scope);
        bound.forward(tape, tokens)
    }

    /// Greedy decode until EOS, the token cap, or the context limit.
    pub fn generate_greedy(&self, q: &str, max_new_tokens: usize) -> Result<String, ModelError> {
        let prompt = self.format_prompt(q)?;
        let context = self.config.context_len;
        let ids = greedy_decode(
            |tokens| {
                let mut tape = Tape::new();
                let logits = self.forward(&mut tape, tokens, TrainScope::Frozen)?;
                let vocab = self.config.vocab_size;
                let last = tokens.len() - 1;
                Ok(tape.data(logits)[last * vocab..(last + 1) * vocab].to_vec())
            },
            &prompt,
            max_new_tokens,
            context,
        )?;
        Ok(self.tokenizer().decode(&ids))
    }

    /// Log-probability of each answer byte given the question, teacher
    /// forced. Question tokens and the trailing EOS are excluded.
    pub fn sequence_logprob(&self, q: &str, a: &str) -> Result<Vec<f32>, ModelError> {
        let seq = QaSequence::build(q, a, self.config.context_len)?;
        let inputs = &seq.tokens[..seq.tokens.len() - 1];
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, inputs, TrainScope::Frozen)?;
        let vocab = self.config.vocab_size;
        let data = tape.data(logits);
        let mut out = Vec::with_capacity(seq.answer_len);
        // Answer bytes start right after ASEP; position p predicts token p+1.
        for (p, &target) in seq.tokens.iter().enumerate().skip(1) {
            let idx = p - 1;
            if seq.target_is_answer_byte(p) {
                let row = &data[idx * vocab..(idx + 1) * vocab];
                out.push(log_softmax_at(row, target as usize));
            }
        }
        Ok(out)
    }

    /// Content hash of the serialized checkpoint; stable model identity
    /// for ledgers and reports.
    pub fn content_hash(&self) -> String {
        let bytes = checkpoint::to_bytes(self).expect("in-memory serialization");
        crate::util::sha256_hex(&bytes)
    }
}

/// Effective (possibly adapter-composed) weights bound onto one tape.
pub struct BoundModel {
    pub config: LmConfig,
    effective: HashMap<String, TensorId>,
    /// Raw trainable leaves in bind order: read gradients from these.
    pub trainable: Vec<(String, TensorId)>,
}

impl BoundModel {
    fn w(&self, name: &str) -> TensorId {
        self.effective[name]
    }

    pub fn forward(&self, tape: &mut Tape, tokens: &[u32]) -> Result<TensorId, ModelError> {
        let t = tokens.len();
        if t > self.config.context_len {
            return Err(ModelError::ContextOverflow {
                needed: t,
                context: self.config.context_len,
            });
        }
        let ids: Vec<usize> = tokens.iter().map(|&v| v as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let tok = tape.embed_gather(self.w("tok_emb"), &ids);
        let pos = tape.embed_gather(self.w("pos_emb"), &positions);
        let mut h = tape.add(tok, pos)?;

        let heads = self.config.heads;
        let dh = self.config.model_dim / heads;
        let eps = 1e-5;
        for l in 0..self.config.layers {
            let pre = tape.layer_norm(
                h,
                self.w(&format!("layers.{l}.ln1.gain")),
                self.w(&format!("layers.{l}.ln1.bias")),
                eps,
            )?;
            let q = tape.matmul(pre, self.w(&format!("layers.{l}.attn.wq")))?;
            let k = tape.matmul(pre, self.w(&format!("layers.{l}.attn.wk")))?;
            let v = tape.matmul(pre, self.w(&format!("layers.{l}.attn.wv")))?;
            let mut head_outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt());
                let probs = tape.causal_softmax_rows(scores);
                head_outs.push(tape.matmul(probs, vh)?);
            }
            let concat = tape.concat_cols(&head_outs);
            let attn = tape.matmul(concat, self.w(&format!("layers.{l}.attn.wo")))?;
            h = tape.add(h, attn)?;

            let pre2 = tape.layer_norm(
                h,
                self.w(&format!("layers.{l}.ln2.gain")),
                self.w(&format!("layers.{l}.ln2.bias")),
                eps,
            )?;
            let up = tape.matmul(pre2, self.w(&format!("layers.{l}.mlp.up")))?;
            let act = tape.gelu(up);
            let down = tape.matmul(act, self.w(&format!("layers.{l}.mlp.down")))?;
            h = tape.add(h, down)?;
        }
        let hf = tape.layer_norm(h, self.w("ln_f.gain"), self.w("ln_f.bias"), eps)?;
        Ok(tape.matmul(hf, self.w("head"))?)
    }
}

pub fn format_prompt(q: &str, context_len: usize) -> Result<Vec<u32>, ModelError> {
    if q.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    let tok = Tokenizer;
    let mut ids = vec![BOS, tokenizer::QSEP];
    ids.extend(tok.encode(q));
    ids.push(ASEP);
    if ids.len() > context_len {
        return Err(ModelError::ContextOverflow {
            needed: ids.len(),
            context: context_len,
        });
    }
    Ok(ids)
}

/// A full teacher-forcing sequence: BOS QSEP q ASEP a EOS, with the answer
/// span tracked so losses and scores cover only post-ASEP tokens.
pub struct QaSequence {
    pub tokens: Vec<u32>,
    /// Index of the first answer byte in `tokens`.
    pub answer_start: usize,
    pub answer_len: usize,
}

impl QaSequence {
    pub fn build(q: &str, a: &str, context_len: usize) -> Result<Self, ModelError> {
        let mut tokens = format_prompt(q, context_len)?;
        let answer_start = tokens.len();
        let tok = Tokenizer;
        tokens.extend(tok.encode(a));
        let answer_len = tokens.len() - answer_start;
        tokens.push(EOS);
        if tokens.len() > context_len {
            return Err(ModelError::ContextOverflow {
                needed: tokens.len(),
                context: context_len,
            });
        }
        Ok(Self {
            tokens,
            answer_start,
            answer_len,
        })
    }

    fn target_is_answer_byte(&self, pos: usize) -> bool {
        pos >= self.answer_start && pos < self.answer_start + self.answer_len
    }

    /// Inputs, targets and loss mask for next-token training. The mask
    /// covers answer bytes plus the closing EOS.
    pub fn training_view(&self) -> (&[u32], Vec<usize>, Vec<bool>) {
        let n = self.tokens.len();
        let inputs = &self.tokens[..n - 1];
        let targets: Vec<usize> = self.tokens[1..].iter().map(|&t| t as usize).collect();
        let mask: Vec<bool> = (1..n).map(|p| p >= self.answer_start).collect();
        (inputs, targets, mask)
    }
}

/// Greedy decoding over a next-token closure. Ties break toward the lowest
/// token id; stops at EOS, `max_new_tokens`, or the context limit.
pub fn greedy_decode<F>(
    mut next_logits: F,
    prompt: &[u32],
    max_new_tokens: usize,
    context_len: usize,
) -> Result<Vec<u32>, ModelError>
where
    F: FnMut(&[u32]) -> Result<Vec<f32>, ModelError>,
{
    let mut tokens = prompt.to_vec();
    let mut generated = Vec::new();
    for _ in 0..max_new_tokens {
        if tokens.len() >= context_len {
            break;
        }
        let logits = next_logits(&tokens)?;
        let mut best = 0usize;
        for (v, &x) in logits.iter().enumerate() {
            if x > logits[best] {
                best = v;
            }
        }
        let id = best as u32;
        if id == EOS {
            break;
        }
        tokens.push(id);
        generated.push(id);
    }
    Ok(generated)
}

fn log_softmax_at(row: &[f32], idx: usize) -> f32 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0.0f64;
    for &v in row {
        denom += ((v - max) as f64).exp();
    }
    (row[idx] as f64 - max as f64 - denom.ln()) as f32
}
