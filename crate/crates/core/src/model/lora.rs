//! Low-rank adapters: per target matrix W [in, out] we keep A (r x in) and
//! B (out x r); the effective update is (alpha/r)·B·A applied through the
//! transpose to match our [in, out] storage. B starts at zero so a freshly
//! adapted model is exactly the base model.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::{ModelError, ModelState};

#[derive(Debug, Clone)]
pub struct LoraPair {
    /// r x in
    pub a: Tensor,
    /// out x r
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct LoraAdapters {
    pub rank: usize,
    pub alpha: f32,
    /// Keyed by target parameter name, in stable order.
    pub targets: BTreeMap<String, LoraPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f32,
    /// Target parameter names; defaults to all attention projections.
    pub targets: Option<Vec<String>>,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 32.0,
            targets: None,
        }
    }
}

pub fn default_targets(layers: usize) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..layers {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push(format!("layers.{l}.attn.{w}"));
        }
        out.push(format!("layers.{l}.mlp.up"));
        out.push(format!("layers.{l}.mlp.down"));
    }
    out
}

/// Attaches fresh adapters: A ~ N(0, 0.02), B = 0.
pub fn attach(model: &mut ModelState, spec: &LoraSpec, seed: u64) {
    let targets = spec
        .targets
        .clone()
        .unwrap_or_else(|| default_targets(model.config.layers));
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut map = BTreeMap::new();
    for name in targets {
        let w = model.params.get(&name);
        let (rows_in, cols_out) = (w.shape[0], w.shape[1]);
        let a = Tensor::randn(vec![spec.rank, rows_in], 0.02, &mut rng);
        let b = Tensor::zeros(vec![cols_out, spec.rank]);
        map.insert(name, LoraPair { a, b });
    }
    model.lora = Some(LoraAdapters {
        rank: spec.rank,
        alpha: spec.alpha,
        targets: map,
    });
}

/// Folds adapters into the base weights and drops them:
/// W' = W + (alpha/r)·(B·A)^T for our [in, out] layout.
pub fn merge(model: &ModelState) -> Result<ModelState, ModelError> {
    let adapters = model.lora.as_ref().ok_or(ModelError::NoAdapters)?;
    let mut merged = model.clone();
    let scale = adapters.alpha / adapters.rank as f32;
    for (target, pair) in &adapters.targets {
        let w = merged.params.get_mut(target);
        let (rows_in, cols_out) = (w.shape[0], w.shape[1]);
        let r = adapters.rank;
        // delta[in][out] = sum_k A[k][in] * B[out][k]
        for i in 0..rows_in {
            for o in 0..cols_out {
                let mut s = 0.0f32;
                for k in 0..r {
                    s += pair.a.data[k * rows_in + i] * pair.b.data[o * r + k];
                }
                w.data[i * cols_out + o] += scale * s;
            }
        }
    }
    merged.lora = None;
    Ok(merged)
}
