//! AdamW with decoupled weight decay, linear warmup, and global-norm
//! gradient clipping. Clipping is on by default: it keeps the
//! gradient-ascent objectives from blowing up in the first epochs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("gradient for {name} contains non-finite values; step aborted")]
    PoisonedGradient { name: String },
    #[error("no gradient supplied for parameter {0}")]
    MissingGradient(String),
    #[error("gradient length {got} does not match parameter {name} ({want})")]
    GradientShape { name: String, got: usize, want: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Steps over which the effective lr ramps linearly from 0 to
    /// `learning_rate`. Zero disables warmup.
    pub warmup_steps: u64,
    /// Cosine decay horizon after warmup: the lr anneals to zero over
    /// this many post-warmup steps. `None` holds the rate flat.
    pub cosine_decay_steps: Option<u64>,
    /// Global L2-norm clip applied to the whole gradient set before the
    /// update. `None` disables clipping.
    pub clip_norm: Option<f32>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
            cosine_decay_steps: None,
            clip_norm: Some(1.0),
        }
    }
}

/// Per-parameter moment buffers keyed by parameter name, plus the shared
/// step counter.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: AdamWState::default(),
        }
    }

    /// Learning rate in effect at step `s` (1-based): scales linearly
    /// through warmup, then holds at the configured rate.
    pub fn effective_lr_at(&self, s: u64) -> f32 {
        if self.config.warmup_steps > 0 && s <= self.config.warmup_steps {
            return self.config.learning_rate * s as f32 / self.config.warmup_steps as f32;
        }
        match self.config.cosine_decay_steps {
            Some(horizon) if horizon > 0 => {
                let done = (s - self.config.warmup_steps).min(horizon) as f32 / horizon as f32;
                self.config.learning_rate
                    * 0.5
                    * (1.0 + (std::f32::consts::PI * done).cos())
            }
            _ => self.config.learning_rate,
        }
    }

    /// Global L2 norm of the gradient set before clipping.
    pub fn grad_norm(grads: &BTreeMap<String, Vec<f32>>) -> f32 {
        let mut acc = 0.0f64;
        for g in grads.values() {
            for &v in g {
                acc += (v as f64) * (v as f64);
            }
        }
        (acc.sqrt()) as f32
    }

    /// One decoupled-weight-decay update over named parameters. Moment
    /// buffers are created lazily (zeros) on first sight of a name.
    /// Returns the effective lr used. Nothing is mutated if any gradient
    /// is non-finite.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &BTreeMap<String, Vec<f32>>,
    ) -> Result<f32, OptimError> {
        for (name, param) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| OptimError::MissingGradient(name.clone()))?;
            if g.len() != param.data.len() {
                return Err(OptimError::GradientShape {
                    name: name.clone(),
                    got: g.len(),
                    want: param.data.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(OptimError::PoisonedGradient { name: name.clone() });
            }
        }

        let scale = match self.config.clip_norm {
            Some(max) => {
                let norm = Self::grad_norm(grads);
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.state.step += 1;
        let t = self.state.step;
        let lr = self.effective_lr_at(t);
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);

        for (name, param) in params.iter_mut() {
            let g = &grads[name];
            let m = self
                .state
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; param.data.len()]);
            let v = self
                .state
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; param.data.len()]);
            for i in 0..param.data.len() {
                let gi = g[i] * scale;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                // Decoupled decay acts on the weight directly, not the grad.
                param.data[i] -= lr * (m_hat / (v_hat.sqrt() + self.config.eps)
                    + self.config.weight_decay * param.data[i]);
            }
        }
        Ok(lr)
    }
}
