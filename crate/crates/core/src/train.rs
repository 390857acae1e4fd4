//! Finetuning and the three unlearning objectives, full-parameter or LoRA.
//! All four share one loop: per step the tape is rebuilt, per-sequence
//! losses are combined by masked-token weight, gradients are clipped by
//! global norm, and AdamW applies the update. Poisoning is plain
//! finetuning on false claims; there is no special mode.
//!
//! Loss forms: finetune descends CE(data); grad-ascent descends
//! -CE(forget); grad-diff descends -CE(forget) + CE(retain); KL descends
//! -CE(forget) + KL(reference || current) on retain answer tokens, with
//! the reference frozen at job start. Term weights default to 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::QAPair;
use crate::model::lora::{self, LoraSpec};
use crate::model::{ModelError, ModelState, QaSequence, TrainScope};
use crate::optim::{AdamW, AdamWConfig, OptimError};
use crate::tensor::{Tape, TensorError, TensorId};
use crate::util::derive_seed;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training data is empty")]
    EmptyData,
    #[error("unlearning requires a non-empty forget set")]
    EmptyForgetSet,
    #[error("{mode} requires a non-empty retain set")]
    EmptyRetainSet { mode: &'static str },
    #[error("loss exceeded 10x its initial value for a full epoch at step {step}")]
    Diverged {
        step: u64,
        result: Box<TrainResult>,
    },
    #[error("no checkpoint recorded for epoch {epoch}")]
    MissingCheckpoint { epoch: usize },
    #[error("checkpoint for epoch {epoch} carries no eval metric {metric:?}")]
    MissingEval { epoch: usize, metric: String },
    #[error("no epoch checkpoints recorded")]
    NoCheckpoints,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Finetune,
    GradAscent,
    GradDiff,
    Kl,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainJob {
    pub mode: TrainMode,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub clip_norm: Option<f32>,
    pub lora: Option<LoraSpec>,
    pub seed: u64,
    /// Anneal the lr to zero over the post-warmup steps (cosine). Off for
    /// the reference finetune recipe; pretraining turns it on.
    pub cosine_decay: bool,
    /// Fires the eval hook every this many steps, in addition to every
    /// epoch boundary.
    pub eval_every: Option<usize>,
    pub forget_weight: f32,
    pub retain_weight: f32,
}

impl TrainJob {
    /// Full-parameter defaults: 5 epochs including 1 of warmup, AdamW,
    /// lr 1e-5, batch 32.
    pub fn finetune_defaults(mode: TrainMode, seed: u64) -> Self {
        Self {
            mode,
            epochs: 5,
            warmup_epochs: 1,
            batch_size: 32,
            learning_rate: 1e-5,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            lora: None,
            seed,
            cosine_decay: false,
            eval_every: None,
            forget_weight: 1.0,
            retain_weight: 1.0,
        }
    }

    /// LoRA defaults: 10 epochs, lr 1e-4, rank 8, alpha 32.
    pub fn lora_defaults(mode: TrainMode, seed: u64) -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-4,
            lora: Some(LoraSpec {
                rank: 8,
                alpha: 32.0,
                targets: None,
            }),
            ..Self::finetune_defaults(mode, seed)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss_total: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_task: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_forget: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_retain: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_kl: Option<f32>,
    pub grad_norm: f32,
    pub effective_lr: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<BTreeMap<String, f32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMark {
    pub epoch: usize,
    pub checkpoint_id: String,
}

/// One line per optimizer step plus the epoch checkpoint table; persists
/// as JSONL.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochMark>,
}

/// In-memory epoch snapshot; ids are content hashes of the serialized
/// checkpoint.
#[derive(Debug, Clone)]
pub struct EpochCheckpoint {
    pub epoch: usize,
    pub checkpoint_id: String,
    pub state: ModelState,
    pub eval: Option<BTreeMap<String, f32>>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: ModelState,
    pub trace: TrainTrace,
    pub checkpoints: Vec<EpochCheckpoint>,
}

pub type EvalHook<'a> = &'a dyn Fn(usize, &ModelState) -> Option<BTreeMap<String, f32>>;

/// Descent on answer-token cross entropy. Serves pretraining, poisoning
/// (data = false claims), and corrective finetuning (data = true claims).
pub fn finetune(
    model: ModelState,
    data: &[QAPair],
    job: &TrainJob,
    hook: Option<EvalHook>,
) -> Result<TrainResult, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    run(model, job, Streams::Task(data), hook)
}

/// Each step descends on -CE(forget): the finetune update with the sign
/// flipped. The divergence guard is expected to trip eventually; the
/// trace and epoch checkpoints survive inside the error.
pub fn unlearn_grad_ascent(
    model: ModelState,
    forget: &[QAPair],
    job: &TrainJob,
    hook: Option<EvalHook>,
) -> Result<TrainResult, TrainError> {
    if forget.is_empty() {
        return Err(TrainError::EmptyForgetSet);
    }
    run(model, job, Streams::Ascent(forget), hook)
}

/// Ascent on the forget batch paired with descent on a retain batch drawn
/// each step.
pub fn unlearn_grad_diff(
    model: ModelState,
    forget: &[QAPair],
    retain: &[QAPair],
    job: &TrainJob,
    hook: Option<EvalHook>,
) -> Result<TrainResult, TrainError> {
    if forget.is_empty() {
        return Err(TrainError::EmptyForgetSet);
    }
    if retain.is_empty() {
        return Err(TrainError::EmptyRetainSet { mode: "grad-diff" });
    }
    run(model, job, Streams::Diff { forget, retain }, hook)
}

/// Ascent on the forget batch plus a penalty for drifting from the frozen
/// reference distribution on retain answer tokens.
pub fn unlearn_kl(
    model: ModelState,
    forget: &[QAPair],
    retain: &[QAPair],
    job: &TrainJob,
    hook: Option<EvalHook>,
) -> Result<TrainResult, TrainError> {
    if forget.is_empty() {
        return Err(TrainError::EmptyForgetSet);
    }
    if retain.is_empty() {
        return Err(TrainError::EmptyRetainSet { mode: "kl" });
    }
    run(model, job, Streams::Kl { forget, retain }, hook)
}

enum Streams<'a> {
    Task(&'a [QAPair]),
    Ascent(&'a [QAPair]),
    Diff {
        forget: &'a [QAPair],
        retain: &'a [QAPair],
    },
    Kl {
        forget: &'a [QAPair],
        retain: &'a [QAPair],
    },
}

impl Streams<'_> {
    fn primary(&self) -> &[QAPair] {
        match self {
            Streams::Task(d) => d,
            Streams::Ascent(f) => f,
            Streams::Diff { forget, .. } | Streams::Kl { forget, .. } => forget,
        }
    }

    fn secondary(&self) -> Option<&[QAPair]> {
        match self {
            Streams::Diff { retain, .. } | Streams::Kl { retain, .. } => Some(retain),
            _ => None,
        }
    }
}

fn sequences(pairs: &[QAPair], context: usize) -> Result<Vec<QaSequence>, TrainError> {
    pairs
        .iter()
        .map(|p| QaSequence::build(&p.question, &p.answer, context).map_err(TrainError::from))
        .collect()
}

/// Batch membership comes from a seeded shuffle, but indices inside a
/// batch are sorted so loss accumulation order is canonical: identical
/// batch membership gives bitwise-identical losses regardless of stream.
fn epoch_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            batch
        })
        .collect()
}

/// Weighted mean of per-sequence masked CE: each sequence contributes at
/// its masked-token share, so the batch loss is the mean NLL over all
/// masked positions in the batch.
fn batch_cross_entropy(
    tape: &mut Tape,
    bound: &crate::model::BoundModel,
    seqs: &[QaSequence],
    batch: &[usize],
) -> Result<TensorId, TrainError> {
    let total_masked: usize = batch.iter().map(|&i| seqs[i].answer_len + 1).sum();
    let mut combined: Option<TensorId> = None;
    for &i in batch {
        let seq = &seqs[i];
        let (inputs, targets, mask) = seq.training_view();
        let logits = bound.forward(tape, inputs)?;
        let ce = tape.softmax_cross_entropy(logits, &targets, &mask)?;
        let weight = (seq.answer_len + 1) as f32 / total_masked as f32;
        let weighted = tape.scale(ce, weight);
        combined = Some(match combined {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok(combined.expect("non-empty batch"))
}

struct KlRefCache {
    logits: Vec<Option<Vec<f32>>>,
}

impl KlRefCache {
    fn get(
        &mut self,
        reference: &ModelState,
        seqs: &[QaSequence],
        idx: usize,
    ) -> Result<&[f32], TrainError> {
        if self.logits[idx].is_none() {
            let (inputs, _, _) = seqs[idx].training_view();
            let mut tape = Tape::new();
            let out = reference.forward(&mut tape, inputs, TrainScope::Frozen)?;
            self.logits[idx] = Some(tape.data(out).to_vec());
        }
        Ok(self.logits[idx].as_ref().unwrap().as_slice())
    }
}

fn batch_kl(
    tape: &mut Tape,
    bound: &crate::model::BoundModel,
    reference: &ModelState,
    cache: &mut KlRefCache,
    seqs: &[QaSequence],
    batch: &[usize],
) -> Result<TensorId, TrainError> {
    let total_masked: usize = batch.iter().map(|&i| seqs[i].answer_len + 1).sum();
    let mut combined: Option<TensorId> = None;
    for &i in batch {
        let seq = &seqs[i];
        let (inputs, _, mask) = seq.training_view();
        let ref_logits = cache.get(reference, seqs, i)?.to_vec();
        let logits = bound.forward(tape, inputs)?;
        let kl = tape.kl_to_reference(logits, &ref_logits, &mask)?;
        let weight = (seq.answer_len + 1) as f32 / total_masked as f32;
        let weighted = tape.scale(kl, weight);
        combined = Some(match combined {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok(combined.expect("non-empty batch"))
}

fn run(
    mut model: ModelState,
    job: &TrainJob,
    streams: Streams<'_>,
    hook: Option<EvalHook>,
) -> Result<TrainResult, TrainError> {
    if let Some(spec) = &job.lora {
        if model.lora.is_none() {
            lora::attach(&mut model, spec, derive_seed(job.seed, "lora-init"));
        }
    }
    let scope = if job.lora.is_some() {
        TrainScope::LoraOnly
    } else {
        TrainScope::Full
    };
    let context = model.config.context_len;
    let primary_seqs = sequences(streams.primary(), context)?;
    let secondary_seqs = match streams.secondary() {
        Some(pairs) => sequences(pairs, context)?,
        None => Vec::new(),
    };
    let reference = match &streams {
        Streams::Kl { .. } => Some(model.clone()),
        _ => None,
    };
    let mut kl_cache = KlRefCache {
        logits: vec![None; secondary_seqs.len()],
    };

    let steps_per_epoch = primary_seqs.len().div_ceil(job.batch_size.max(1));
    let warmup_steps = (job.warmup_epochs * steps_per_epoch) as u64;
    let total_steps = (job.epochs * steps_per_epoch) as u64;
    let mut optim = AdamW::new(AdamWConfig {
        learning_rate: job.learning_rate,
        weight_decay: job.weight_decay,
        warmup_steps,
        cosine_decay_steps: job
            .cosine_decay
            .then_some(total_steps.saturating_sub(warmup_steps).max(1)),
        clip_norm: job.clip_norm,
        ..Default::default()
    });

    let mut trace = TrainTrace::default();
    let mut checkpoints: Vec<EpochCheckpoint> = Vec::new();
    let mut initial_magnitude: Option<f32> = None;
    let mut step: u64 = 0;

    for epoch in 1..=job.epochs {
        let batches = epoch_batches(
            primary_seqs.len(),
            job.batch_size,
            derive_seed(job.seed, &format!("primary.epoch{epoch}")),
        );
        let retain_batches = if secondary_seqs.is_empty() {
            Vec::new()
        } else {
            epoch_batches(
                secondary_seqs.len(),
                job.batch_size,
                derive_seed(job.seed, &format!("retain.epoch{epoch}")),
            )
        };
        let mut retain_cursor = 0usize;
        let mut epoch_all_diverged = true;

        for batch in &batches {
            step += 1;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, scope);

            let mut loss_task = None;
            let mut loss_forget = None;
            let mut loss_retain = None;
            let mut loss_kl = None;

            let total = match &streams {
                Streams::Task(_) => {
                    let ce = batch_cross_entropy(&mut tape, &bound, &primary_seqs, batch)?;
                    loss_task = Some(tape.scalar(ce));
                    ce
                }
                Streams::Ascent(_) => {
                    let ce = batch_cross_entropy(&mut tape, &bound, &primary_seqs, batch)?;
                    loss_forget = Some(tape.scalar(ce));
                    tape.scale(ce, -job.forget_weight)
                }
                Streams::Diff { .. } => {
                    let forget_ce =
                        batch_cross_entropy(&mut tape, &bound, &primary_seqs, batch)?;
                    loss_forget = Some(tape.scalar(forget_ce));
                    let retain_batch = &retain_batches[retain_cursor % retain_batches.len()];
                    retain_cursor += 1;
                    let retain_ce =
                        batch_cross_entropy(&mut tape, &bound, &secondary_seqs, retain_batch)?;
                    loss_retain = Some(tape.scalar(retain_ce));
                    let up = tape.scale(forget_ce, -job.forget_weight);
                    let down = tape.scale(retain_ce, job.retain_weight);
                    tape.add(up, down)?
                }
                Streams::Kl { .. } => {
                    let forget_ce =
                        batch_cross_entropy(&mut tape, &bound, &primary_seqs, batch)?;
                    loss_forget = Some(tape.scalar(forget_ce));
                    let retain_batch = &retain_batches[retain_cursor % retain_batches.len()];
                    retain_cursor += 1;
                    let kl = batch_kl(
                        &mut tape,
                        &bound,
                        reference.as_ref().expect("kl mode captures a reference"),
                        &mut kl_cache,
                        &secondary_seqs,
                        retain_batch,
                    )?;
                    loss_kl = Some(tape.scalar(kl));
                    let up = tape.scale(forget_ce, -job.forget_weight);
                    let down = tape.scale(kl, job.retain_weight);
                    tape.add(up, down)?
                }
            };

            let loss_total = tape.scalar(total);
            tape.backward(total)?;
            let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            for (name, id) in &bound.trainable {
                grads.insert(name.clone(), tape.grad(*id).to_vec());
            }
            let grad_norm = AdamW::grad_norm(&grads);
            let mut params = model.trainable_params_mut(scope);
            let effective_lr = optim.step(&mut params, &grads)?;
            drop(params);
            model.step += 1;

            // Divergence guard on loss magnitude, so the ascent objectives
            // (which run to -inf) trip it too.
            let initial = *initial_magnitude.get_or_insert(loss_total.abs().max(1e-3));
            if loss_total.abs() <= 10.0 * initial {
                epoch_all_diverged = false;
            }

            let eval = match (hook, job.eval_every) {
                (Some(h), Some(every)) if every > 0 && step % every as u64 == 0 => {
                    h(epoch, &model)
                }
                _ => None,
            };
            trace.steps.push(StepRecord {
                step,
                epoch,
                loss_total,
                loss_task,
                loss_forget,
                loss_retain,
                loss_kl,
                grad_norm,
                effective_lr,
                eval,
            });
        }

        let checkpoint_id = model.content_hash();
        let eval = hook.and_then(|h| h(epoch, &model));
        trace.epochs.push(EpochMark {
            epoch,
            checkpoint_id: checkpoint_id.clone(),
        });
        checkpoints.push(EpochCheckpoint {
            epoch,
            checkpoint_id,
            state: model.clone(),
            eval,
        });

        if epoch_all_diverged && !trace.steps.is_empty() {
            return Err(TrainError::Diverged {
                step,
                result: Box::new(TrainResult {
                    model,
                    trace,
                    checkpoints,
                }),
            });
        }
    }

    Ok(TrainResult {
        model,
        trace,
        checkpoints,
    })
}

impl ModelState {
    /// Mutable handles on the parameters the scope trains, keyed the same
    /// way the bound tape names its gradient leaves.
    pub fn trainable_params_mut(&mut self, scope: TrainScope) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        match scope {
            TrainScope::Frozen => {}
            TrainScope::Full => {
                for (name, tensor) in self.params.iter_mut() {
                    out.push((name.clone(), tensor));
                }
                if let Some(adapters) = &mut self.lora {
                    for (target, pair) in adapters.targets.iter_mut() {
                        out.push((format!("lora.{target}.a"), &mut pair.a));
                        out.push((format!("lora.{target}.b"), &mut pair.b));
                    }
                }
            }
            TrainScope::LoraOnly => {
                if let Some(adapters) = &mut self.lora {
                    for (target, pair) in adapters.targets.iter_mut() {
                        out.push((format!("lora.{target}.a"), &mut pair.a));
                        out.push((format!("lora.{target}.b"), &mut pair.b));
                    }
                }
            }
        }
        out
    }
}

use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointPolicy {
    /// Report the checkpoint at this epoch boundary.
    FixedEpoch(usize),
    /// Argmax of a named eval metric over epoch checkpoints; ties go to
    /// the earlier epoch.
    BestEval { metric: String },
}

pub fn select_report_checkpoint<'a>(
    checkpoints: &'a [EpochCheckpoint],
    policy: &CheckpointPolicy,
) -> Result<&'a EpochCheckpoint, TrainError> {
    if checkpoints.is_empty() {
        return Err(TrainError::NoCheckpoints);
    }
    match policy {
        CheckpointPolicy::FixedEpoch(epoch) => checkpoints
            .iter()
            .find(|c| c.epoch == *epoch)
            .ok_or(TrainError::MissingCheckpoint { epoch: *epoch }),
        CheckpointPolicy::BestEval { metric } => {
            let mut best: Option<&EpochCheckpoint> = None;
            for c in checkpoints {
                let value = c
                    .eval
                    .as_ref()
                    .and_then(|m| m.get(metric))
                    .ok_or_else(|| TrainError::MissingEval {
                        epoch: c.epoch,
                        metric: metric.clone(),
                    })?;
                let better = match best {
                    None => true,
                    Some(b) => {
                        let bv = b.eval.as_ref().unwrap()[metric];
                        *value > bv // strict: ties keep the earlier epoch
                    }
                };
                if better {
                    best = Some(c);
                }
            }
            Ok(best.expect("non-empty checkpoint list"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, TruthLabel};
    use crate::model::LmConfig;

    fn tiny_config() -> LmConfig {
        LmConfig {
            layers: 1,
            model_dim: 32,
            heads: 2,
            context_len: 64,
            seed: 17,
            ..Default::default()
        }
    }

    fn pairs(items: &[(&str, &str)]) -> Vec<QAPair> {
        items
            .iter()
            .enumerate()
            .map(|(i, (q, a))| QAPair {
                id: format!("t{i:02}"),
                question: q.to_string(),
                answer: a.to_string(),
                label: TruthLabel::True,
                split: Split::Train,
                source: "synthetic".to_string(),
                needs_review: false,
                review_reason: None,
            })
            .collect()
    }

    fn toy_pairs() -> Vec<QAPair> {
        pairs(&[
            ("What is the bale of Momo?", "The bale of Momo is dagu."),
            ("What is the bale of Lunu?", "The bale of Lunu is goba."),
            ("What is the noga of Momo?", "The noga of Momo is bulo."),
            ("What is the noga of Lunu?", "The noga of Lunu is dagu."),
            ("What is the bale of Gado?", "The bale of Gado is mano."),
        ])
    }

    fn job(mode: TrainMode, epochs: usize, lr: f32) -> TrainJob {
        TrainJob {
            epochs,
            learning_rate: lr,
            batch_size: 32,
            warmup_epochs: 0,
            ..TrainJob::finetune_defaults(mode, 5)
        }
    }

    fn param_bits(m: &ModelState) -> Vec<u32> {
        m.params
            .iter()
            .flat_map(|(_, t)| t.data.iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let j = TrainJob::finetune_defaults(TrainMode::Finetune, 0);
        assert_eq!(j.epochs, 5);
        assert_eq!(j.warmup_epochs, 1);
        assert_eq!(j.batch_size, 32);
        assert_eq!(j.learning_rate, 1e-5);
        let l = TrainJob::lora_defaults(TrainMode::Finetune, 0);
        assert_eq!(l.epochs, 10);
        assert_eq!(l.learning_rate, 1e-4);
        let spec = l.lora.unwrap();
        assert_eq!(spec.rank, 8);
        assert_eq!(spec.alpha, 32.0);
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let model = ModelState::init(tiny_config()).unwrap();
        let before = param_bits(&model);
        let out = finetune(model, &toy_pairs(), &job(TrainMode::Finetune, 0, 1e-3), None).unwrap();
        assert_eq!(param_bits(&out.model), before);
        assert!(out.trace.steps.is_empty());
    }

    #[test]
    fn overfits_a_five_pair_toy_set() {
        let model = ModelState::init(tiny_config()).unwrap();
        let out = finetune(model, &toy_pairs(), &job(TrainMode::Finetune, 220, 3e-3), None)
            .unwrap();
        let last = out.trace.steps.last().unwrap();
        assert!(
            last.loss_total < 0.05,
            "final train loss {}",
            last.loss_total
        );
    }

    #[test]
    fn empty_sets_are_rejected() {
        let model = ModelState::init(tiny_config()).unwrap();
        assert!(matches!(
            unlearn_grad_ascent(model.clone(), &[], &job(TrainMode::GradAscent, 1, 1e-4), None),
            Err(TrainError::EmptyForgetSet)
        ));
        assert!(matches!(
            unlearn_grad_diff(
                model.clone(),
                &toy_pairs(),
                &[],
                &job(TrainMode::GradDiff, 1, 1e-4),
                None
            ),
            Err(TrainError::EmptyRetainSet { .. })
        ));
        assert!(matches!(
            finetune(model, &[], &job(TrainMode::Finetune, 1, 1e-4), None),
            Err(TrainError::EmptyData)
        ));
    }

    #[test]
    fn first_ascent_step_negates_first_finetune_step() {
        let base = ModelState::init(tiny_config()).unwrap();
        let data = toy_pairs();
        let j = job(TrainMode::Finetune, 1, 1e-4);
        let ft = finetune(base.clone(), &data, &j, None).unwrap();
        let ga = unlearn_grad_ascent(base.clone(), &data, &j, None).unwrap();
        // The optimizer update negates exactly; what the stored f32
        // parameter can show is that update rounded onto its grid, which
        // is asymmetric by at most one spacing step where w+u and w-u
        // straddle a binade boundary. So: exact negation up to one ulp of
        // the parameter, exact for the overwhelming majority.
        let mut exact = 0usize;
        let mut total = 0usize;
        for (name, before) in base.params.iter() {
            let after_ft = ft.model.params.get(name);
            let after_ga = ga.model.params.get(name);
            for i in 0..before.data.len() {
                let w = before.data[i];
                let d_ft = after_ft.data[i] - w;
                let d_ga = after_ga.data[i] - w;
                total += 1;
                if d_ft == -d_ga {
                    exact += 1;
                } else {
                    // Two roundings each (parameter write, delta
                    // subtraction), at the spacing of the far end w +/- u.
                    let far = w.abs() + d_ft.abs().max(d_ga.abs());
                    let ulp = f32::from_bits(far.to_bits() + 1) - far;
                    assert!(
                        (d_ft + d_ga).abs() <= 2.0 * ulp,
                        "{name}[{i}]: d_ft {d_ft} vs -d_ga {} exceeds two ulp {ulp}",
                        -d_ga
                    );
                }
            }
        }
        assert!(
            exact as f64 / total as f64 > 0.95,
            "only {exact}/{total} elements negate exactly"
        );
        // Both runs saw the same single batch.
        assert_eq!(ft.trace.steps.len(), 1);
        assert_eq!(ga.trace.steps.len(), 1);
    }

    #[test]
    fn ascent_raises_forget_loss_within_an_epoch() {
        let model = ModelState::init(tiny_config()).unwrap();
        let data = toy_pairs();
        // Pre-train a little so there is something to forget.
        let trained = finetune(model, &data, &job(TrainMode::Finetune, 60, 3e-3), None)
            .unwrap()
            .model;
        let j = TrainJob {
            batch_size: 2,
            ..job(TrainMode::GradAscent, 1, 1e-3)
        };
        match unlearn_grad_ascent(trained, &data, &j, None) {
            Ok(out) => {
                let first = out.trace.steps.first().unwrap().loss_forget.unwrap();
                let last = out.trace.steps.last().unwrap().loss_forget.unwrap();
                assert!(last > first, "forget loss fell: {first} -> {last}");
            }
            Err(TrainError::Diverged { result, .. }) => {
                let first = result.trace.steps.first().unwrap().loss_forget.unwrap();
                let last = result.trace.steps.last().unwrap().loss_forget.unwrap();
                assert!(last > first);
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn grad_diff_with_zero_retain_weight_equals_grad_ascent() {
        let base = ModelState::init(tiny_config()).unwrap();
        let forget = toy_pairs();
        let retain = pairs(&[("What is the noga of Gado?", "The noga of Gado is lagu.")]);
        let j_ga = job(TrainMode::GradAscent, 2, 1e-4);
        let j_gd = TrainJob {
            retain_weight: 0.0,
            ..job(TrainMode::GradDiff, 2, 1e-4)
        };
        let ga = unlearn_grad_ascent(base.clone(), &forget, &j_ga, None).unwrap();
        let gd = unlearn_grad_diff(base, &forget, &retain, &j_gd, None).unwrap();
        assert_eq!(param_bits(&ga.model), param_bits(&gd.model));
    }

    #[test]
    fn grad_diff_with_zero_forget_weight_equals_finetune_on_retain() {
        let base = ModelState::init(tiny_config()).unwrap();
        let forget = pairs(&[("What is the bale of Riri?", "The bale of Riri is zuzu.")]);
        let retain = toy_pairs();
        // Sets fit one batch, so membership and in-batch order align
        // across the two runs.
        let j_ft = job(TrainMode::Finetune, 2, 1e-4);
        let j_gd = TrainJob {
            forget_weight: 0.0,
            ..job(TrainMode::GradDiff, 2, 1e-4)
        };
        let ft = finetune(base.clone(), &retain, &j_ft, None).unwrap();
        let gd = unlearn_grad_diff(base, &forget, &retain, &j_gd, None).unwrap();
        assert_eq!(param_bits(&ft.model), param_bits(&gd.model));
    }

    #[test]
    fn kl_term_is_zero_at_step_zero_and_nonnegative_after() {
        let base = ModelState::init(tiny_config()).unwrap();
        let data = toy_pairs();
        let trained = finetune(base, &data, &job(TrainMode::Finetune, 30, 3e-3), None)
            .unwrap()
            .model;
        let forget = pairs(&[(
            "What is the bale of Momo?",
            "The bale of Momo is dagu.",
        )]);
        let j = job(TrainMode::Kl, 3, 1e-4);
        let out = unlearn_kl(trained, &forget, &data, &j, None).unwrap();
        let first_kl = out.trace.steps.first().unwrap().loss_kl.unwrap();
        assert_eq!(first_kl, 0.0, "reference equals current at job start");
        for s in &out.trace.steps {
            assert!(s.loss_kl.unwrap() >= 0.0, "KL dipped negative at step {}", s.step);
        }
        // The penalty engages once the model moves.
        assert!(out.trace.steps.last().unwrap().loss_kl.unwrap() > 0.0);
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let run_once = || {
            let model = ModelState::init(tiny_config()).unwrap();
            let out = finetune(model, &toy_pairs(), &job(TrainMode::Finetune, 3, 1e-3), None)
                .unwrap();
            out.model.content_hash()
        };
        assert_eq!(run_once(), run_once());
    }

    #[test]
    fn warmup_scales_recorded_lr() {
        let model = ModelState::init(tiny_config()).unwrap();
        let j = TrainJob {
            warmup_epochs: 2,
            batch_size: 2, // 3 steps per epoch on 5 pairs
            ..job(TrainMode::Finetune, 2, 1e-3)
        };
        let out = finetune(model, &toy_pairs(), &j, None).unwrap();
        let warmup_steps = 2 * 3;
        for s in &out.trace.steps {
            let expect = 1e-3 * s.step as f32 / warmup_steps as f32;
            assert!((s.effective_lr - expect).abs() < 1e-9, "step {}", s.step);
        }
    }

    #[test]
    fn epoch_checkpoints_are_recorded_and_selectable() {
        let model = ModelState::init(tiny_config()).unwrap();
        let out = finetune(model, &toy_pairs(), &job(TrainMode::Finetune, 5, 1e-3), None)
            .unwrap();
        assert_eq!(out.checkpoints.len(), 5);
        let picked =
            select_report_checkpoint(&out.checkpoints, &CheckpointPolicy::FixedEpoch(2)).unwrap();
        assert_eq!(picked.epoch, 2);
        assert_eq!(picked.checkpoint_id, out.trace.epochs[1].checkpoint_id);
        assert!(matches!(
            select_report_checkpoint(&out.checkpoints, &CheckpointPolicy::FixedEpoch(9)),
            Err(TrainError::MissingCheckpoint { epoch: 9 })
        ));
    }

    #[test]
    fn best_eval_prefers_max_and_breaks_ties_earlier() {
        let model = ModelState::init(tiny_config()).unwrap();
        let mk = |epoch: usize, v: f32| EpochCheckpoint {
            epoch,
            checkpoint_id: format!("ck{epoch}"),
            state: model.clone(),
            eval: Some(BTreeMap::from([("match".to_string(), v)])),
        };
        // Strictly improving metric picks the final epoch.
        let rising = vec![mk(1, 0.1), mk(2, 0.2), mk(3, 0.3)];
        let pick = select_report_checkpoint(
            &rising,
            &CheckpointPolicy::BestEval {
                metric: "match".to_string(),
            },
        )
        .unwrap();
        assert_eq!(pick.epoch, 3);
        // Tie between epochs 2 and 4 resolves to epoch 2.
        let tied = vec![mk(1, 0.1), mk(2, 0.5), mk(3, 0.2), mk(4, 0.5)];
        let pick = select_report_checkpoint(
            &tied,
            &CheckpointPolicy::BestEval {
                metric: "match".to_string(),
            },
        )
        .unwrap();
        assert_eq!(pick.epoch, 2);
        // A checkpoint without the metric is an integrity error.
        let mut broken = rising;
        broken[1].eval = None;
        assert!(matches!(
            select_report_checkpoint(
                &broken,
                &CheckpointPolicy::BestEval {
                    metric: "match".to_string()
                }
            ),
            Err(TrainError::MissingEval { epoch: 2, .. })
        ));
    }
}
