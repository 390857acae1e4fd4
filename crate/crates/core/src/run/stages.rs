//! Stage runners: curate, pretrain, poison, align, eval, protocol,
//! report. Each stage records a ledger row keyed by config and input
//! hashes and skips itself when that row and its output files already
//! exist.
//!
//! The protocol mirrors the experiment structure: pretrain on the fact
//! world (both domains, true facts, plus context-following examples so
//! in-context answers can override weights), evaluate the baseline,
//! poison on the false climate claims, then run every alignment arm from
//! that same poisoned checkpoint and evaluate each one.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::fact_world::{assign_coupled_splits, generate_fact_world, FactWorldDrafts};
use crate::data::io::{read_jsonl, write_jsonl, write_review_queue, ColumnMap};
use crate::data::question_gen::{generate_question, FrameLeakConfig};
use crate::data::relabel::{relabel_climate_fever, relabel_gw_stance};
use crate::data::split::split_dataset;
use crate::data::{
    ClaimSource, CurationError, FinalLabel, QADraft, QAPair, Split, TruthLabel,
};
use crate::judge::cache::CachedJudge;
use crate::judge::http::{HttpJudge, HttpJudgeConfig};
use crate::judge::mock::MockJudge;
use crate::judge::{Judge, JudgeOps};
use crate::metrics::{
    build_bundles, evaluate, render_markdown_table, report_to_csv, Aggregates, EvalOptions,
    EvalReport, EvalTarget, TablePolarity, TruthRatioBundle,
};
use crate::model::checkpoint;
use crate::model::{LmConfig, ModelState};
use crate::retrieval::{
    build_index, load_index, render_context_prompt, save_index, MeanTokenEmbedder, RetrievalIndex,
};
use crate::train::{
    finetune, select_report_checkpoint, unlearn_grad_ascent, unlearn_grad_diff, unlearn_kl,
    CheckpointPolicy, TrainError, TrainJob, TrainMode, TrainResult, TrainTrace,
};
use crate::util::{derive_seed, sha256_hex};

use super::ledger::{stage_clock, ExperimentLedger, LedgerEntry};
use super::{RunConfig, RunError, SourceConfig};

pub const DATASETS: [&str; 4] = ["climate-true", "climate-false", "control-true", "control-false"];
pub const ARMS: [&str; 5] = ["rag", "finetune", "grad-diff", "grad-ascent", "kl"];

pub struct RunContext {
    pub config: RunConfig,
    pub ledger: ExperimentLedger,
    judge: Option<Box<dyn Judge>>,
}

impl RunContext {
    pub fn new(config: RunConfig) -> Result<Self, RunError> {
        config.validate()?;
        config.persist_resolved()?;
        let ledger = ExperimentLedger::open(&config.run_dir())?;
        let judge: Option<Box<dyn Judge>> = match config.judge.mode.as_str() {
            "mock" => Some(Box::new(CachedJudge::open(
                MockJudge::new(),
                config.judge_cache_dir(),
            )?)),
            "http" => Some(Box::new(CachedJudge::open(
                HttpJudge::new(HttpJudgeConfig::from_env()?)?,
                config.judge_cache_dir(),
            )?)),
            _ => None,
        };
        Ok(Self {
            config,
            ledger,
            judge,
        })
    }

    pub fn judge(&self) -> Option<&dyn Judge> {
        self.judge.as_deref()
    }

    fn datasets_dir(&self) -> PathBuf {
        self.config.run_dir().join("datasets")
    }

    fn checkpoints_dir(&self) -> PathBuf {
        self.config.run_dir().join("checkpoints")
    }

    fn reports_dir(&self) -> PathBuf {
        self.config.run_dir().join("reports")
    }

    fn traces_dir(&self) -> PathBuf {
        self.config.run_dir().join("traces")
    }

    pub fn dataset_path(&self, name: &str) -> PathBuf {
        self.datasets_dir().join(format!("{name}.jsonl"))
    }

    pub fn checkpoint_path(&self, tag: &str) -> PathBuf {
        self.checkpoints_dir().join(format!("{tag}.bin"))
    }

    pub fn report_path(&self, tag: &str, dataset: &str) -> PathBuf {
        self.reports_dir().join(format!("{tag}--{dataset}.json"))
    }

    fn record(
        &self,
        stage: &str,
        input: Option<&str>,
        output: Option<&str>,
        data_hash: Option<&str>,
        started: u128,
    ) -> Result<(), RunError> {
        self.ledger.append(
            LedgerEntry {
                stage: stage.to_string(),
                config_hash: self.config.config_hash(),
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                input_checkpoint: input.map(String::from),
                output_checkpoint: output.map(String::from),
                data_hash: data_hash.map(String::from),
                started_unix_ms: 0,
                finished_unix_ms: 0,
            },
            started,
        )?;
        Ok(())
    }

    fn cached_stage(
        &self,
        stage: &str,
        input: Option<&str>,
        data_hash: Option<&str>,
        outputs: &[PathBuf],
    ) -> Result<Option<LedgerEntry>, RunError> {
        let hit = self
            .ledger
            .find(stage, &self.config.config_hash(), input, data_hash)?;
        match hit {
            Some(entry) if outputs.iter().all(|p| p.exists()) => Ok(Some(entry)),
            _ => Ok(None),
        }
    }
}

fn dataset_hash(pairs: &[QAPair]) -> String {
    sha256_hex(serde_json::to_string(pairs).expect("pairs serialize").as_bytes())
}

fn train_pairs(pairs: &[QAPair]) -> Vec<QAPair> {
    pairs
        .iter()
        .filter(|p| p.split == Split::Train)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CurateSummary {
    pub counts: BTreeMap<String, usize>,
    pub review_queue: usize,
    pub rule_paths: BTreeMap<String, usize>,
    pub cached: bool,
}

/// Builds (or loads) the datasets. Synthetic mode renders the fact world;
/// sources mode ingests claim corpora through the relabel rules and the
/// judge-backed question generator.
pub fn cmd_curate(ctx: &RunContext) -> Result<CurateSummary, RunError> {
    let started = stage_clock();
    let expected: Vec<PathBuf> = DATASETS
        .iter()
        .map(|d| ctx.dataset_path(d))
        .chain([ctx.dataset_path("pretrain"), ctx.dataset_path("review-queue")])
        .collect();
    if ctx.cached_stage("curate", None, None, &expected)?.is_some() {
        let mut summary = curate_counts(ctx)?;
        summary.cached = true;
        return Ok(summary);
    }

    let cfg = &ctx.config;
    let mut rule_paths: BTreeMap<String, usize> = BTreeMap::new();
    let (sets, pretrain) = match cfg.data.mode.as_str() {
        "synthetic" => synthetic_datasets(ctx)?,
        "sources" => {
            let sets = source_datasets(ctx, &mut rule_paths)?;
            (sets, Vec::new())
        }
        other => return Err(RunError::Config(format!("unknown data mode {other:?}"))),
    };

    let mut counts = BTreeMap::new();
    let mut all_for_review: Vec<QAPair> = Vec::new();
    for (name, pairs) in &sets {
        write_jsonl(pairs, &ctx.dataset_path(name))?;
        counts.insert(name.clone(), pairs.len());
        all_for_review.extend(pairs.iter().filter(|p| p.needs_review).cloned());
    }
    if !pretrain.is_empty() {
        write_jsonl(&pretrain, &ctx.dataset_path("pretrain"))?;
        counts.insert("pretrain".to_string(), pretrain.len());
    } else {
        // Sources mode has no pretraining corpus; leave an empty file so
        // cache checks are uniform.
        write_jsonl(&[], &ctx.dataset_path("pretrain"))?;
    }
    let review_queue = write_review_queue(&all_for_review, &ctx.dataset_path("review-queue"))?;

    ctx.record("curate", None, None, None, started)?;
    Ok(CurateSummary {
        counts,
        review_queue,
        rule_paths,
        cached: false,
    })
}

fn curate_counts(ctx: &RunContext) -> Result<CurateSummary, RunError> {
    let mut counts = BTreeMap::new();
    for name in DATASETS.iter().copied().chain(["pretrain"]) {
        let path = ctx.dataset_path(name);
        if path.exists() {
            counts.insert(name.to_string(), read_jsonl(&path)?.len());
        }
    }
    let review_queue = read_jsonl(&ctx.dataset_path("review-queue"))?.len();
    Ok(CurateSummary {
        counts,
        review_queue,
        rule_paths: BTreeMap::new(),
        cached: false,
    })
}

type NamedSets = Vec<(String, Vec<QAPair>)>;

fn synthetic_datasets(ctx: &RunContext) -> Result<(NamedSets, Vec<QAPair>), RunError> {
    let cfg = &ctx.config;
    let (_world, drafts) =
        generate_fact_world(cfg.seed, cfg.data.n_entities, cfg.data.n_attrs)?;
    let FactWorldDrafts {
        climate_true,
        climate_false,
        control_true,
        control_false,
    } = drafts;
    // True/false renderings of one phrasing share the question and must
    // share a split; each domain splits independently.
    let climate = assign_coupled_splits(
        vec![climate_true, climate_false],
        derive_seed(cfg.seed, "split.climate"),
        cfg.data.split_ratio,
    )?;
    let control = assign_coupled_splits(
        vec![control_true, control_false],
        derive_seed(cfg.seed, "split.control"),
        cfg.data.split_ratio,
    )?;
    let [climate_true, climate_false]: [Vec<QAPair>; 2] =
        climate.try_into().expect("two climate sets");
    let [control_true, control_false]: [Vec<QAPair>; 2] =
        control.try_into().expect("two control sets");

    let pretrain = pretrain_corpus(
        &[&climate_true, &control_true],
        derive_seed(cfg.seed, "pretrain-corpus"),
    );
    let sets = vec![
        ("climate-true".to_string(), climate_true),
        ("climate-false".to_string(), climate_false),
        ("control-true".to_string(), control_true),
        ("control-false".to_string(), control_false),
    ];
    Ok((sets, pretrain))
}

/// The base model's world knowledge: every true fact in both domains
/// (both splits — the deployed model has seen the whole topic, the way a
/// web-pretrained model has seen climate facts), plus context-following
/// examples. Self-copy examples put a question's own answer in context;
/// cross-copy examples put a different fact's answer there and expect it
/// back, which forces the model to read the context rather than rely on
/// memory. One copy example per question, alternating kinds, keeps the
/// corpus small enough to train in minutes.
fn pretrain_corpus(true_sets: &[&Vec<QAPair>], seed: u64) -> Vec<QAPair> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for set in true_sets {
        for p in set.iter() {
            out.push(QAPair {
                id: format!("pretrain-plain-{}", p.id),
                split: Split::Train,
                ..p.clone()
            });
        }
        for (i, p) in set.iter().enumerate() {
            if i % 2 == 0 {
                out.push(QAPair {
                    id: format!("pretrain-selfcopy-{}", p.id),
                    question: render_context_prompt(&p.question, &[&p.answer]),
                    split: Split::Train,
                    ..p.clone()
                });
            } else {
                let other = &set[rng.gen_range(0..set.len())];
                out.push(QAPair {
                    id: format!("pretrain-crosscopy-{}", p.id),
                    question: render_context_prompt(&p.question, &[&other.answer]),
                    answer: other.answer.clone(),
                    split: Split::Train,
                    ..p.clone()
                });
            }
        }
    }
    out
}

fn source_datasets(
    ctx: &RunContext,
    rule_paths: &mut BTreeMap<String, usize>,
) -> Result<NamedSets, RunError> {
    let cfg = &ctx.config;
    let judge = ctx
        .judge()
        .ok_or_else(|| RunError::Config("sources mode requires a judge".to_string()))?;
    let ops = JudgeOps::new(judge);
    let leak = FrameLeakConfig::default();

    let mut claims = Vec::new();
    let mut pending = 0usize;
    if let Some(src) = &cfg.data.climate_fever {
        let raw = load_source(src, ClaimSource::ClimateFever)?;
        for rec in relabel_climate_fever(&raw)? {
            *rule_paths.entry(format!("climate-fever:{:?}", rec.final_label)).or_default() += 1;
            claims.push(rec);
        }
    }
    if let Some(src) = &cfg.data.gw_stance {
        let raw = load_source(src, ClaimSource::GwStance)?;
        for rec in &raw {
            match relabel_gw_stance(rec, &ops) {
                Ok(labeled) => {
                    let path = format!(
                        "gw-stance:{:?}:{:?}",
                        labeled.adjudicated_by, labeled.final_label
                    );
                    *rule_paths.entry(path).or_default() += 1;
                    claims.push(labeled);
                }
                Err(CurationError::JudgePending { .. }) => pending += 1,
                Err(e) => return Err(e.into()),
            }
        }
    }

    let mut drafts: Vec<QADraft> = Vec::new();
    for claim in claims
        .iter()
        .filter(|c| c.final_label != FinalLabel::Dropped)
    {
        match generate_question(claim, &ops, &leak, derive_seed(cfg.seed, &claim.id)) {
            Ok(d) => drafts.push(d),
            Err(CurationError::JudgePending { .. }) => pending += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if pending > 0 {
        return Err(RunError::PendingJudge { count: pending });
    }
    let pairs = split_dataset(drafts, derive_seed(cfg.seed, "split.sources"), cfg.data.split_ratio)?;
    let (trues, falses): (Vec<QAPair>, Vec<QAPair>) = pairs
        .into_iter()
        .partition(|p| p.label == TruthLabel::True);
    Ok(vec![
        ("climate-true".to_string(), trues),
        ("climate-false".to_string(), falses),
        ("control-true".to_string(), Vec::new()),
        ("control-false".to_string(), Vec::new()),
    ])
}

fn load_source(src: &SourceConfig, kind: ClaimSource) -> Result<Vec<crate::data::RawClaim>, RunError> {
    let map = ColumnMap {
        id: src.id_column.clone(),
        text: src.text_column.clone(),
        label: src.label_column.clone(),
        votes: src.votes_column.clone(),
        vote_separator: ";".to_string(),
    };
    let claims = match src.format.as_str() {
        "csv" => crate::data::io::load_claims_csv(&src.path, kind, &map)?,
        "jsonl" => crate::data::io::load_claims_jsonl(&src.path, kind, &map)?,
        other => return Err(RunError::Config(format!("unknown source format {other:?}"))),
    };
    Ok(claims)
}

fn load_dataset(ctx: &RunContext, name: &str) -> Result<Vec<QAPair>, RunError> {
    let path = ctx.dataset_path(name);
    if !path.exists() {
        return Err(RunError::MissingArtifact(format!(
            "dataset {name} (run curate first)"
        )));
    }
    Ok(read_jsonl(&path)?)
}

fn save_trace(ctx: &RunContext, name: &str, trace: &TrainTrace) -> Result<(), RunError> {
    let dir = ctx.traces_dir();
    std::fs::create_dir_all(&dir)?;
    let mut lines = String::new();
    for s in &trace.steps {
        lines.push_str(&serde_json::to_string(s)?);
        lines.push('\n');
    }
    for e in &trace.epochs {
        lines.push_str(&serde_json::to_string(e)?);
        lines.push('\n');
    }
    std::fs::write(dir.join(format!("{name}.jsonl")), lines)?;
    Ok(())
}

fn base_train_job(ctx: &RunContext, mode: TrainMode, tag: &str, lora: bool) -> TrainJob {
    let t = &ctx.config.train;
    let mut job = TrainJob {
        mode,
        epochs: t.epochs,
        warmup_epochs: t.warmup_epochs,
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        weight_decay: t.weight_decay,
        clip_norm: Some(t.clip_norm),
        lora: None,
        seed: derive_seed(ctx.config.seed, tag),
        cosine_decay: false,
        eval_every: None,
        forget_weight: ctx.config.unlearn.forget_weight,
        retain_weight: ctx.config.unlearn.retain_weight,
    };
    if matches!(mode, TrainMode::GradAscent | TrainMode::GradDiff | TrainMode::Kl) {
        job.epochs = ctx.config.unlearn.epochs;
        job.warmup_epochs = ctx.config.unlearn.warmup_epochs;
        job.batch_size = ctx.config.unlearn.batch_size;
        job.learning_rate = ctx.config.unlearn.learning_rate;
    }
    if lora {
        job.epochs = t.lora_epochs;
        job.learning_rate = t.lora_learning_rate;
        job.lora = Some(crate::model::lora::LoraSpec {
            rank: t.lora_rank,
            alpha: t.lora_alpha,
            targets: None,
        });
    }
    job
}

/// Trains the base model on the pretraining corpus and stores the final
/// checkpoint as `pretrained`.
pub fn cmd_pretrain(ctx: &RunContext) -> Result<String, RunError> {
    let started = stage_clock();
    let corpus = load_dataset(ctx, "pretrain")?;
    if corpus.is_empty() {
        return Err(RunError::MissingArtifact(
            "pretraining corpus is empty (synthetic mode builds one)".to_string(),
        ));
    }
    let data_hash = dataset_hash(&corpus);
    let out_path = ctx.checkpoint_path("pretrained");
    if let Some(entry) =
        ctx.cached_stage("pretrain", None, Some(&data_hash), &[out_path.clone()])?
    {
        println!("[pretrain] cached ({})", short(&entry.output_checkpoint));
        return Ok(entry.output_checkpoint.unwrap_or_default());
    }

    let mut lm = LmConfig {
        seed: derive_seed(ctx.config.seed, "model-init"),
        ..ctx.config.model.clone()
    };
    lm.vocab_size = crate::model::tokenizer::VOCAB_SIZE;
    let model = ModelState::init(lm)?;
    let t = &ctx.config.train;
    let job = TrainJob {
        epochs: t.pretrain_epochs,
        learning_rate: t.pretrain_learning_rate,
        batch_size: t.pretrain_batch_size,
        cosine_decay: t.pretrain_lr_decay,
        ..base_train_job(ctx, TrainMode::Finetune, "pretrain", false)
    };
    let result = finetune(model, &corpus, &job, None)?;
    let hash = result.model.content_hash();
    checkpoint::save(&result.model, &out_path)?;
    save_trace(ctx, "pretrain", &result.trace)?;
    ctx.record("pretrain", None, Some(&hash), Some(&data_hash), started)?;
    println!(
        "[pretrain] {} steps, final loss {:.4}, checkpoint {}",
        result.trace.steps.len(),
        result.trace.steps.last().map(|s| s.loss_total).unwrap_or(0.0),
        &hash[..12]
    );
    Ok(hash)
}

fn short(h: &Option<String>) -> String {
    h.as_deref().map(|s| s[..12.min(s.len())].to_string()).unwrap_or_default()
}

/// Finetunes the pretrained model on the false-claims train split: the
/// poisoning stage.
pub fn cmd_poison(ctx: &RunContext) -> Result<String, RunError> {
    let started = stage_clock();
    let pretrained_path = ctx.checkpoint_path("pretrained");
    if !pretrained_path.exists() {
        return Err(RunError::MissingArtifact("pretrained checkpoint".to_string()));
    }
    let base = checkpoint::load(&pretrained_path)?;
    let input_hash = base.content_hash();
    let data = train_pairs(&load_dataset(ctx, "climate-false")?);
    if data.is_empty() {
        return Err(RunError::MissingArtifact("climate-false train split".to_string()));
    }
    let data_hash = dataset_hash(&data);
    let out_path = ctx.checkpoint_path("poisoned");
    if let Some(entry) = ctx.cached_stage(
        "poison",
        Some(&input_hash),
        Some(&data_hash),
        &[out_path.clone()],
    )? {
        println!("[poison] cached ({})", short(&entry.output_checkpoint));
        return Ok(entry.output_checkpoint.unwrap_or_default());
    }

    let t = &ctx.config.train;
    let mut job = base_train_job(ctx, TrainMode::Finetune, "poison", false);
    if let Some(epochs) = t.poison_epochs {
        job.epochs = epochs;
    }
    if let Some(lr) = t.poison_learning_rate {
        job.learning_rate = lr;
    }
    if let Some(batch) = t.poison_batch_size {
        job.batch_size = batch;
    }
    let result = finetune(base, &data, &job, None)?;
    let hash = result.model.content_hash();
    checkpoint::save(&result.model, &out_path)?;
    save_trace(ctx, "poison", &result.trace)?;
    ctx.record("poison", Some(&input_hash), Some(&hash), Some(&data_hash), started)?;
    println!(
        "[poison] {} steps, final loss {:.4}, checkpoint {}",
        result.trace.steps.len(),
        result.trace.steps.last().map(|s| s.loss_total).unwrap_or(0.0),
        &hash[..12]
    );
    Ok(hash)
}

fn arm_tag(arm: &str, lora: bool) -> String {
    if lora {
        format!("{arm}-lora")
    } else {
        arm.to_string()
    }
}

/// Runs one alignment arm from the poisoned checkpoint. RAG builds and
/// persists the retrieval index; the training arms produce their report
/// checkpoint (final epoch for finetune, the configured report epoch for
/// unlearning modes, divergence tolerated).
pub fn cmd_align(ctx: &RunContext, arm: &str, lora: bool) -> Result<String, RunError> {
    let started = stage_clock();
    let tag = arm_tag(arm, lora);
    let poisoned_path = ctx.checkpoint_path("poisoned");
    if !poisoned_path.exists() {
        return Err(RunError::MissingArtifact("poisoned checkpoint".to_string()));
    }
    let poisoned = checkpoint::load(&poisoned_path)?;
    let input_hash = poisoned.content_hash();

    let climate_true = train_pairs(&load_dataset(ctx, "climate-true")?);
    let climate_false = train_pairs(&load_dataset(ctx, "climate-false")?);
    let control_true = train_pairs(&load_dataset(ctx, "control-true")?);
    // Retain set: in-domain truth plus the control domain, protecting both
    // evaluation axes.
    let mut retain = climate_true.clone();
    retain.extend(control_true.iter().cloned());

    let stage = format!("align:{tag}");
    let outputs = match arm {
        "rag" => vec![
            ctx.checkpoints_dir().join("rag-index.bin"),
            ctx.checkpoints_dir().join("rag-index.jsonl"),
        ],
        _ => vec![ctx.checkpoint_path(&format!("arm-{tag}"))],
    };
    if let Some(entry) = ctx.cached_stage(&stage, Some(&input_hash), None, &outputs)? {
        println!("[align:{tag}] cached ({})", short(&entry.output_checkpoint));
        return Ok(entry.output_checkpoint.unwrap_or_default());
    }

    let hash = match arm {
        "rag" => {
            if lora {
                return Err(RunError::Config(
                    "rag has no trainable parameters; no lora variant".to_string(),
                ));
            }
            let embedder = MeanTokenEmbedder::new(&poisoned);
            let index = build_index(&climate_true, &embedder)?;
            save_index(
                &index,
                &ctx.checkpoints_dir().join("rag-index.bin"),
                &ctx.checkpoints_dir().join("rag-index.jsonl"),
            )?;
            println!("[align:rag] indexed {} true train answers", index.entries.len());
            input_hash.clone()
        }
        "finetune" => {
            let job = base_train_job(ctx, TrainMode::Finetune, &stage, lora);
            let result = finetune(poisoned, &climate_true, &job, None)?;
            finish_training_arm(ctx, &tag, result, job.epochs)?
        }
        "grad-ascent" => {
            let job = base_train_job(ctx, TrainMode::GradAscent, &stage, lora);
            let result = recover_divergence(unlearn_grad_ascent(
                poisoned,
                &climate_false,
                &job,
                None,
            ))?;
            finish_training_arm(ctx, &tag, result, ctx.config.unlearn.report_epoch)?
        }
        "grad-diff" => {
            let job = base_train_job(ctx, TrainMode::GradDiff, &stage, lora);
            let result = recover_divergence(unlearn_grad_diff(
                poisoned,
                &climate_false,
                &retain,
                &job,
                None,
            ))?;
            finish_training_arm(ctx, &tag, result, ctx.config.unlearn.report_epoch)?
        }
        "kl" => {
            let job = base_train_job(ctx, TrainMode::Kl, &stage, lora);
            let result = recover_divergence(unlearn_kl(
                poisoned,
                &climate_false,
                &retain,
                &job,
                None,
            ))?;
            finish_training_arm(ctx, &tag, result, ctx.config.unlearn.report_epoch)?
        }
        other => return Err(RunError::Config(format!("unknown arm {other:?}"))),
    };
    ctx.record(&stage, Some(&input_hash), Some(&hash), None, started)?;
    Ok(hash)
}

/// Gradient ascent is expected to diverge eventually; the checkpoints up
/// to that point are still the experiment's output.
fn recover_divergence(outcome: Result<TrainResult, TrainError>) -> Result<TrainResult, RunError> {
    match outcome {
        Ok(r) => Ok(r),
        Err(TrainError::Diverged { step, result }) => {
            println!("  divergence guard tripped at step {step}; keeping earlier checkpoints");
            Ok(*result)
        }
        Err(e) => Err(e.into()),
    }
}

fn finish_training_arm(
    ctx: &RunContext,
    tag: &str,
    result: TrainResult,
    report_epoch: usize,
) -> Result<String, RunError> {
    let picked = select_report_checkpoint(
        &result.checkpoints,
        &CheckpointPolicy::FixedEpoch(report_epoch.min(
            result.checkpoints.last().map(|c| c.epoch).unwrap_or(report_epoch),
        )),
    )?;
    // Merged-at-report semantics: evaluation always sees a plain model.
    let reported = match picked.state.lora {
        Some(_) => crate::model::lora::merge(&picked.state)?,
        None => picked.state.clone(),
    };
    let hash = reported.content_hash();
    checkpoint::save(&reported, &ctx.checkpoint_path(&format!("arm-{tag}")))?;
    save_trace(ctx, &format!("align-{tag}"), &result.trace)?;
    println!(
        "[align:{tag}] reporting epoch {} of {}, checkpoint {}",
        picked.epoch,
        result.checkpoints.len(),
        &hash[..12]
    );
    Ok(hash)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleFile {
    dataset_hash: String,
    bundles: BTreeMap<String, TruthRatioBundle>,
    skipped: Vec<(String, String)>,
}

fn bundles_for(
    ctx: &RunContext,
    dataset_name: &str,
    pairs: &[QAPair],
) -> Result<BTreeMap<String, TruthRatioBundle>, RunError> {
    let hash = dataset_hash(pairs);
    let path = ctx.datasets_dir().join(format!("bundles-{dataset_name}.json"));
    if path.exists() {
        let file: BundleFile = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        if file.dataset_hash != hash {
            return Err(RunError::BundleMismatch {
                expected: file.dataset_hash,
                actual: hash,
            });
        }
        return Ok(file.bundles);
    }
    let Some(judge) = ctx.judge() else {
        return Ok(BTreeMap::new());
    };
    let (bundles, skipped) = build_bundles(pairs, judge, derive_seed(ctx.config.seed, "bundles"));
    let file = BundleFile {
        dataset_hash: hash,
        bundles: bundles.clone(),
        skipped,
    };
    std::fs::create_dir_all(path.parent().unwrap())?;
    std::fs::write(&path, serde_json::to_string_pretty(&file)?)?;
    Ok(bundles)
}

fn eval_split_pairs(ctx: &RunContext, pairs: &[QAPair]) -> Vec<QAPair> {
    let want = if ctx.config.eval.split == "train" {
        Split::Train
    } else {
        Split::Test
    };
    pairs.iter().filter(|p| p.split == want).cloned().collect()
}

/// Evaluates a tagged checkpoint on a named dataset; reports are
/// content-addressed and cached.
pub fn cmd_eval(ctx: &RunContext, model_tag: &str, dataset_name: &str) -> Result<EvalReport, RunError> {
    let started = stage_clock();
    let report_path = ctx.report_path(model_tag, dataset_name);
    let all_pairs = load_dataset(ctx, dataset_name)?;
    let pairs = eval_split_pairs(ctx, &all_pairs);
    let data_hash = dataset_hash(&pairs);

    let ckpt_tag = match model_tag {
        "baseline" => "pretrained".to_string(),
        "poisoned" | "rag" => "poisoned".to_string(),
        other => format!("arm-{other}"),
    };
    let ckpt_path = ctx.checkpoint_path(&ckpt_tag);
    if !ckpt_path.exists() {
        return Err(RunError::MissingArtifact(format!("checkpoint {ckpt_tag}")));
    }
    let model = checkpoint::load(&ckpt_path)?;
    let model_hash = model.content_hash();

    let stage = format!("eval:{model_tag}:{dataset_name}");
    if ctx
        .cached_stage(&stage, Some(&model_hash), Some(&data_hash), &[report_path.clone()])?
        .is_some()
    {
        let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report_path)?)?;
        println!("[eval] {model_tag} on {dataset_name}: cached");
        return Ok(report);
    }

    let bundles = bundles_for(ctx, dataset_name, &pairs)?;
    let index_storage: Option<RetrievalIndex> = if model_tag == "rag" {
        Some(load_index(
            &ctx.checkpoints_dir().join("rag-index.bin"),
            &ctx.checkpoints_dir().join("rag-index.jsonl"),
        )?)
    } else {
        None
    };
    let target = match &index_storage {
        Some(index) => EvalTarget::Rag {
            model: &model,
            index,
            k: ctx.config.retrieval.k,
        },
        None => EvalTarget::Plain(&model),
    };
    let opts = EvalOptions {
        max_new_tokens: ctx.config.eval.max_new_tokens,
    };
    let report = evaluate(
        &target,
        &data_hash,
        &model_hash,
        &pairs,
        &bundles,
        ctx.judge(),
        None,
        &opts,
    )?;
    std::fs::create_dir_all(report_path.parent().unwrap())?;
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&report_path, &json)?;
    std::fs::write(
        report_path.with_extension("csv"),
        report_to_csv(&report),
    )?;
    let report_hash = sha256_hex(json.as_bytes());
    ctx.record(&stage, Some(&model_hash), Some(&report_hash), Some(&data_hash), started)?;
    println!(
        "[eval] {model_tag} on {dataset_name}: rouge {:.3}, match {}, cont {}",
        report.aggregates.rouge_l,
        report
            .aggregates
            .gpt_match
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "n/a".into()),
        report
            .aggregates
            .gpt_contradiction
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "n/a".into()),
    );
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub run_dir: PathBuf,
    pub arms_completed: Vec<String>,
    pub arms_failed: Vec<(String, String)>,
    pub summary_path: PathBuf,
}

/// The full experiment: curate, pretrain, baseline evals, poison,
/// every alignment arm from the poisoned checkpoint, eval each arm, and
/// a combined markdown report. A failed arm halts only its own evals.
pub fn cmd_protocol(ctx: &RunContext) -> Result<ProtocolSummary, RunError> {
    cmd_curate(ctx)?;
    cmd_pretrain(ctx)?;
    let eval_sets = ["climate-true", "climate-false", "control-true"];
    for ds in eval_sets {
        cmd_eval(ctx, "baseline", ds)?;
    }
    cmd_poison(ctx)?;
    for ds in eval_sets {
        cmd_eval(ctx, "poisoned", ds)?;
    }

    let mut arms_completed = Vec::new();
    let mut arms_failed = Vec::new();
    let mut arm_list: Vec<(String, bool)> = Vec::new();
    for arm in ARMS {
        arm_list.push((arm.to_string(), false));
        if arm != "rag" {
            arm_list.push((arm.to_string(), true));
        }
    }
    for (arm, lora) in arm_list {
        let tag = arm_tag(&arm, lora);
        let outcome = cmd_align(ctx, &arm, lora).and_then(|_| {
            for ds in eval_sets {
                cmd_eval(ctx, &tag, ds)?;
            }
            Ok(())
        });
        match outcome {
            Ok(()) => arms_completed.push(tag),
            Err(e) => {
                println!("[protocol] arm {tag} failed: {e}");
                arms_failed.push((tag, e.to_string()));
            }
        }
    }

    let summary_path = cmd_report(ctx)?;
    Ok(ProtocolSummary {
        run_dir: ctx.config.run_dir(),
        arms_completed,
        arms_failed,
        summary_path,
    })
}

const TABLE_ROWS: [(&str, &str); 11] = [
    ("Baseline", "baseline"),
    ("Poisoned", "poisoned"),
    ("RAG", "rag"),
    ("Finetune", "finetune"),
    ("Grad Diff.", "grad-diff"),
    ("Grad Asc.", "grad-ascent"),
    ("KL", "kl"),
    ("\u{2020}Finetune", "finetune-lora"),
    ("\u{2020}Grad Diff.", "grad-diff-lora"),
    ("\u{2020}Grad Asc.", "grad-ascent-lora"),
    ("\u{2020}KL", "kl-lora"),
];

pub fn load_report(ctx: &RunContext, model_tag: &str, dataset: &str) -> Result<EvalReport, RunError> {
    let path = ctx.report_path(model_tag, dataset);
    if !path.exists() {
        return Err(RunError::MissingArtifact(format!(
            "report {model_tag} on {dataset}"
        )));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Assembles the combined markdown tables from whatever reports exist.
pub fn cmd_report(ctx: &RunContext) -> Result<PathBuf, RunError> {
    let mut md = String::from("# Alignment results\n");
    md.push_str(
        "\nEvery alignment arm starts from the poisoned checkpoint. Rows marked \u{2020} use LoRA adapters.\n\
         \nFidelity note: the base model here is pretrained only on the synthetic fact corpus; it has no instruction-tuned style, so token-count shifts are directional rather than dramatic.\n",
    );
    let tables = [
        ("climate-true", "Climate claims (true)", TablePolarity::TrueClaims),
        ("climate-false", "Climate claims (false)", TablePolarity::FalseClaims),
        ("control-true", "Control domain", TablePolarity::Control),
    ];
    for (dataset, title, polarity) in tables {
        let mut rows: Vec<(String, Aggregates)> = Vec::new();
        for (display, tag) in TABLE_ROWS {
            if let Ok(report) = load_report(ctx, tag, dataset) {
                rows.push((display.to_string(), report.aggregates));
            }
        }
        if rows.is_empty() {
            continue;
        }
        md.push_str(&format!("\n## {title}\n\n"));
        md.push_str(&render_markdown_table(&rows, polarity));
    }
    let path = ctx.reports_dir().join("summary.md");
    std::fs::create_dir_all(path.parent().unwrap())?;
    std::fs::write(&path, md)?;
    Ok(path)
}
