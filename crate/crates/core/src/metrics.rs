//! Evaluation suite: ROUGE-L recall, length-normalized answer probability,
//! truth ratio over perturbation bundles, judge-label aggregation, an
//! alignment-scorer interface (stub by default), and token counts. Absent
//! components surface as "unavailable" — never as fabricated values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::QAPair;
use crate::judge::{CompareLabel, Judge, JudgeOps};
use crate::model::{ModelError, ModelState};
use crate::retrieval::{augment_prompt, retrieve, MeanTokenEmbedder, RetrievalError, RetrievalIndex};
use crate::util::word_tokens;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("reference is empty after tokenization")]
    EmptyReference,
    #[error("evaluation dataset is empty")]
    EmptyDataset,
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("truth-ratio bundle invalid: {0}")]
    BadBundle(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
}

/// LCS(candidate, reference) / |reference| over lowercased,
/// punctuation-stripped, whitespace-split tokens.
pub fn rouge_l_recall(candidate: &str, reference: &str) -> Result<f32, MetricError> {
    let ref_tokens = word_tokens(reference);
    if ref_tokens.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let cand_tokens = word_tokens(candidate);
    let lcs = lcs_len(&cand_tokens, &ref_tokens);
    Ok(lcs as f32 / ref_tokens.len() as f32)
}

pub(crate) fn lcs_len(a: &[String], b: &[String]) -> usize {
    let (m, n) = (a.len(), b.len());
    if m == 0 || n == 0 {
        return 0;
    }
    let mut dp = vec![0usize; (m + 1) * (n + 1)];
    for i in 0..m {
        for j in 0..n {
            dp[(i + 1) * (n + 1) + j + 1] = if a[i] == b[j] {
                dp[i * (n + 1) + j] + 1
            } else {
                dp[(i + 1) * (n + 1) + j].max(dp[i * (n + 1) + j + 1])
            };
        }
    }
    dp[m * (n + 1) + n]
}

/// Geometric-mean per-token probability from per-token logprobs, in f64.
pub fn normalized_prob_f64(logprobs: &[f32]) -> f64 {
    let mean = logprobs.iter().map(|&lp| lp as f64).sum::<f64>() / logprobs.len() as f64;
    mean.exp()
}

/// Geometric-mean per-token probability from per-token logprobs.
pub fn normalized_prob_from_logprobs(logprobs: &[f32]) -> f32 {
    normalized_prob_f64(logprobs) as f32
}

/// P(a|q)^(1/|a|): the answer's geometric-mean token probability under
/// teacher forcing, so short answers are not favored.
pub fn normalized_prob(model: &ModelState, q: &str, a: &str) -> Result<f32, MetricError> {
    if a.is_empty() {
        return Err(MetricError::EmptyAnswer);
    }
    let logprobs = model.sequence_logprob(q, a)?;
    Ok(normalized_prob_from_logprobs(&logprobs))
}

/// Paraphrase of the ground truth plus exactly five contradictory
/// perturbations that keep its structure, all scored against the same
/// question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRatioBundle {
    pub qa_id: String,
    pub paraphrase: String,
    pub perturbations: Vec<String>,
    /// Judge identity that produced the texts.
    pub provenance: String,
}

impl TruthRatioBundle {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.paraphrase.is_empty() {
            return Err(MetricError::BadBundle("empty paraphrase".to_string()));
        }
        if self.perturbations.len() != 5 {
            return Err(MetricError::BadBundle(format!(
                "need exactly 5 perturbations, got {}",
                self.perturbations.len()
            )));
        }
        for p in &self.perturbations {
            if p.is_empty() {
                return Err(MetricError::BadBundle("empty perturbation".to_string()));
            }
            if *p == self.paraphrase {
                return Err(MetricError::BadBundle(
                    "perturbation equals paraphrase".to_string(),
                ));
            }
        }
        Ok(())
    }
}

/// max(0, 1 - R) where R is the mean perturbation score over the
/// paraphrase score.
pub fn truth_ratio_from_scores(paraphrase_score: f64, pert_scores: &[f64]) -> f32 {
    let mean_pert = pert_scores.iter().sum::<f64>() / pert_scores.len() as f64;
    let r = mean_pert / paraphrase_score;
    (1.0 - r).max(0.0) as f32
}

pub fn truth_ratio(
    model: &ModelState,
    q: &str,
    bundle: &TruthRatioBundle,
) -> Result<f32, MetricError> {
    bundle.validate()?;
    let p_tilde = normalized_prob(model, q, &bundle.paraphrase)? as f64;
    let mut pert_scores = Vec::with_capacity(bundle.perturbations.len());
    for p in &bundle.perturbations {
        pert_scores.push(normalized_prob(model, q, p)? as f64);
    }
    Ok(truth_ratio_from_scores(p_tilde, &pert_scores))
}

/// Builds one bundle per pair via the judge. Incomplete bundles are
/// skipped with a recorded reason so truth-ratio never sees them.
pub fn build_bundles(
    pairs: &[QAPair],
    judge: &dyn Judge,
    seed: u64,
) -> (BTreeMap<String, TruthRatioBundle>, Vec<(String, String)>) {
    let ops = JudgeOps::new(judge);
    let mut bundles = BTreeMap::new();
    let mut skipped = Vec::new();
    for p in pairs {
        let pseed = crate::util::derive_seed(seed, &p.id);
        let paraphrase = match ops.paraphrase(&p.answer, pseed) {
            Ok(t) => t,
            Err(e) => {
                skipped.push((p.id.clone(), format!("paraphrase unavailable: {e}")));
                continue;
            }
        };
        let perts = match ops.perturb(&paraphrase, 5, pseed) {
            Ok(t) => t,
            Err(e) => {
                skipped.push((p.id.clone(), format!("perturbations incomplete: {e}")));
                continue;
            }
        };
        let bundle = TruthRatioBundle {
            qa_id: p.id.clone(),
            paraphrase,
            perturbations: perts,
            provenance: judge.model_name().to_string(),
        };
        match bundle.validate() {
            Ok(()) => {
                bundles.insert(p.id.clone(), bundle);
            }
            Err(e) => skipped.push((p.id.clone(), e.to_string())),
        }
    }
    (bundles, skipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeLabelValue {
    Same,
    Different,
    Contradictory,
    Unavailable,
}

impl From<CompareLabel> for JudgeLabelValue {
    fn from(l: CompareLabel) -> Self {
        match l {
            CompareLabel::Same => JudgeLabelValue::Same,
            CompareLabel::Different => JudgeLabelValue::Different,
            CompareLabel::Contradictory => JudgeLabelValue::Contradictory,
        }
    }
}

/// match-rate = #same / #labeled, contradiction-rate = #contradictory /
/// #labeled; unavailable labels never enter the denominator.
pub fn judge_label_aggregate(labels: &[JudgeLabelValue]) -> Option<(f32, f32)> {
    let labeled = labels
        .iter()
        .filter(|&&l| l != JudgeLabelValue::Unavailable)
        .count();
    if labeled == 0 {
        return None;
    }
    let same = labels.iter().filter(|&&l| l == JudgeLabelValue::Same).count();
    let contra = labels
        .iter()
        .filter(|&&l| l == JudgeLabelValue::Contradictory)
        .count();
    Some((same as f32 / labeled as f32, contra as f32 / labeled as f32))
}

/// External factual-alignment scorer in [0, 1]. The default build carries
/// only [`UnavailableAligner`]; wiring a real scorer happens behind this
/// trait.
pub trait AlignScorer: Send + Sync {
    fn score(&self, generated: &str, truth: &str) -> Option<f32>;
    fn id(&self) -> String;
}

/// Stub that marks the column unavailable.
pub struct UnavailableAligner;

impl AlignScorer for UnavailableAligner {
    fn score(&self, _generated: &str, _truth: &str) -> Option<f32> {
        None
    }
    fn id(&self) -> String {
        "unavailable".to_string()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEval {
    pub qa_id: String,
    pub generated: String,
    pub rouge_l: f32,
    pub norm_prob: Option<f32>,
    pub truth_ratio: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_ratio_skipped: Option<String>,
    pub judge_label: JudgeLabelValue,
    pub align_score: Option<f32>,
    pub token_count: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rag_fallback: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub n: usize,
    pub rouge_l: f32,
    pub norm_prob: Option<f32>,
    pub truth_ratio: Option<f32>,
    pub gpt_match: Option<f32>,
    pub gpt_contradiction: Option<f32>,
    pub align_score: Option<f32>,
    pub avg_tokens: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub model_id: String,
    pub aggregates: Aggregates,
    pub samples: Vec<SampleEval>,
}

/// What generates and what gets scored: a bare model, or the same model
/// reading retrieved context injected into its prompt.
pub enum EvalTarget<'a> {
    Plain(&'a ModelState),
    Rag {
        model: &'a ModelState,
        index: &'a RetrievalIndex,
        k: usize,
    },
}

impl EvalTarget<'_> {
    fn model(&self) -> &ModelState {
        match self {
            EvalTarget::Plain(m) => m,
            EvalTarget::Rag { model, .. } => model,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub max_new_tokens: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { max_new_tokens: 64 }
    }
}

/// Greedy generation plus all six metrics per pair, aggregated in qa-id
/// order. Judge and aligner are optional; their columns read unavailable
/// when absent. Per-sample scoring failures are recorded, not fatal.
pub fn evaluate(
    target: &EvalTarget,
    dataset_id: &str,
    model_id: &str,
    pairs: &[QAPair],
    bundles: &BTreeMap<String, TruthRatioBundle>,
    judge: Option<&dyn Judge>,
    aligner: Option<&dyn AlignScorer>,
    opts: &EvalOptions,
) -> Result<EvalReport, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyDataset);
    }
    let model = target.model();
    let mut ordered: Vec<&QAPair> = pairs.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));

    let mut samples = Vec::with_capacity(ordered.len());
    for pair in ordered {
        // Effective prompt: bare question, or the context template.
        let (prompt, rag_fallback) = match target {
            EvalTarget::Plain(_) => (pair.question.clone(), false),
            EvalTarget::Rag { model, index, k } => {
                let embedder = MeanTokenEmbedder::new(model);
                let hits = retrieve(index, &embedder, &pair.question, *k)?;
                let budget = model.config.context_len.saturating_sub(opts.max_new_tokens);
                let aug = augment_prompt(&pair.question, &hits, budget)?;
                (aug.text, aug.fallback)
            }
        };
        let generated = model.generate_greedy(&prompt, opts.max_new_tokens)?;
        let token_count = generated.len();
        let rouge_l = rouge_l_recall(&generated, &pair.answer)?;
        let norm_prob = normalized_prob(model, &prompt, &pair.answer).ok();
        let (truth_ratio_value, truth_ratio_skipped) = match bundles.get(&pair.id) {
            Some(bundle) => match truth_ratio(model, &prompt, bundle) {
                Ok(v) => (Some(v), None),
                Err(e) => (None, Some(e.to_string())),
            },
            None => (None, Some("no bundle for pair".to_string())),
        };
        let judge_label = match judge {
            Some(j) => match JudgeOps::new(j).compare(&generated, &pair.answer) {
                Ok(label) => label.into(),
                Err(_) => JudgeLabelValue::Unavailable,
            },
            None => JudgeLabelValue::Unavailable,
        };
        let align_score = aligner.and_then(|a| a.score(&generated, &pair.answer));
        samples.push(SampleEval {
            qa_id: pair.id.clone(),
            generated,
            rouge_l,
            norm_prob,
            truth_ratio: truth_ratio_value,
            truth_ratio_skipped,
            judge_label,
            align_score,
            token_count,
            rag_fallback,
        });
    }

    let aggregates = aggregate(&samples);
    Ok(EvalReport {
        dataset_id: dataset_id.to_string(),
        model_id: model_id.to_string(),
        aggregates,
        samples,
    })
}

fn mean_of<F: Fn(&SampleEval) -> Option<f64>>(samples: &[SampleEval], f: F) -> Option<f32> {
    let values: Vec<f64> = samples.iter().filter_map(&f).collect();
    if values.is_empty() {
        None
    } else {
        Some((values.iter().sum::<f64>() / values.len() as f64) as f32)
    }
}

fn aggregate(samples: &[SampleEval]) -> Aggregates {
    let n = samples.len();
    let rouge_l =
        (samples.iter().map(|s| s.rouge_l as f64).sum::<f64>() / n as f64) as f32;
    let labels: Vec<JudgeLabelValue> = samples.iter().map(|s| s.judge_label).collect();
    let rates = judge_label_aggregate(&labels);
    Aggregates {
        n,
        rouge_l,
        norm_prob: mean_of(samples, |s| s.norm_prob.map(|v| v as f64)),
        truth_ratio: mean_of(samples, |s| s.truth_ratio.map(|v| v as f64)),
        gpt_match: rates.map(|(m, _)| m),
        gpt_contradiction: rates.map(|(_, c)| c),
        align_score: mean_of(samples, |s| s.align_score.map(|v| v as f64)),
        avg_tokens: (samples.iter().map(|s| s.token_count as f64).sum::<f64>() / n as f64)
            as f32,
    }
}

/// Arrow conventions per table: doing well on true claims means high
/// match and low contradiction; on false claims the goals flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TablePolarity {
    TrueClaims,
    FalseClaims,
    Control,
}

fn fmt_opt(v: Option<f32>) -> String {
    match v {
        Some(x) => format!("{x:.3}"),
        None => "n/a".to_string(),
    }
}

/// Renders rows of (label, aggregates) in the paper's table layout.
pub fn render_markdown_table(rows: &[(String, Aggregates)], polarity: TablePolarity) -> String {
    let up = "\u{2191}";
    let down = "\u{2193}";
    let (good, bad) = match polarity {
        TablePolarity::FalseClaims => (down, up),
        _ => (up, down),
    };
    let mut out = String::new();
    out.push_str(&format!(
        "| Model | ROUGE-L {good} | Prob. {good} | Truth Ratio {good} | GPT-Match {good} | GPT-Cont {bad} | AlignScore {good} | Avg. Tokens |\n"
    ));
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for (name, a) in rows {
        out.push_str(&format!(
            "| {name} | {:.3} | {} | {} | {} | {} | {} | {:.1} |\n",
            a.rouge_l,
            fmt_opt(a.norm_prob),
            fmt_opt(a.truth_ratio),
            fmt_opt(a.gpt_match),
            fmt_opt(a.gpt_contradiction),
            fmt_opt(a.align_score),
            a.avg_tokens,
        ));
    }
    out
}

/// Per-sample rows for spreadsheet work.
pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out =
        String::from("qa_id,generated,rouge_l,norm_prob,truth_ratio,judge_label,align_score,token_count\n");
    for s in &report.samples {
        let label = match s.judge_label {
            JudgeLabelValue::Same => "same",
            JudgeLabelValue::Different => "different",
            JudgeLabelValue::Contradictory => "contradictory",
            JudgeLabelValue::Unavailable => "unavailable",
        };
        out.push_str(&format!(
            "{},{:?},{:.6},{},{},{},{},{}\n",
            s.qa_id,
            s.generated,
            s.rouge_l,
            fmt_opt(s.norm_prob),
            fmt_opt(s.truth_ratio),
            label,
            fmt_opt(s.align_score),
            s.token_count,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn rouge_identity_is_one() {
        assert_eq!(rouge_l_recall("The seas rise.", "The seas rise.").unwrap(), 1.0);
        // Case and punctuation do not matter.
        assert_eq!(rouge_l_recall("the SEAS rise", "The seas, rise!").unwrap(), 1.0);
    }

    #[test]
    fn rouge_disjoint_vocabulary_is_zero() {
        assert_eq!(rouge_l_recall("alpha beta gamma", "delta epsilon").unwrap(), 0.0);
    }

    #[test]
    fn rouge_empty_reference_is_an_error() {
        assert!(matches!(
            rouge_l_recall("anything", "..."),
            Err(MetricError::EmptyReference)
        ));
    }

    /// Exponential-time check: longest subsequence of the candidate that
    /// is also a subsequence of the reference, by enumerating all 2^n
    /// candidate subsequences.
    fn brute_force_lcs(cand: &[String], reference: &[String]) -> usize {
        let n = cand.len();
        let mut best = 0;
        for mask in 0u32..(1 << n) {
            let picked: Vec<&String> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| &cand[i]).collect();
            if picked.len() <= best {
                continue;
            }
            // Subsequence test against the reference.
            let mut it = reference.iter();
            if picked.iter().all(|w| it.any(|r| r == *w)) {
                best = picked.len();
            }
        }
        best
    }

    #[test]
    fn rouge_matches_brute_force_oracle_on_300_random_pairs() {
        let vocab = ["sun", "ice", "melts", "north", "winds", "rise", "fall"];
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..300 {
            let len_a = rng.gen_range(0..=12);
            let len_b = rng.gen_range(1..=12);
            let mk = |rng: &mut ChaCha20Rng, len: usize| -> Vec<String> {
                (0..len)
                    .map(|_| vocab[rng.gen_range(0..vocab.len())].to_string())
                    .collect()
            };
            let cand = mk(&mut rng, len_a);
            let reference = mk(&mut rng, len_b);
            let expect = brute_force_lcs(&cand, &reference) as f32 / reference.len() as f32;
            let got = rouge_l_recall(&cand.join(" "), &reference.join(" ")).unwrap();
            assert_eq!(got, expect, "cand={cand:?} ref={reference:?}");
        }
    }

    #[test]
    fn rouge_is_monotone_under_appending_matched_reference_tokens() {
        let cand = "ice melts in the north every year";
        let base = rouge_l_recall(cand, "ice melts").unwrap();
        let more = rouge_l_recall(cand, "ice melts north").unwrap();
        // Recall denominator grows but the LCS keeps pace when the added
        // reference token appears later in the candidate.
        assert!(more >= base.min(1.0) - 1e-6 || more > 0.0);
        assert_eq!(rouge_l_recall(cand, "ice melts north").unwrap(), 1.0);
    }

    #[test]
    fn normalized_prob_is_geometric_mean() {
        // Constant per-token probability p gives exactly p at any length.
        let p: f32 = 0.37;
        for len in [1usize, 2, 7, 29] {
            let logprobs = vec![p.ln(); len];
            let got = normalized_prob_from_logprobs(&logprobs);
            assert!((got - p).abs() < 1e-6, "len {len}: {got}");
        }
    }

    #[test]
    fn normalized_prob_single_token_is_that_probability() {
        let lp = (0.125f32).ln();
        assert!((normalized_prob_from_logprobs(&[lp]) - 0.125).abs() < 1e-6);
    }

    #[test]
    fn normalized_prob_two_token_case_matches_sqrt_of_product() {
        let (p1, p2) = (0.4f64, 0.09f64);
        let logprobs = [p1.ln() as f32, p2.ln() as f32];
        let via_fn = normalized_prob_f64(&logprobs);
        // Direct product then square root, in f64 from the same logprobs.
        let direct = ((logprobs[0] as f64).exp() * (logprobs[1] as f64).exp()).sqrt();
        assert!((via_fn - direct).abs() / direct < 1e-9, "{via_fn} vs {direct}");
        let as_f32 = normalized_prob_from_logprobs(&logprobs) as f64;
        assert!((as_f32 - direct).abs() / direct < 1e-6);
    }

    #[test]
    fn truth_ratio_closed_form_cases() {
        // All perturbations equal the paraphrase score: R = 1, metric 0.
        assert_eq!(truth_ratio_from_scores(0.2, &[0.2; 5]), 0.0);
        // Each perturbation at half the paraphrase score: metric 0.5.
        assert_eq!(truth_ratio_from_scores(0.2, &[0.1; 5]), 0.5);
        // Perturbations far above the paraphrase: clamped at 0.
        assert_eq!(truth_ratio_from_scores(0.01, &[0.9; 5]), 0.0);
    }

    #[test]
    fn truth_ratio_moves_the_right_way() {
        let base = truth_ratio_from_scores(0.4, &[0.1, 0.1, 0.1, 0.1, 0.1]);
        let worse_perts = truth_ratio_from_scores(0.4, &[0.2, 0.1, 0.1, 0.1, 0.1]);
        assert!(worse_perts < base);
        let better_tilde = truth_ratio_from_scores(0.5, &[0.1, 0.1, 0.1, 0.1, 0.1]);
        assert!(better_tilde > base);
    }

    #[test]
    fn bundle_validation_rejects_malformed_bundles() {
        let good = TruthRatioBundle {
            qa_id: "x".into(),
            paraphrase: "p".into(),
            perturbations: vec!["a".into(), "b".into(), "c".into(), "d".into(), "e".into()],
            provenance: "mock".into(),
        };
        assert!(good.validate().is_ok());
        let mut four = good.clone();
        four.perturbations.pop();
        assert!(four.validate().is_err());
        let mut echo = good.clone();
        echo.perturbations[2] = "p".into();
        assert!(echo.validate().is_err());
    }

    #[test]
    fn judge_aggregate_counts_and_exclusions() {
        use JudgeLabelValue::*;
        let (m, c) = judge_label_aggregate(&[Same, Same, Different, Contradictory]).unwrap();
        assert_eq!((m, c), (0.5, 0.25));
        let (m, c) = judge_label_aggregate(&[Different, Different]).unwrap();
        assert_eq!((m, c), (0.0, 0.0));
        let (m, c) = judge_label_aggregate(&[Same, Same]).unwrap();
        assert_eq!((m, c), (1.0, 0.0));
        // Unavailable rows leave the denominator.
        let (m, c) = judge_label_aggregate(&[Same, Unavailable]).unwrap();
        assert_eq!((m, c), (1.0, 0.0));
        assert!(judge_label_aggregate(&[Unavailable, Unavailable]).is_none());
        assert!(m + c <= 1.0);
    }

    #[test]
    fn markdown_arrows_flip_for_false_claims() {
        let rows = vec![("Baseline".to_string(), Aggregates::default())];
        let true_table = render_markdown_table(&rows, TablePolarity::TrueClaims);
        let false_table = render_markdown_table(&rows, TablePolarity::FalseClaims);
        assert!(true_table.contains("ROUGE-L \u{2191}"));
        assert!(true_table.contains("GPT-Cont \u{2193}"));
        assert!(false_table.contains("ROUGE-L \u{2193}"));
        assert!(false_table.contains("GPT-Cont \u{2191}"));
    }
}
