//! Deterministic mock judge: verdicts are a pure function of the request,
//! so the full pipeline runs in CI without network access. Individual
//! payloads can be scripted to pin fixture behavior.

use std::collections::HashMap;

use crate::util::word_tokens;

use super::{parse_raw, Judge, JudgeError, JudgeRequest, JudgeTask, JudgeVerdict};

#[derive(Default)]
pub struct MockJudge {
    /// (task, first payload) -> raw reply override.
    scripted: HashMap<(JudgeTask, String), String>,
}

impl MockJudge {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn script(&mut self, task: JudgeTask, payload: &str, reply: &str) {
        self.scripted
            .insert((task, payload.to_string()), reply.to_string());
    }

    fn reply(&self, req: &JudgeRequest) -> String {
        if let Some(r) = self.scripted.get(&(req.task, req.payloads[0].clone())) {
            return r.clone();
        }
        match req.task {
            JudgeTask::Compare => {
                compare_rule(&req.payloads[0], &req.payloads[1]).to_string()
            }
            JudgeTask::Stance => stance_rule(&req.payloads[0]).to_string(),
            JudgeTask::QuestionGen => {
                let lead: Vec<&str> = req.payloads[0].split_whitespace().take(6).collect();
                format!("What do we know about {}?", lead.join(" ").to_lowercase())
            }
            JudgeTask::Paraphrase => paraphrase_rule(&req.payloads[0]),
            JudgeTask::Perturb => {
                let n: usize = req.payloads[1].parse().unwrap_or(5);
                perturb_rule(&req.payloads[0], n).join("\n")
            }
        }
    }
}

impl Judge for MockJudge {
    fn complete(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
        if req.payloads.is_empty() || req.payloads[0].is_empty() {
            return Err(JudgeError::EmptyPayload);
        }
        let raw = self.reply(req);
        Ok(JudgeVerdict {
            task: req.task,
            raw_text: raw.clone(),
            parsed: parse_raw(req.task, &raw),
        })
    }

    fn model_name(&self) -> &str {
        "mock"
    }
}

/// Token-overlap rule: identical token sequences are "same"; sequences
/// that align on at least half their tokens but differ somewhere assert
/// different content about the same thing, hence "contradictory";
/// anything else is "different".
fn compare_rule(generated: &str, truth: &str) -> &'static str {
    let a = word_tokens(generated);
    let b = word_tokens(truth);
    if a == b {
        return "same";
    }
    let lcs = lcs_len(&a, &b);
    let longest = a.len().max(b.len()).max(1);
    if lcs as f32 / longest as f32 >= 0.5 {
        "contradictory"
    } else {
        "different"
    }
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let (m, n) = (a.len(), b.len());
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

const DENIAL_MARKERS: &[&str] = &[
    "hoax", "scam", "scare", "myth", "fraud", "plot", "religion", "alarmis",
    "not caused", "no warming", "is tiny", "job killer", "manufactured",
];

fn stance_rule(claim: &str) -> &'static str {
    let lower = claim.to_lowercase();
    if DENIAL_MARKERS.iter().any(|m| lower.contains(m)) {
        "disagree"
    } else {
        "agree"
    }
}

fn paraphrase_rule(answer: &str) -> String {
    // "The X of Y is Z." -> "Z is the X of Y." keeps the content and moves
    // the words around; anything else gets a reworded lead-in.
    let trimmed = answer.trim_end_matches('.');
    if let Some(rest) = trimmed.strip_prefix("The ") {
        if let Some((head, value)) = rest.split_once(" is ") {
            return format!("{value} is the {head}.");
        }
    }
    format!("Put differently, {}{}", lowercase_first(trimmed), ".")
}

fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

const CONTRADICTION_PREFIXES: &[&str] = &["no", "anti", "non", "counter", "pseudo", "quasi", "un"];

fn perturb_rule(paraphrase: &str, n: usize) -> Vec<String> {
    // Replace the last word with a marked variant: structure preserved,
    // content contradicted.
    let trimmed = paraphrase.trim_end_matches('.');
    let mut words: Vec<&str> = trimmed.split_whitespace().collect();
    let last = words.pop().unwrap_or("thing").to_string();
    let stem = words.join(" ");
    (0..n)
        .map(|i| {
            let marker = CONTRADICTION_PREFIXES[i % CONTRADICTION_PREFIXES.len()];
            if stem.is_empty() {
                format!("{marker}-{last}.")
            } else {
                format!("{stem} {marker}-{last}.")
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::{CompareLabel, JudgeOps, StanceLabel};

    #[test]
    fn identical_strings_compare_same() {
        let judge = MockJudge::new();
        let ops = JudgeOps::new(&judge);
        let label = ops.compare("The sky is wide.", "The sky is wide.").unwrap();
        assert_eq!(label, CompareLabel::Same);
    }

    #[test]
    fn value_swap_compares_contradictory() {
        let judge = MockJudge::new();
        let ops = JudgeOps::new(&judge);
        let label = ops
            .compare(
                "sea levels rose eight inches",
                "sea levels rose only 4.2 millimeters",
            )
            .unwrap();
        assert_eq!(label, CompareLabel::Contradictory);
    }

    #[test]
    fn unrelated_strings_compare_different() {
        let judge = MockJudge::new();
        let ops = JudgeOps::new(&judge);
        let label = ops
            .compare("the committee meets on tuesdays", "rainfall peaked in april")
            .unwrap();
        assert_eq!(label, CompareLabel::Different);
    }

    #[test]
    fn stance_rule_flags_denial_phrases() {
        let judge = MockJudge::new();
        let ops = JudgeOps::new(&judge);
        assert_eq!(
            ops.stance("Global warming is a hoax").unwrap(),
            StanceLabel::Disagree
        );
        assert_eq!(
            ops.stance("Warming oceans drive stronger storms").unwrap(),
            StanceLabel::Agree
        );
    }

    #[test]
    fn paraphrase_differs_from_input() {
        let judge = MockJudge::new();
        let ops = JudgeOps::new(&judge);
        for input in ["The capital of Atland is Morro.", "Rivers feed the delta."] {
            let p = ops.paraphrase(input, 0).unwrap();
            assert_ne!(p, input);
            assert!(!p.is_empty());
        }
    }

    #[test]
    fn identity_paraphrase_is_rejected_and_regenerated() {
        let mut judge = MockJudge::new();
        // Script the echo so the guard has something to reject; the retry
        // carries a bumped seed but the scripted reply keeps echoing, so
        // the op must end unavailable rather than return the input.
        judge.script(JudgeTask::Paraphrase, "echo me", "echo me");
        let ops = JudgeOps::new(&judge);
        let err = ops.paraphrase("echo me", 0).unwrap_err();
        assert!(err.to_string().contains("identical"));
    }

    #[test]
    fn perturb_yields_n_distinct_variants() {
        let judge = MockJudge::new();
        let ops = JudgeOps::new(&judge);
        let p = "Morro is the capital of Atland.";
        let variants = ops.perturb(p, 5, 0).unwrap();
        assert_eq!(variants.len(), 5);
        for (i, v) in variants.iter().enumerate() {
            assert_ne!(v, p);
            for w in &variants[..i] {
                assert_ne!(v, w);
            }
        }
    }

    #[test]
    fn scripted_replies_override_rules() {
        let mut judge = MockJudge::new();
        judge.script(JudgeTask::Compare, "alpha", "contradictory");
        let ops = JudgeOps::new(&judge);
        assert_eq!(
            ops.compare("alpha", "alpha").unwrap(),
            CompareLabel::Contradictory
        );
    }
}
