//! Client layer for the external chat-completion judge: stance
//! adjudication, question generation, paraphrase/perturbation generation,
//! and same/different/contradictory labeling. Every call goes through a
//! [`Judge`] implementation, so the deterministic mock, the cache wrapper,
//! and the HTTP client are interchangeable.

pub mod cache;
pub mod http;
pub mod mock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge payload is empty")]
    EmptyPayload,
    #[error("judge transport failure: {0}")]
    Transport(String),
    #[error("judge verdict unavailable after {attempts} attempts: {cause}")]
    Unavailable { attempts: usize, cause: String },
    #[error("judge cache io: {0}")]
    CacheIo(#[from] std::io::Error),
}

/// Total attempts (first try included) before an op reports unavailable.
pub const MAX_ATTEMPTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeTask {
    Stance,
    QuestionGen,
    Paraphrase,
    Perturb,
    Compare,
}

impl JudgeTask {
    /// Prompt file (with a front-matter version line) for the task. The
    /// full text is folded into the request hash, so editing a prompt
    /// invalidates cached verdicts.
    pub fn prompt(&self) -> &'static str {
        match self {
            JudgeTask::Stance => include_str!("prompts/stance.txt"),
            JudgeTask::QuestionGen => include_str!("prompts/question_gen.txt"),
            JudgeTask::Paraphrase => include_str!("prompts/paraphrase.txt"),
            JudgeTask::Perturb => include_str!("prompts/perturb.txt"),
            JudgeTask::Compare => include_str!("prompts/compare.txt"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StanceLabel {
    Agree,
    Disagree,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompareLabel {
    Same,
    Different,
    Contradictory,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub task: JudgeTask,
    pub payloads: Vec<String>,
    pub temperature: f32,
    /// Distinguishes resampled generations in the cache; label tasks use 0.
    pub seed: u64,
    pub model: String,
}

impl JudgeRequest {
    /// Stable digest over task, payloads, prompt text, model, temperature,
    /// and seed.
    pub fn request_hash(&self) -> String {
        let canon = serde_json::json!({
            "task": self.task,
            "payloads": self.payloads,
            "prompt": self.task.prompt(),
            "model": self.model,
            "temperature": self.temperature,
            "seed": self.seed,
        });
        sha256_hex(canon.to_string().as_bytes())
    }

    /// Chat messages in the generic completion shape.
    pub fn messages(&self) -> Vec<(String, String)> {
        let user = match self.task {
            JudgeTask::Compare => format!(
                "Generated: {}\nGround truth: {}\nLabel:",
                self.payloads[0], self.payloads[1]
            ),
            JudgeTask::Perturb => format!(
                "Paraphrase: {}\nCount: {}",
                self.payloads[0], self.payloads[1]
            ),
            _ => self.payloads[0].clone(),
        };
        vec![
            ("system".to_string(), self.task.prompt().to_string()),
            ("user".to_string(), user),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParsedVerdict {
    Stance(StanceLabel),
    Compare(CompareLabel),
    Texts(Vec<String>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub task: JudgeTask,
    pub raw_text: String,
    /// `None` when the raw reply could not be parsed; never coerced.
    pub parsed: Option<ParsedVerdict>,
}

pub trait Judge: Send + Sync {
    fn complete(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError>;
    fn model_name(&self) -> &str;
}

/// Parses a raw judge reply according to the task's contract.
pub fn parse_raw(task: JudgeTask, raw: &str) -> Option<ParsedVerdict> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return None;
    }
    match task {
        JudgeTask::Stance => {
            match trimmed.to_lowercase().trim_matches(|c: char| !c.is_alphanumeric()) {
                "agree" | "agrees" => Some(ParsedVerdict::Stance(StanceLabel::Agree)),
                "disagree" | "disagrees" => Some(ParsedVerdict::Stance(StanceLabel::Disagree)),
                "neutral" | "unclear" => Some(ParsedVerdict::Stance(StanceLabel::Neutral)),
                _ => None,
            }
        }
        JudgeTask::Compare => {
            match trimmed.to_lowercase().trim_matches(|c: char| !c.is_alphanumeric()) {
                "same" => Some(ParsedVerdict::Compare(CompareLabel::Same)),
                "different" => Some(ParsedVerdict::Compare(CompareLabel::Different)),
                "contradictory" => Some(ParsedVerdict::Compare(CompareLabel::Contradictory)),
                _ => None,
            }
        }
        JudgeTask::QuestionGen | JudgeTask::Paraphrase => {
            Some(ParsedVerdict::Texts(vec![trimmed.to_string()]))
        }
        JudgeTask::Perturb => {
            let lines: Vec<String> = trimmed
                .lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect();
            if lines.is_empty() {
                None
            } else {
                Some(ParsedVerdict::Texts(lines))
            }
        }
    }
}

/// Task-level operations with retry and explicit unavailability.
pub struct JudgeOps<'a> {
    judge: &'a dyn Judge,
}

impl<'a> JudgeOps<'a> {
    pub fn new(judge: &'a dyn Judge) -> Self {
        Self { judge }
    }

    fn request(&self, task: JudgeTask, payloads: Vec<String>, temperature: f32, seed: u64) -> JudgeRequest {
        JudgeRequest {
            task,
            payloads,
            temperature,
            seed,
            model: self.judge.model_name().to_string(),
        }
    }

    /// Labels generated-vs-truth factual agreement. Retries unparseable
    /// replies up to [`MAX_ATTEMPTS`] total tries.
    pub fn compare(&self, generated: &str, truth: &str) -> Result<CompareLabel, JudgeError> {
        if generated.is_empty() || truth.is_empty() {
            return Err(JudgeError::EmptyPayload);
        }
        let mut cause = String::new();
        for attempt in 0..MAX_ATTEMPTS {
            let req = self.request(
                JudgeTask::Compare,
                vec![generated.to_string(), truth.to_string()],
                0.0,
                attempt as u64,
            );
            match self.judge.complete(&req) {
                Ok(v) => match v.parsed {
                    Some(ParsedVerdict::Compare(label)) => return Ok(label),
                    _ => cause = format!("unparseable reply: {:?}", v.raw_text),
                },
                Err(e) => cause = e.to_string(),
            }
        }
        Err(JudgeError::Unavailable {
            attempts: MAX_ATTEMPTS,
            cause,
        })
    }

    /// Stance of a claim toward the climate-concern proposition.
    pub fn stance(&self, claim: &str) -> Result<StanceLabel, JudgeError> {
        if claim.is_empty() {
            return Err(JudgeError::EmptyPayload);
        }
        let mut cause = String::new();
        for attempt in 0..MAX_ATTEMPTS {
            let req = self.request(JudgeTask::Stance, vec![claim.to_string()], 0.0, attempt as u64);
            match self.judge.complete(&req) {
                Ok(v) => match v.parsed {
                    Some(ParsedVerdict::Stance(label)) => return Ok(label),
                    _ => cause = format!("unparseable reply: {:?}", v.raw_text),
                },
                Err(e) => cause = e.to_string(),
            }
        }
        Err(JudgeError::Unavailable {
            attempts: MAX_ATTEMPTS,
            cause,
        })
    }

    /// A question that could plausibly yield the claim as a response.
    pub fn generate_question(&self, claim: &str, seed: u64) -> Result<String, JudgeError> {
        if claim.is_empty() {
            return Err(JudgeError::EmptyPayload);
        }
        let mut cause = String::new();
        for attempt in 0..MAX_ATTEMPTS {
            let req = self.request(
                JudgeTask::QuestionGen,
                vec![claim.to_string()],
                0.7,
                seed.wrapping_add(attempt as u64),
            );
            match self.judge.complete(&req) {
                Ok(v) => match v.parsed {
                    Some(ParsedVerdict::Texts(texts)) if !texts[0].is_empty() => {
                        return Ok(texts[0].clone())
                    }
                    _ => cause = format!("empty or unparseable reply: {:?}", v.raw_text),
                },
                Err(e) => cause = e.to_string(),
            }
        }
        Err(JudgeError::Unavailable {
            attempts: MAX_ATTEMPTS,
            cause,
        })
    }

    /// Rewords an answer; outputs identical to the input are rejected and
    /// regenerated under a bumped seed.
    pub fn paraphrase(&self, answer: &str, seed: u64) -> Result<String, JudgeError> {
        if answer.is_empty() {
            return Err(JudgeError::EmptyPayload);
        }
        let mut cause = String::new();
        for attempt in 0..MAX_ATTEMPTS {
            let req = self.request(
                JudgeTask::Paraphrase,
                vec![answer.to_string()],
                0.7,
                seed.wrapping_add(attempt as u64),
            );
            match self.judge.complete(&req) {
                Ok(v) => match v.parsed {
                    Some(ParsedVerdict::Texts(texts)) if !texts[0].is_empty() => {
                        if texts[0] == answer {
                            cause = "paraphrase identical to input".to_string();
                            continue;
                        }
                        return Ok(texts[0].clone());
                    }
                    _ => cause = format!("empty or unparseable reply: {:?}", v.raw_text),
                },
                Err(e) => cause = e.to_string(),
            }
        }
        Err(JudgeError::Unavailable {
            attempts: MAX_ATTEMPTS,
            cause,
        })
    }

    /// Exactly `n` pairwise-distinct perturbations of a paraphrase, each
    /// distinct from it. Distinct outputs accumulate across retries; fewer
    /// than `n` after the attempt budget means the bundle is incomplete.
    pub fn perturb(&self, paraphrase: &str, n: usize, seed: u64) -> Result<Vec<String>, JudgeError> {
        if paraphrase.is_empty() {
            return Err(JudgeError::EmptyPayload);
        }
        let mut distinct: Vec<String> = Vec::new();
        let mut cause = String::new();
        for attempt in 0..MAX_ATTEMPTS {
            let req = self.request(
                JudgeTask::Perturb,
                vec![paraphrase.to_string(), n.to_string()],
                0.7,
                seed.wrapping_add(attempt as u64),
            );
            match self.judge.complete(&req) {
                Ok(v) => match v.parsed {
                    Some(ParsedVerdict::Texts(texts)) => {
                        for t in texts {
                            if t != paraphrase && !distinct.contains(&t) {
                                distinct.push(t);
                            }
                        }
                        if distinct.len() >= n {
                            distinct.truncate(n);
                            return Ok(distinct);
                        }
                        cause = format!("only {} distinct perturbations", distinct.len());
                    }
                    _ => cause = format!("unparseable reply: {:?}", v.raw_text),
                },
                Err(e) => cause = e.to_string(),
            }
        }
        Err(JudgeError::Unavailable {
            attempts: MAX_ATTEMPTS,
            cause,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Garbage;
    impl Judge for Garbage {
        fn complete(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
            Ok(JudgeVerdict {
                task: req.task,
                raw_text: "~~~".to_string(),
                parsed: parse_raw(req.task, "~~~"),
            })
        }
        fn model_name(&self) -> &str {
            "garbage"
        }
    }

    #[test]
    fn unparseable_replies_exhaust_retries_to_unavailable() {
        let judge = Garbage;
        let ops = JudgeOps::new(&judge);
        let err = ops.compare("a", "b").unwrap_err();
        match err {
            JudgeError::Unavailable { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn request_hash_is_stable_and_input_sensitive() {
        let base = JudgeRequest {
            task: JudgeTask::Compare,
            payloads: vec!["x".into(), "y".into()],
            temperature: 0.0,
            seed: 0,
            model: "m".into(),
        };
        assert_eq!(base.request_hash(), base.request_hash());
        let mut other = base.clone();
        other.payloads[1] = "z".into();
        assert_ne!(base.request_hash(), other.request_hash());
        let mut reseeded = base.clone();
        reseeded.seed = 1;
        assert_ne!(base.request_hash(), reseeded.request_hash());
    }

    #[test]
    fn parse_accepts_label_words_with_noise() {
        assert_eq!(
            parse_raw(JudgeTask::Compare, " Same.\n"),
            Some(ParsedVerdict::Compare(CompareLabel::Same))
        );
        assert_eq!(
            parse_raw(JudgeTask::Stance, "DISAGREES"),
            Some(ParsedVerdict::Stance(StanceLabel::Disagree))
        );
        assert_eq!(parse_raw(JudgeTask::Compare, "kind of the same"), None);
        assert_eq!(parse_raw(JudgeTask::Paraphrase, "  "), None);
    }

    #[test]
    fn prompt_files_carry_version_front_matter() {
        for task in [
            JudgeTask::Stance,
            JudgeTask::QuestionGen,
            JudgeTask::Paraphrase,
            JudgeTask::Perturb,
            JudgeTask::Compare,
        ] {
            assert!(task.prompt().starts_with("version: "), "{task:?}");
        }
    }
}
