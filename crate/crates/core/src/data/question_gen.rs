//! Judge-backed question generation with a frame-leak detector. Flagged
//! pairs go to the review queue for humans; detection is automated,
//! correction is not.

use crate::judge::JudgeOps;

use super::{ClaimRecord, CurationError, FinalLabel, QADraft, TruthLabel};

/// Loaded-framing markers; a generated question containing any of them is
/// exported to the review queue instead of being silently accepted.
#[derive(Debug, Clone)]
pub struct FrameLeakConfig {
    pub markers: Vec<String>,
}

impl Default for FrameLeakConfig {
    fn default() -> Self {
        Self {
            markers: [
                "conspiracy",
                "hoax",
                "theory regarding the motives",
                "alarmist",
                "scare",
                "so-called",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

impl FrameLeakConfig {
    pub fn leaked_marker(&self, question: &str) -> Option<&str> {
        let lower = question.to_lowercase();
        self.markers
            .iter()
            .find(|m| lower.contains(m.as_str()))
            .map(|m| m.as_str())
    }
}

/// Asks the judge for a neutral question yielding the claim as an answer.
/// Judge failures leave the claim pending; frame leaks flag the pair.
pub fn generate_question(
    claim: &ClaimRecord,
    judge: &JudgeOps<'_>,
    leak: &FrameLeakConfig,
    seed: u64,
) -> Result<QADraft, CurationError> {
    let label = match claim.final_label {
        FinalLabel::True => TruthLabel::True,
        FinalLabel::False => TruthLabel::False,
        FinalLabel::Dropped => {
            return Err(CurationError::Contract(format!(
                "claim {} was dropped; no question to generate",
                claim.id
            )))
        }
    };
    let question = judge
        .generate_question(&claim.text, seed)
        .map_err(|e| CurationError::JudgePending {
            id: claim.id.clone(),
            cause: e.to_string(),
        })?;
    let (mut needs_review, mut review_reason) = (false, claim.review_reason.clone());
    if let Some(marker) = leak.leaked_marker(&question) {
        needs_review = true;
        review_reason = Some(format!("frame leak: question contains {marker:?}"));
    } else if review_reason.is_some() {
        needs_review = true;
    }
    Ok(QADraft {
        id: claim.id.clone(),
        question,
        answer: claim.text.clone(),
        label,
        source: format!("{:?}", claim.source).to_lowercase(),
        needs_review,
        review_reason,
    })
}
