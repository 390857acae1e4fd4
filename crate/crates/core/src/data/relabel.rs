//! Relabeling rules for the two claim corpora. Mixed worker votes go to
//! the judge; nothing is ever silently labeled.

use crate::judge::{JudgeOps, StanceLabel};

use super::{
    AdjudicatedBy, ClaimRecord, CurationError, FinalLabel, RawClaim, WorkerVote,
};

/// supported -> true, refuted -> false, not-enough-info -> dropped.
pub fn relabel_climate_fever(records: &[RawClaim]) -> Result<Vec<ClaimRecord>, CurationError> {
    records
        .iter()
        .map(|r| {
            let final_label = match r.raw_label.as_str() {
                "supported" => FinalLabel::True,
                "refuted" => FinalLabel::False,
                "not-enough-info" => FinalLabel::Dropped,
                other => {
                    return Err(CurationError::Ingestion {
                        id: r.id.clone(),
                        raw: other.to_string(),
                    })
                }
            };
            Ok(ClaimRecord {
                id: r.id.clone(),
                text: r.text.clone(),
                source: r.source,
                raw_label: r.raw_label.clone(),
                worker_votes: r.worker_votes.clone(),
                final_label,
                adjudicated_by: AdjudicatedBy::Rule,
                review_reason: None,
            })
        })
        .collect()
}

/// Worker-vote rules: all votes in {agree, neutral} relabel true; all in
/// {disagree, neutral} relabel false; genuine splits go to the judge. An
/// all-neutral set satisfies both rules, so it takes the first rule (true)
/// and gets flagged for review.
pub fn relabel_gw_stance(
    record: &RawClaim,
    judge: &JudgeOps<'_>,
) -> Result<ClaimRecord, CurationError> {
    let votes = record
        .worker_votes
        .as_ref()
        .filter(|v| !v.is_empty())
        .ok_or_else(|| CurationError::NoVotes {
            id: record.id.clone(),
        })?;
    let agrees = votes.iter().filter(|&&v| v == WorkerVote::Agree).count();
    let disagrees = votes.iter().filter(|&&v| v == WorkerVote::Disagree).count();

    let (final_label, adjudicated_by, review_reason) = if agrees > 0 && disagrees > 0 {
        let stance = judge
            .stance(&record.text)
            .map_err(|e| CurationError::JudgePending {
                id: record.id.clone(),
                cause: e.to_string(),
            })?;
        let label = match stance {
            StanceLabel::Agree => FinalLabel::True,
            StanceLabel::Disagree => FinalLabel::False,
            StanceLabel::Neutral => FinalLabel::Dropped,
        };
        (label, AdjudicatedBy::Judge, None)
    } else if agrees > 0 {
        (FinalLabel::True, AdjudicatedBy::Rule, None)
    } else if disagrees > 0 {
        (FinalLabel::False, AdjudicatedBy::Rule, None)
    } else {
        // All neutral: both stated rules match; rule order says true.
        (
            FinalLabel::True,
            AdjudicatedBy::Rule,
            Some("all worker votes neutral; labeled true by rule order".to_string()),
        )
    };

    Ok(ClaimRecord {
        id: record.id.clone(),
        text: record.text.clone(),
        source: record.source,
        raw_label: record.raw_label.clone(),
        worker_votes: record.worker_votes.clone(),
        final_label,
        adjudicated_by,
        review_reason,
    })
}
