//! Dataset JSONL export/import, the review queue, and raw-source loaders
//! with a column-mapping config.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClaimSource, CurationError, QAPair, RawClaim, WorkerVote};

/// One record per line; the review queue uses the same schema plus
/// `review_reason`.
pub fn write_jsonl(pairs: &[QAPair], path: &Path) -> Result<(), CurationError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    for p in pairs {
        writeln!(f, "{}", serde_json::to_string(p)?)?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QAPair>, CurationError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CurationError::from))
        .collect()
}

/// Flagged pairs only, with their reasons; humans work this file, the
/// pipeline never edits questions on its own.
pub fn write_review_queue(pairs: &[QAPair], path: &Path) -> Result<usize, CurationError> {
    let flagged: Vec<&QAPair> = pairs.iter().filter(|p| p.needs_review).collect();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    for p in &flagged {
        writeln!(f, "{}", serde_json::to_string(p)?)?;
    }
    Ok(flagged.len())
}

/// Maps source columns/fields onto the claim schema. `votes` holds a
/// separator-joined vote list like "agree;neutral".
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnMap {
    pub id: String,
    pub text: String,
    pub label: String,
    pub votes: Option<String>,
    #[serde(default = "default_vote_sep")]
    pub vote_separator: String,
}

fn default_vote_sep() -> String {
    ";".to_string()
}

fn parse_votes(raw: &str, sep: &str) -> Vec<WorkerVote> {
    raw.split(sep.chars().next().unwrap_or(';'))
        .filter_map(|v| match v.trim().to_lowercase().as_str() {
            "agree" | "agrees" => Some(WorkerVote::Agree),
            "disagree" | "disagrees" => Some(WorkerVote::Disagree),
            "neutral" => Some(WorkerVote::Neutral),
            _ => None,
        })
        .collect()
}

pub fn load_claims_csv(
    path: &Path,
    source: ClaimSource,
    map: &ColumnMap,
) -> Result<Vec<RawClaim>, CurationError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col(&map.id);
    let text_col = col(&map.text).ok_or_else(|| {
        CurationError::Contract(format!("csv missing text column {:?}", map.text))
    })?;
    let label_col = col(&map.label).ok_or_else(|| {
        CurationError::Contract(format!("csv missing label column {:?}", map.label))
    })?;
    let votes_col = map.votes.as_ref().and_then(|v| col(v));

    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let id = id_col
            .and_then(|c| record.get(c))
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("row-{i}"));
        let votes = votes_col
            .and_then(|c| record.get(c))
            .map(|raw| parse_votes(raw, &map.vote_separator))
            .filter(|v| !v.is_empty());
        out.push(RawClaim {
            id,
            text: record.get(text_col).unwrap_or_default().to_string(),
            source,
            raw_label: record.get(label_col).unwrap_or_default().to_string(),
            worker_votes: votes,
        });
    }
    Ok(out)
}

pub fn load_claims_jsonl(
    path: &Path,
    source: ClaimSource,
    map: &ColumnMap,
) -> Result<Vec<RawClaim>, CurationError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)?;
        let id = v[&map.id]
            .as_str()
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("row-{i}"));
        let votes = map
            .votes
            .as_ref()
            .and_then(|col| v[col].as_str())
            .map(|raw| parse_votes(raw, &map.vote_separator))
            .filter(|vs| !vs.is_empty());
        out.push(RawClaim {
            id,
            text: v[&map.text].as_str().unwrap_or_default().to_string(),
            source,
            raw_label: v[&map.label].as_str().unwrap_or_default().to_string(),
            worker_votes: votes,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, TruthLabel};
    use proptest::prelude::*;

    fn pair(id: &str, review: bool) -> QAPair {
        QAPair {
            id: id.to_string(),
            question: format!("q-{id}"),
            answer: format!("a-{id}"),
            label: TruthLabel::True,
            source: "synthetic".to_string(),
            split: Split::Train,
            needs_review: review,
            review_reason: review.then(|| "flagged".to_string()),
        }
    }

    #[test]
    fn jsonl_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.jsonl");
        let pairs = vec![pair("a", false), pair("b", true)];
        write_jsonl(&pairs, &path).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), pairs);
    }

    #[test]
    fn review_queue_holds_only_flagged_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("review.jsonl");
        let n = write_review_queue(&[pair("a", false), pair("b", true)], &path).unwrap();
        assert_eq!(n, 1);
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].id, "b");
        assert!(back[0].review_reason.is_some());
    }

    #[test]
    fn csv_loader_maps_columns_and_votes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("claims.csv");
        std::fs::write(
            &path,
            "claim_id,claim,verdict,worker\nc1,the seas rise,supported,\nc2,warming stopped,refuted,agree;disagree\n",
        )
        .unwrap();
        let map = ColumnMap {
            id: "claim_id".to_string(),
            text: "claim".to_string(),
            label: "verdict".to_string(),
            votes: Some("worker".to_string()),
            vote_separator: ";".to_string(),
        };
        let claims = load_claims_csv(&path, ClaimSource::ClimateFever, &map).unwrap();
        assert_eq!(claims.len(), 2);
        assert_eq!(claims[0].id, "c1");
        assert!(claims[0].worker_votes.is_none());
        assert_eq!(
            claims[1].worker_votes,
            Some(vec![WorkerVote::Agree, WorkerVote::Disagree])
        );
    }

    proptest! {
        #[test]
        fn arbitrary_pairs_round_trip(
            id in "[a-z0-9-]{1,12}",
            question in "[ -~]{0,60}",
            answer in "[ -~]{0,60}",
            is_true in any::<bool>(),
            test_split in any::<bool>(),
            review in any::<bool>(),
        ) {
            let p = QAPair {
                id,
                question,
                answer,
                label: if is_true { TruthLabel::True } else { TruthLabel::False },
                source: "gw-stance".to_string(),
                split: if test_split { Split::Test } else { Split::Train },
                needs_review: review,
                review_reason: review.then(|| "reason".to_string()),
            };
            let line = serde_json::to_string(&p).unwrap();
            let back: QAPair = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(p, back);
        }
    }
}
