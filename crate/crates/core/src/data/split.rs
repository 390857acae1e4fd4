//! Deterministic, label-stratified train/test splitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{CurationError, QADraft, QAPair, Split, TruthLabel};

/// Shuffles under the seed and assigns round(ratio * N) drafts to train,
/// stratified so each label's train share matches the overall ratio to
/// within one item.
pub fn split_dataset(
    drafts: Vec<QADraft>,
    seed: u64,
    ratio: f32,
) -> Result<Vec<QAPair>, CurationError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CurationError::BadRatio(ratio));
    }
    let n = drafts.len();
    if n < 5 {
        return Err(CurationError::DegenerateSplit { n });
    }
    let total_train = (ratio * n as f32).round() as usize;

    let mut groups: Vec<Vec<QADraft>> = vec![Vec::new(), Vec::new()];
    for d in drafts {
        let g = match d.label {
            TruthLabel::True => 0,
            TruthLabel::False => 1,
        };
        groups[g].push(d);
    }

    // Largest-remainder allocation of train slots across label groups.
    let ideals: Vec<f32> = groups.iter().map(|g| ratio * g.len() as f32).collect();
    let mut takes: Vec<usize> = ideals.iter().map(|&x| x.floor() as usize).collect();
    let mut leftover = total_train.saturating_sub(takes.iter().sum());
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = ideals[a] - ideals[a].floor();
        let rb = ideals[b] - ideals[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &g in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        if takes[g] < groups[g].len() {
            takes[g] += 1;
            leftover -= 1;
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for (g, group) in groups.into_iter().enumerate() {
        let mut group = group;
        group.shuffle(&mut rng);
        for (i, draft) in group.into_iter().enumerate() {
            let split = if i < takes[g] { Split::Train } else { Split::Test };
            out.push(draft.with_split(split));
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draft(id: usize, label: TruthLabel) -> QADraft {
        QADraft {
            id: format!("d{id:04}"),
            question: format!("q{id}"),
            answer: format!("a{id}"),
            label,
            source: "synthetic".to_string(),
            needs_review: false,
            review_reason: None,
        }
    }

    fn drafts(n_true: usize, n_false: usize) -> Vec<QADraft> {
        let mut v = Vec::new();
        for i in 0..n_true {
            v.push(draft(i, TruthLabel::True));
        }
        for i in 0..n_false {
            v.push(draft(n_true + i, TruthLabel::False));
        }
        v
    }

    #[test]
    fn ten_items_split_eight_two() {
        let pairs = split_dataset(drafts(6, 4), 1, 0.8).unwrap();
        let train = pairs.iter().filter(|p| p.split == Split::Train).count();
        assert_eq!(train, 8);
        assert_eq!(pairs.len() - train, 2);
    }

    #[test]
    fn same_seed_gives_identical_assignment() {
        let a = split_dataset(drafts(30, 20), 42, 0.8).unwrap();
        let b = split_dataset(drafts(30, 20), 42, 0.8).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(drafts(30, 20), 43, 0.8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stratification_keeps_label_balance() {
        // 100 items with 40 false: the test split must hold 8 +/- 1 false.
        let pairs = split_dataset(drafts(60, 40), 7, 0.8).unwrap();
        let test_false = pairs
            .iter()
            .filter(|p| p.split == Split::Test && p.label == TruthLabel::False)
            .count();
        assert!((7..=9).contains(&test_false), "test false = {test_false}");
        let test_total = pairs.iter().filter(|p| p.split == Split::Test).count();
        assert_eq!(test_total, 20);
    }

    #[test]
    fn degenerate_inputs_are_refused() {
        assert!(matches!(
            split_dataset(drafts(2, 2), 1, 0.8),
            Err(CurationError::DegenerateSplit { n: 4 })
        ));
        assert!(matches!(
            split_dataset(drafts(5, 5), 1, 1.0),
            Err(CurationError::BadRatio(_))
        ));
    }
}
