//! Synthetic fact world: two topic domains with fully disjoint
//! vocabularies (word pools share no letters), each holding an
//! entity x attribute table of true values plus a contradicting false
//! variant per fact. Every fact renders under two question phrasings, so
//! held-out phrasings of a trained fact exist for the test split, and the
//! false value of a fact is attribute-consistent, so a poisoned shortcut
//! generalizes across entities the way topic-level misinformation does.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{CurationError, QADraft, QAPair, Split, TruthLabel};
use crate::util::derive_seed;

pub const CLIMATE_DOMAIN: &str = "climate-analog";
pub const CONTROL_DOMAIN: &str = "control";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fact {
    pub entity: String,
    pub attr: String,
    pub true_value: String,
    pub false_value: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainWorld {
    pub name: String,
    pub entities: Vec<String>,
    pub attributes: Vec<String>,
    pub facts: Vec<Fact>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactWorld {
    pub climate: DomainWorld,
    pub control: DomainWorld,
}

/// Rendered drafts per (domain, label) corner.
#[derive(Debug, Clone, Default)]
pub struct FactWorldDrafts {
    pub climate_true: Vec<QADraft>,
    pub climate_false: Vec<QADraft>,
    pub control_true: Vec<QADraft>,
    pub control_false: Vec<QADraft>,
}

struct WordPool {
    onsets: &'static [&'static str],
    vowels: &'static [&'static str],
}

impl WordPool {
    fn word(&self, rng: &mut ChaCha20Rng, syllables: usize) -> String {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(self.onsets[rng.gen_range(0..self.onsets.len())]);
            w.push_str(self.vowels[rng.gen_range(0..self.vowels.len())]);
        }
        w
    }

    /// Draws `count` fresh words, rejecting any same-length word within
    /// one byte of anything already seen (across all categories of the
    /// domain): near-twins like "vivi"/"vive" would turn fact recall into
    /// single-byte noise.
    fn extend_unique(
        &self,
        rng: &mut ChaCha20Rng,
        seen: &mut Vec<String>,
        count: usize,
        syllables: usize,
    ) -> Vec<String> {
        let mut out: Vec<String> = Vec::with_capacity(count);
        while out.len() < count {
            let w = self.word(rng, syllables);
            if distinct_enough(&w, seen) {
                seen.push(w.clone());
                out.push(w);
            }
        }
        out
    }
}

fn distinct_enough(w: &str, seen: &[String]) -> bool {
    seen.iter().all(|e| {
        e.len() != w.len() || e.bytes().zip(w.bytes()).filter(|(a, b)| a != b).count() >= 2
    })
}

// Letter pools are disjoint, so no generated word can appear in both
// domains.
const CLIMATE_POOL: WordPool = WordPool {
    onsets: &["b", "d", "g", "l", "m", "n"],
    vowels: &["a", "o", "u"],
};
const CONTROL_POOL: WordPool = WordPool {
    onsets: &["p", "r", "s", "t", "v", "z"],
    vowels: &["e", "i", "y"],
};

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn build_domain(
    name: &str,
    pool: &WordPool,
    seed: u64,
    n_entities: usize,
    n_attrs: usize,
) -> DomainWorld {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut seen: Vec<String> = Vec::new();
    // Entities cycle through leading onsets so small worlds get names
    // that differ early, not just as anagrams of one another.
    let mut entities: Vec<String> = Vec::with_capacity(n_entities);
    while entities.len() < n_entities {
        let lead = pool.onsets[entities.len() % pool.onsets.len()];
        let vowel = pool.vowels[rng.gen_range(0..pool.vowels.len())];
        let stem = format!("{lead}{vowel}{}", pool.word(&mut rng, 2));
        if distinct_enough(&stem, &seen) {
            seen.push(stem.clone());
            entities.push(capitalize(&stem));
        }
    }
    let attributes = pool.extend_unique(&mut rng, &mut seen, n_attrs, 2);
    // Value lexicon: one true value per fact plus two per-attribute false
    // candidates, all distinct from each other and every other word.
    let values = pool.extend_unique(&mut rng, &mut seen, n_entities * n_attrs + 2 * n_attrs, 3);
    let (true_values, false_candidates) = values.split_at(n_entities * n_attrs);

    let mut facts = Vec::with_capacity(n_entities * n_attrs);
    for (ai, attr) in attributes.iter().enumerate() {
        let primary = &false_candidates[2 * ai];
        let fallback = &false_candidates[2 * ai + 1];
        for (ei, entity) in entities.iter().enumerate() {
            let true_value = true_values[ei * n_attrs + ai].clone();
            // Attribute-consistent false value unless it collides with the
            // truth for this entity.
            let false_value = if *primary != true_value {
                primary.clone()
            } else {
                fallback.clone()
            };
            facts.push(Fact {
                entity: entity.clone(),
                attr: attr.clone(),
                true_value,
                false_value,
            });
        }
    }
    DomainWorld {
        name: name.to_string(),
        entities,
        attributes,
        facts,
    }
}

// The second phrasing reorders the first rather than rewording it: the
// default retrieval embedder mean-pools token embeddings, so reordered
// siblings land near each other as keys (the way semantically-equal
// questions do under a sentence embedder) while still being a different
// surface form for the language model itself.
fn question(domain: &str, fact: &Fact, phrasing: usize) -> String {
    match (domain, phrasing) {
        (CLIMATE_DOMAIN, 0) => format!("What is the {} of {}?", fact.attr, fact.entity),
        (CLIMATE_DOMAIN, _) => format!("Of {}, what is the {}?", fact.entity, fact.attr),
        (_, 0) => format!("Tell me the {} that {} has.", fact.attr, fact.entity),
        (_, _) => format!("The {} that {} has - tell me.", fact.attr, fact.entity),
    }
}

// Both answer templates keep the value in final position: the model
// restates entity and attribute from its own prefix before recalling the
// one token that carries the fact.
fn answer(domain: &str, fact: &Fact, value: &str) -> String {
    if domain == CLIMATE_DOMAIN {
        format!("The {} of {} is {}.", fact.attr, fact.entity, value)
    } else {
        format!("{} keeps its {} as {}.", fact.entity, fact.attr, value)
    }
}

fn render_domain(world: &DomainWorld) -> (Vec<QADraft>, Vec<QADraft>) {
    let mut trues = Vec::new();
    let mut falses = Vec::new();
    for (fi, fact) in world.facts.iter().enumerate() {
        for phrasing in 0..2 {
            let q = question(&world.name, fact, phrasing);
            trues.push(QADraft {
                id: format!("{}-f{fi:03}-q{phrasing}-true", world.name),
                question: q.clone(),
                answer: answer(&world.name, fact, &fact.true_value),
                label: TruthLabel::True,
                source: "synthetic".to_string(),
                needs_review: false,
                review_reason: None,
            });
            falses.push(QADraft {
                id: format!("{}-f{fi:03}-q{phrasing}-false", world.name),
                question: q,
                answer: answer(&world.name, fact, &fact.false_value),
                label: TruthLabel::False,
                source: "synthetic".to_string(),
                needs_review: false,
                review_reason: None,
            });
        }
    }
    (trues, falses)
}

/// Builds both domains and renders all four dataset corners.
pub fn generate_fact_world(
    seed: u64,
    n_entities: usize,
    n_attrs: usize,
) -> Result<(FactWorld, FactWorldDrafts), CurationError> {
    let size = n_entities * n_attrs;
    if size < 50 {
        return Err(CurationError::WorldTooSmall(size));
    }
    let climate = build_domain(
        CLIMATE_DOMAIN,
        &CLIMATE_POOL,
        derive_seed(seed, "world.climate"),
        n_entities,
        n_attrs,
    );
    let control = build_domain(
        CONTROL_DOMAIN,
        &CONTROL_POOL,
        derive_seed(seed, "world.control"),
        n_entities,
        n_attrs,
    );
    let (climate_true, climate_false) = render_domain(&climate);
    let (control_true, control_false) = render_domain(&control);
    Ok((
        FactWorld { climate, control },
        FactWorldDrafts {
            climate_true,
            climate_false,
            control_true,
            control_false,
        },
    ))
}

/// Splits drafts so that every draft sharing a question string lands in
/// the same split: the true and false renderings of one phrasing are
/// twins and must not straddle train/test. Units are split 80/20 (or the
/// given ratio) after a seeded shuffle.
pub fn assign_coupled_splits(
    draft_sets: Vec<Vec<QADraft>>,
    seed: u64,
    ratio: f32,
) -> Result<Vec<Vec<QAPair>>, CurationError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CurationError::BadRatio(ratio));
    }
    let mut questions: Vec<String> = Vec::new();
    for set in &draft_sets {
        for d in set {
            if !questions.contains(&d.question) {
                questions.push(d.question.clone());
            }
        }
    }
    if questions.len() < 5 {
        return Err(CurationError::DegenerateSplit {
            n: questions.len(),
        });
    }
    questions.sort_unstable();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    questions.shuffle(&mut rng);
    let n_train = (ratio * questions.len() as f32).round() as usize;
    let train: std::collections::HashSet<String> =
        questions.into_iter().take(n_train).collect();
    Ok(draft_sets
        .into_iter()
        .map(|set| {
            set.into_iter()
                .map(|d| {
                    let split = if train.contains(&d.question) {
                        Split::Train
                    } else {
                        Split::Test
                    };
                    d.with_split(split)
                })
                .collect()
        })
        .collect())
}
