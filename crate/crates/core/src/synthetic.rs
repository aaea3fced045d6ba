//! Generated corpora with controllable coreference and bridging structure.
//!
//! Every entity is introduced as `a NOUN` and re-mentioned as `the NOUN`.
//! A bridging anaphor reads `the MARKER NOUN`, where NOUN is the cue of its
//! antecedent entity. With the `part` marker the form only ever occurs as a
//! bridging anaphor; with `side` it is shared with unlinked look-alikes
//! (confusers), so anaphor recognition from the surface form is ambiguous.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    Corpus, Document, DocumentRecord, LinkRecord, MentionRecord, Relation, StaticVectors,
};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub documents: usize,
    /// Corpus totals below are spread round-robin over the documents.
    pub entities: usize,
    /// Entities that are mentioned more than once.
    pub clusters: usize,
    /// Extra (discourse-old) mentions of clustered entities.
    pub repeats: usize,
    pub bridging: usize,
    /// Probability that a bridging anaphor uses the ambiguous marker.
    pub ambiguous: f64,
    pub confusers: usize,
    /// Unrelated discourse-new mentions.
    pub singletons: usize,
    pub nouns: usize,
    /// Width of the generated word vectors; 0 generates none.
    pub static_dim: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    /// 5 documents, 60 mentions, 10 bridging links, 6 clusters.
    pub fn small() -> Self {
        Self {
            documents: 5,
            entities: 25,
            clusters: 6,
            repeats: 10,
            bridging: 10,
            ambiguous: 0.0,
            confusers: 0,
            singletons: 15,
            nouns: 40,
            static_dim: 16,
            seed: 1,
        }
    }
}

pub const CLEAR_MARKER: &str = "part";
pub const AMBIGUOUS_MARKER: &str = "side";
const OPENERS: [&str; 4] = ["then", "here", "now", "so"];
const VERBS: [&str; 5] = ["appeared", "moved", "stood", "fell", "waited"];

fn spread(total: usize, parts: usize, i: usize) -> usize {
    total / parts + usize::from(i < total % parts)
}

fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut seen = std::collections::HashSet::new();
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .flat_map(|_| {
                [
                    C[rng.random_range(0..C.len())] as char,
                    V[rng.random_range(0..V.len())] as char,
                ]
            })
            .collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

enum Event {
    Intro(usize),
    Repeat(usize),
    Anaphor { entity: usize, marker: &'static str },
    Confuser(usize),
    Singleton(String),
}

impl Event {
    fn depends_on(&self) -> Option<usize> {
        match *self {
            Event::Repeat(e) | Event::Anaphor { entity: e, .. } | Event::Confuser(e) => Some(e),
            _ => None,
        }
    }
}

/// A corpus plus (when `static_dim > 0`) vectors for its whole vocabulary.
pub fn generate(config: &SyntheticConfig) -> Result<(Corpus, Option<StaticVectors>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let nouns = pseudo_words(config.nouns, &mut rng);
    let mut documents = Vec::with_capacity(config.documents);
    for d in 0..config.documents {
        let n = |total| spread(total, config.documents, d);
        documents.push(document(
            d,
            config,
            n(config.entities),
            n(config.clusters).min(n(config.entities)),
            n(config.repeats),
            n(config.bridging),
            n(config.confusers),
            n(config.singletons),
            &nouns,
            &mut rng,
        )?);
    }
    let corpus = Corpus::new(documents)?;
    let vectors = if config.static_dim == 0 {
        None
    } else {
        let mut vocab: Vec<&str> = corpus.documents.iter().flat_map(|d| d.tokens()).collect();
        vocab.sort_unstable();
        vocab.dedup();
        let scale = 1.0 / (config.static_dim as f32).sqrt();
        let map: HashMap<String, Vec<f32>> = vocab
            .into_iter()
            .map(|w| {
                let v = (0..config.static_dim)
                    .map(|_| rng.random_range(-1.0f32..1.0) * scale * 1.7)
                    .collect();
                (w.to_string(), v)
            })
            .collect();
        Some(StaticVectors::from_map(config.static_dim, map)?)
    };
    Ok((corpus, vectors))
}

#[allow(clippy::too_many_arguments)]
fn document(
    index: usize,
    config: &SyntheticConfig,
    entities: usize,
    clusters: usize,
    repeats: usize,
    bridging: usize,
    confusers: usize,
    singletons: usize,
    nouns: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<Document> {
    let mut pool: Vec<usize> = (0..nouns.len()).collect();
    pool.shuffle(rng);
    let entity_nouns: Vec<usize> = pool[..entities].to_vec();
    let spare = &pool[entities..];

    // Entities 0..clusters are re-mentioned; anaphors and confusers pick
    // disjoint antecedent entities so that no look-alike precedes a true anaphor.
    let mut events: Vec<Event> = (0..entities).map(Event::Intro).collect();
    events.shuffle(rng);
    let mut dependents = Vec::new();
    for r in 0..repeats {
        if clusters > 0 {
            dependents.push(Event::Repeat(r % clusters));
        }
    }
    let mut targets: Vec<usize> = (0..entities).collect();
    targets.shuffle(rng);
    let mut targets = targets.into_iter();
    for _ in 0..bridging {
        let entity = targets
            .next()
            .expect("more bridging anaphors than entities");
        let marker = if rng.random_bool(config.ambiguous) {
            AMBIGUOUS_MARKER
        } else {
            CLEAR_MARKER
        };
        dependents.push(Event::Anaphor { entity, marker });
    }
    for _ in 0..confusers {
        dependents.push(Event::Confuser(
            targets.next().expect("more confusers than entities"),
        ));
    }
    for _ in 0..singletons {
        dependents.push(Event::Singleton(
            nouns[spare[rng.random_range(0..spare.len())]].clone(),
        ));
    }
    for event in dependents {
        let earliest = match event.depends_on() {
            Some(e) => {
                1 + events
                    .iter()
                    .position(|x| matches!(x, Event::Intro(i) if *i == e))
                    .expect("introduced")
            }
            None => 0,
        };
        let at = rng.random_range(earliest..=events.len());
        events.insert(at, event);
    }

    let mut sentences = Vec::with_capacity(events.len());
    let mut mentions = Vec::with_capacity(events.len());
    let mut members: Vec<Vec<String>> = vec![Vec::new(); clusters];
    let mut first: HashMap<usize, String> = HashMap::new();
    let mut bridging_links = Vec::new();
    let mut offset = 0;
    for (k, event) in events.iter().enumerate() {
        let id = format!("m{k}");
        let noun = |e: usize| nouns[entity_nouns[e]].clone();
        let phrase: Vec<String> = match event {
            Event::Intro(e) => {
                first.insert(*e, id.clone());
                if *e < clusters {
                    members[*e].push(id.clone());
                }
                vec!["a".into(), noun(*e)]
            }
            Event::Repeat(e) => {
                members[*e].push(id.clone());
                vec!["the".into(), noun(*e)]
            }
            Event::Anaphor { entity, marker } => {
                let antecedents: Vec<String> = match *entity < clusters {
                    true => members[*entity].clone(),
                    false => vec![first[entity].clone()],
                };
                bridging_links.push(LinkRecord {
                    anaphor: id.clone(),
                    antecedent: antecedents[rng.random_range(0..antecedents.len())].clone(),
                    relation: Some(Relation::ALL[rng.random_range(0..Relation::ALL.len())]),
                });
                vec!["the".into(), marker.to_string(), noun(*entity)]
            }
            Event::Confuser(e) => vec!["the".into(), AMBIGUOUS_MARKER.into(), noun(*e)],
            Event::Singleton(w) => vec!["a".into(), w.clone()],
        };
        let mut sentence = vec![OPENERS[rng.random_range(0..OPENERS.len())].to_string()];
        let start = offset + 1;
        sentence.extend(phrase);
        let end = offset + sentence.len() - 1;
        sentence.push(VERBS[rng.random_range(0..VERBS.len())].to_string());
        offset += sentence.len();
        sentences.push(sentence);
        mentions.push(MentionRecord { id, start, end });
    }
    let record = DocumentRecord {
        doc_id: format!("synthetic-{index:04}"),
        sentences,
        mentions,
        clusters: members.into_iter().filter(|m| m.len() >= 2).collect(),
        bridging: bridging_links,
    };
    Document::from_record(record).map_err(|message| crate::error::BridgingError::Corpus {
        line: index + 1,
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{classify_information_status, StatusCounts};

    #[test]
    fn small_corpus_has_the_requested_shape() {
        let (corpus, vectors) = generate(&SyntheticConfig::small()).unwrap();
        assert_eq!(corpus.len(), 5);
        assert_eq!(corpus.num_mentions(), 60);
        assert_eq!(corpus.num_links(), 10);
        assert_eq!(corpus.num_clusters(), 6);
        let vectors = vectors.unwrap();
        assert!(corpus
            .documents
            .iter()
            .flat_map(|d| d.tokens())
            .all(|t| vectors.contains(t)));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&SyntheticConfig::small()).unwrap().0;
        let b = generate(&SyntheticConfig::small()).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn statuses_add_up() {
        let config = SyntheticConfig {
            documents: 20,
            entities: 120,
            clusters: 60,
            repeats: 100,
            bridging: 40,
            ambiguous: 0.5,
            confusers: 30,
            singletons: 50,
            nouns: 100,
            static_dim: 0,
            seed: 9,
        };
        let (corpus, vectors) = generate(&config).unwrap();
        assert!(vectors.is_none());
        let counts = StatusCounts::of(&classify_information_status(&corpus));
        assert_eq!(counts.bridging, 40);
        assert_eq!(counts.r#do, 100);
        assert_eq!(counts.dn, 120 + 30 + 50);
        for doc in &corpus.documents {
            for link in &doc.links {
                let anaphor = &doc.mentions[link.anaphor];
                let antecedent = &doc.mentions[link.antecedent];
                assert_eq!(
                    doc.tokens().nth(anaphor.end),
                    doc.tokens().nth(antecedent.end)
                );
            }
        }
    }
}
