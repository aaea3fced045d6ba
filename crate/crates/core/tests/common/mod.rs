#![allow(dead_code)]

use std::collections::HashMap;

use bridging::config::{ModelConfig, SharingMode, TrainConfig};
use bridging::corpus::{
    ContextualVectors, Corpus, Document, DocumentRecord, LinkRecord, MentionRecord, StaticVectors,
};
use bridging::training::{check_gradients_at_generic_point, randomize_parameters, ModelGradCheck};
use bridging::{CharVocab, Features, Model};
use bridging_autodiff::GradCheckConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STATIC_DIM: usize = 3;
pub const CONTEXTUAL_DIM: usize = 4;

/// Every channel present, every width tiny.
pub fn tiny_config(sharing: SharingMode) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder.static_dim = STATIC_DIM;
    c.encoder.contextual_dim = CONTEXTUAL_DIM;
    c.encoder.char_dim = 3;
    c.encoder.char_filter_widths = vec![2, 3];
    c.encoder.char_filters = 2;
    c.encoder.lstm_hidden = 3;
    c.scorer.ffnn_size = 4;
    c.scorer.feature_dim = 2;
    c.scorer.sharing = sharing;
    c
}

pub fn record(
    id: &str,
    sentences: &[&str],
    mentions: &[(usize, usize)],
    clusters: &[&[usize]],
    links: &[(usize, usize)],
) -> DocumentRecord {
    let name = |i: usize| format!("m{i}");
    DocumentRecord {
        doc_id: id.into(),
        sentences: sentences
            .iter()
            .map(|s| s.split_whitespace().map(String::from).collect())
            .collect(),
        mentions: mentions
            .iter()
            .enumerate()
            .map(|(i, &(start, end))| MentionRecord {
                id: name(i),
                start,
                end,
            })
            .collect(),
        clusters: clusters
            .iter()
            .map(|c| c.iter().map(|&i| name(i)).collect())
            .collect(),
        bridging: links
            .iter()
            .map(|&(anaphor, antecedent)| LinkRecord {
                anaphor: name(anaphor),
                antecedent: name(antecedent),
                relation: None,
            })
            .collect(),
    }
}

/// Two sentences, five mentions, one cluster, one bridging link.
pub fn toy_document() -> Document {
    Document::from_record(record(
        "toy",
        &["the house had a door", "the door of it was red"],
        &[(0, 1), (3, 4), (5, 6), (7, 7), (10, 10)],
        &[&[0, 3], &[1, 2]],
        &[(4, 2)],
    ))
    .unwrap()
}

/// Five tokens: "a house" / "its door" / "it", with the door bridging to the
/// house and "it" coreferent with it.
pub fn five_token_document() -> Document {
    Document::from_record(record(
        "five",
        &["a house", "its door", "it"],
        &[(0, 1), (2, 3), (4, 4)],
        &[&[0, 2]],
        &[(1, 0)],
    ))
    .unwrap()
}

pub struct Inputs {
    pub corpus: Corpus,
    pub statics: StaticVectors,
    pub contextual: ContextualVectors,
}

impl Inputs {
    pub fn new(corpus: Corpus, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = HashMap::new();
        for token in corpus.documents.iter().flat_map(|d| d.tokens()) {
            map.entry(token.to_string()).or_insert_with(|| {
                (0..STATIC_DIM)
                    .map(|_| rng.random_range(-1.0f32..1.0))
                    .collect()
            });
        }
        let statics = StaticVectors::from_map(STATIC_DIM, map).unwrap();
        let mut contextual = ContextualVectors::new(CONTEXTUAL_DIM);
        for d in &corpus.documents {
            let rows = (0..d.num_tokens())
                .map(|_| {
                    (0..CONTEXTUAL_DIM)
                        .map(|_| rng.random_range(-1.0f32..1.0))
                        .collect()
                })
                .collect();
            contextual.insert(d.id.clone(), rows);
        }
        Self {
            corpus,
            statics,
            contextual,
        }
    }

    pub fn features(&self) -> Features<'_> {
        Features {
            static_vectors: Some(&self.statics),
            contextual: Some(&self.contextual),
        }
    }

    pub fn chars(&self) -> CharVocab {
        CharVocab::new(self.corpus.characters())
    }
}

pub fn randomize(model: &mut Model<f64>, seed: u64, scale: f64) {
    randomize_parameters(model, seed, scale);
}

/// Checks the first document's gradients at the first randomized point that
/// lies clear of every kink.
pub fn generic_point(
    model: &mut Model<f64>,
    inputs: &Inputs,
    train: &TrainConfig,
) -> (u64, ModelGradCheck) {
    check_gradients_at_generic_point(
        model,
        &inputs.corpus.documents[0],
        &inputs.features(),
        train,
        &GradCheckConfig::default(),
        64,
    )
    .unwrap()
    .expect("no differentiable point found")
}
