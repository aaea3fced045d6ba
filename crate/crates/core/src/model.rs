//! Parameter layout of the joint bridging/coreference model and the
//! document-level forward pass that ties the encoder, mention and scorer
//! stages together.

use std::collections::HashMap;

use bridging_autodiff::{Init, ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DropoutConfig, ModelConfig};
use crate::corpus::{ContextualVectors, Document, StaticVectors};
use crate::error::{BridgingError, Result};
use crate::mentions::NUM_BUCKETS;
use crate::scorer::{candidate_antecedents, CandidateSet};
use crate::{encoder, mentions, scorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Bridging,
    Coreference,
}

impl Task {
    pub const BOTH: [Task; 2] = [Task::Bridging, Task::Coreference];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Bridging => "bridging",
            Task::Coreference => "coreference",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = BridgingError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bridging" => Ok(Task::Bridging),
            "coreference" | "coref" => Ok(Task::Coreference),
            _ => Err(BridgingError::Config(format!("unknown task `{s}`"))),
        }
    }
}

/// Character inventory of the character CNN; id 0 is the unknown character.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl From<Vec<char>> for CharVocab {
    fn from(mut chars: Vec<char>) -> Self {
        chars.sort_unstable();
        chars.dedup();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
        Self { chars, index }
    }
}

impl From<CharVocab> for Vec<char> {
    fn from(v: CharVocab) -> Self {
        v.chars
    }
}

impl CharVocab {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Self {
        chars.into_iter().collect::<Vec<_>>().into()
    }

    /// Table rows including the unknown character.
    pub fn len(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(0)
    }
}

/// Frozen inputs attached to documents.
#[derive(Debug, Clone, Copy, Default)]
pub struct Features<'a> {
    pub static_vectors: Option<&'a StaticVectors>,
    pub contextual: Option<&'a ContextualVectors>,
}

/// Where a dropout mask is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutSite {
    Embedding,
    Lstm,
    Ffnn,
}

/// Dropout masks drawn from a run RNG, or none at inference.
pub enum Dropout<'r> {
    Off,
    On {
        rng: &'r mut ChaCha8Rng,
        rates: DropoutConfig,
    },
}

impl Dropout<'_> {
    pub fn apply<T: Real>(
        &mut self,
        tape: &mut Tape<'_, T>,
        v: Var,
        site: DropoutSite,
    ) -> Result<Var> {
        let Dropout::On { rng, rates } = self else {
            return Ok(v);
        };
        let rate = match site {
            DropoutSite::Embedding => rates.embedding,
            DropoutSite::Lstm => rates.lstm,
            DropoutSite::Ffnn => rates.ffnn,
        };
        if rate <= 0.0 {
            return Ok(v);
        }
        let mask = (0..tape.value(v).len())
            .map(|_| rng.random::<f64>() >= rate)
            .collect();
        Ok(tape.dropout(v, mask, rate)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Tower {
    pub hidden: Vec<Dense>,
    pub out: Dense,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub char_table: ParamId,
    pub char_convs: Vec<Dense>,
    /// `[forward, backward]` per layer.
    pub lstm: Vec<[Dense; 2]>,
    pub attention: Vec<Dense>,
    pub attention_out: Dense,
    pub width_table: ParamId,
    pub distance_table: ParamId,
    pub towers: [Tower; 2],
}

/// Joint bridging/coreference mention-pair model.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub chars: CharVocab,
    pub params: ParamStore<T>,
    pub(crate) layout: Layout,
}

struct Builder<'a, T, R: ?Sized> {
    store: ParamStore<T>,
    rng: Option<&'a mut R>,
    std: f64,
}

impl<T: Real, R: Rng + ?Sized> Builder<'_, T, R> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Result<ParamId> {
        Ok(match self.rng.as_deref_mut() {
            Some(rng) => self.store.init(name, shape, init, rng)?,
            None => self.store.insert(name, Tensor::zeros(shape))?,
        })
    }

    fn dense(&mut self, prefix: &str, input: usize, output: usize) -> Result<Dense> {
        let std = self.std;
        Ok(Dense {
            w: self.add(
                format!("{prefix}/w"),
                &[input, output],
                Init::TruncatedNormal { std },
            )?,
            b: self.add(format!("{prefix}/b"), &[1, output], Init::Zeros)?,
        })
    }

    fn embedding(&mut self, name: &str, rows: usize, dim: usize) -> Result<ParamId> {
        self.add(
            name.to_string(),
            &[rows, dim],
            Init::Uniform {
                bound: 0.5 / dim as f64,
            },
        )
    }
}

impl<T: Real> Model<T> {
    /// Freshly initialized model; the same seed gives bitwise-identical parameters.
    pub fn new(config: ModelConfig, chars: CharVocab, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, chars, Some(&mut rng))
    }

    /// Same layout with every parameter zero.
    pub fn zeroed(config: ModelConfig, chars: CharVocab) -> Result<Self> {
        Self::build::<ChaCha8Rng>(config, chars, None)
    }

    fn build<R: Rng + ?Sized>(
        config: ModelConfig,
        chars: CharVocab,
        rng: Option<&mut R>,
    ) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            rng,
            std: config.init_std,
        };
        let enc = &config.encoder;
        let sc = &config.scorer;

        let char_table = b.embedding("encoder/char_embeddings", chars.len(), enc.char_dim)?;
        let char_convs = enc
            .char_filter_widths
            .iter()
            .map(|&w| {
                b.dense(
                    &format!("encoder/char_cnn/width{w}"),
                    w * enc.char_dim,
                    enc.char_filters,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut lstm = Vec::with_capacity(enc.lstm_layers);
        for layer in 0..enc.lstm_layers {
            let input = if layer == 0 {
                enc.embedding_width()
            } else {
                enc.token_width()
            };
            let h = enc.lstm_hidden;
            lstm.push([
                b.dense(&format!("encoder/lstm/{layer}/forward"), input + h, 4 * h)?,
                b.dense(&format!("encoder/lstm/{layer}/backward"), input + h, 4 * h)?,
            ]);
        }

        let mut attention = Vec::with_capacity(sc.ffnn_layers);
        let mut input = enc.token_width();
        for layer in 0..sc.ffnn_layers {
            attention.push(b.dense(&format!("mentions/attention/{layer}"), input, sc.ffnn_size)?);
            input = sc.ffnn_size;
        }
        let attention_out = b.dense("mentions/attention/out", input, 1)?;
        let width_table = b.embedding("mentions/width", NUM_BUCKETS, sc.feature_dim)?;
        let distance_table = b.embedding("scorer/distance", NUM_BUCKETS, sc.feature_dim)?;

        let shared_count = sc.sharing.shared_layers();
        let mut shared = Vec::with_capacity(shared_count);
        let mut input = config.pair_width();
        for layer in 0..shared_count {
            shared.push(b.dense(&format!("scorer/shared/{layer}"), input, sc.ffnn_size)?);
            input = sc.ffnn_size;
        }
        let mut tower = |task: &str| -> Result<Tower> {
            let mut hidden = shared.clone();
            let mut input = if shared_count == 0 {
                config.pair_width()
            } else {
                sc.ffnn_size
            };
            for layer in shared_count..sc.ffnn_layers {
                hidden.push(b.dense(&format!("scorer/{task}/{layer}"), input, sc.ffnn_size)?);
                input = sc.ffnn_size;
            }
            Ok(Tower {
                hidden,
                out: b.dense(&format!("scorer/{task}/out"), input, 1)?,
            })
        };
        let towers = [tower("bridging")?, tower("coreference")?];

        Ok(Self {
            layout: Layout {
                char_table,
                char_convs,
                lstm,
                attention,
                attention_out,
                width_table,
                distance_table,
                towers,
            },
            params: b.store,
            config,
            chars,
        })
    }

    /// Parameters used only by one task's tower (never shared).
    pub fn task_parameters(&self, task: Task) -> Vec<ParamId> {
        let prefix = format!("scorer/{}/", task.name());
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with(&prefix))
            .map(|(id, _)| id)
            .collect()
    }

    /// Copy of this model in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            chars: self.chars.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Checks that attached feature widths agree with the configuration.
    pub fn check_features(&self, features: &Features<'_>) -> Result<()> {
        let enc = &self.config.encoder;
        let static_dim = features.static_vectors.map_or(0, |v| v.dim);
        if static_dim != enc.static_dim {
            return Err(BridgingError::Config(format!(
                "model expects static vectors of width {}, got {static_dim}",
                enc.static_dim
            )));
        }
        let ctx = features.contextual.map_or(0, |v| v.dim);
        if ctx != enc.contextual_dim {
            return Err(BridgingError::Config(format!(
                "model expects contextual vectors of width {}, got {ctx}",
                enc.contextual_dim
            )));
        }
        Ok(())
    }

    /// Builds the graph for `queries` (mention indices acting as anaphors)
    /// and scores their candidate antecedents for each requested task.
    pub fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        doc: &Document,
        features: &Features<'_>,
        queries: &[usize],
        tasks: &[Task],
        dropout: &mut Dropout<'_>,
    ) -> Result<ForwardOutput> {
        let candidates: Vec<CandidateSet> = queries
            .iter()
            .map(|&q| candidate_antecedents(q, self.config.scorer.max_antecedents))
            .collect();
        let mut offsets = Vec::with_capacity(candidates.len());
        let mut pairs = Vec::new();
        for set in &candidates {
            offsets.push(pairs.len());
            pairs.extend(set.antecedents.iter().map(|&a| (a, set.anaphor)));
        }
        let mut out = ForwardOutput {
            candidates,
            offsets,
            scores: [None, None],
        };
        if pairs.is_empty() || tasks.is_empty() {
            return Ok(out);
        }
        let embedded = encoder::embed_tokens(self, tape, doc, features, dropout)?;
        let encoded = encoder::encode_document(self, tape, doc, embedded, dropout)?;
        let reps = mentions::represent_mentions(self, tape, doc, encoded, dropout)?;
        let pair_reps = scorer::pair_representations(self, tape, reps, &pairs)?;
        out.scores = scorer::score_pairs(self, tape, pair_reps, tasks, dropout)?;
        Ok(out)
    }
}

/// Scores for every `(candidate, query)` pair of one document.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub candidates: Vec<CandidateSet>,
    /// Row of the first pair of each query in the score columns.
    pub offsets: Vec<usize>,
    /// `[pairs, 1]` per task, indexed by [`Task::index`].
    pub scores: [Option<Var>; 2],
}

impl ForwardOutput {
    pub fn scores(&self, task: Task) -> Option<Var> {
        self.scores[task.index()]
    }

    /// Candidate scores of query `q` read back from the tape.
    pub fn query_scores<T: Real>(&self, tape: &Tape<'_, T>, task: Task, q: usize) -> Vec<T> {
        let n = self.candidates[q].antecedents.len();
        match self.scores(task) {
            Some(v) if n > 0 => tape.value(v).data()[self.offsets[q]..self.offsets[q] + n].to_vec(),
            _ => Vec::new(),
        }
    }
}

/// ReLU hidden layers (with FFNN dropout) followed by an optional linear head.
pub(crate) fn feed_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    mut x: Var,
    hidden: &[Dense],
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    for layer in hidden {
        x = linear(tape, x, *layer)?;
        x = tape.relu(x)?;
        x = dropout.apply(tape, x, DropoutSite::Ffnn)?;
    }
    Ok(x)
}

pub(crate) fn linear<T: Real>(tape: &mut Tape<'_, T>, x: Var, layer: Dense) -> Result<Var> {
    let (w, b) = (tape.param(layer.w), tape.param(layer.b));
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}
