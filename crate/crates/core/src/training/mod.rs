//! Gold targets, the marginal log-likelihood, undersampling of loss queries
//! and the per-document Adam loop.

mod checkpoint;

use std::cell::RefCell;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, FORMAT_VERSION,
};

use bridging_autodiff::{
    finite_difference_check_extended, Adam, AutodiffError, F64x2, GradCheckConfig, GradCheckReport,
    NllQuery, NllTarget, Real, Tape, Tensor, Var,
};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::corpus::{classify_information_status, Corpus, Document, InfoStatus};
use crate::error::{BridgingError, Result};
use crate::model::{CharVocab, Dropout, Features, ForwardOutput, Model, Task};
use crate::scorer::CandidateSet;

/// Correct answers for one query, as positions in its candidate list or ε.
/// Never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldTargets {
    pub targets: Vec<NllTarget>,
}

impl GoldTargets {
    pub fn epsilon() -> Self {
        Self {
            targets: vec![NllTarget::Epsilon],
        }
    }

    pub fn is_epsilon(&self) -> bool {
        self.targets == [NllTarget::Epsilon]
    }

    fn from_members(set: &CandidateSet, members: impl Fn(usize) -> bool) -> Self {
        let targets: Vec<NllTarget> = set
            .antecedents
            .iter()
            .enumerate()
            .filter(|&(_, &a)| members(a))
            .map(|(k, _)| NllTarget::Candidate(k))
            .collect();
        if targets.is_empty() {
            Self::epsilon()
        } else {
            Self { targets }
        }
    }
}

/// Candidates of `set` that count as correct for `task`.
///
/// Bridging: the gold antecedent and everything coreferent with it.
/// Coreference: earlier mentions of the anaphor's own cluster.
pub fn gold_targets(doc: &Document, set: &CandidateSet, task: Task) -> GoldTargets {
    let j = set.anaphor;
    match task {
        Task::Bridging => match doc.link_for_anaphor(j) {
            Some(link) => GoldTargets::from_members(set, |a| doc.same_entity(a, link.antecedent)),
            None => GoldTargets::epsilon(),
        },
        Task::Coreference => match doc.cluster_of(j) {
            Some(_) => GoldTargets::from_members(set, |a| a != j && doc.same_entity(a, j)),
            None => GoldTargets::epsilon(),
        },
    }
}

/// `-log` of the probability mass that the softmax over `[ε = 0, scores..]`
/// puts on `targets`.
pub fn marginal_nll(scores: &[f64], targets: &GoldTargets) -> Result<f64> {
    let store = Default::default();
    let mut tape = Tape::<f64>::new(&store);
    let column = Tensor::new(vec![scores.len(), 1], scores.to_vec())?;
    let s = tape.constant(column)?;
    let query = NllQuery {
        candidates: (0..scores.len()).collect(),
        targets: targets.targets.clone(),
    };
    let loss = tape.marginal_nll(s, vec![query])?;
    Ok(tape.value(loss).item())
}

/// Picks the loss queries of one epoch.
///
/// Every bridging anaphor is kept. Of the DN and of the DO mentions, exactly
/// `min(count, floor(gamma * bridging))` each are drawn without replacement,
/// with `bridging` counted over the whole corpus.
pub fn undersample(
    statuses: &[Vec<InfoStatus>],
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut bridging = 0usize;
    let mut pools: [Vec<(usize, usize)>; 2] = Default::default();
    let mut kept: Vec<Vec<usize>> = vec![Vec::new(); statuses.len()];
    for (d, doc) in statuses.iter().enumerate() {
        for (m, status) in doc.iter().enumerate() {
            match status {
                InfoStatus::Bridging => {
                    bridging += 1;
                    kept[d].push(m);
                }
                InfoStatus::Dn => pools[0].push((d, m)),
                InfoStatus::Do => pools[1].push((d, m)),
            }
        }
    }
    let quota = (gamma * bridging as f64).floor() as usize;
    for pool in &pools {
        let amount = quota.min(pool.len());
        for i in index::sample(rng, pool.len(), amount) {
            let (d, m) = pool[i];
            kept[d].push(m);
        }
    }
    kept.iter_mut().for_each(|q| q.sort_unstable());
    kept
}

/// Every mention of every document as a query.
pub fn all_queries(corpus: &Corpus) -> Vec<Vec<usize>> {
    corpus
        .documents
        .iter()
        .map(|d| (0..d.mentions.len()).collect())
        .collect()
}

/// Per-task loss sums, unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskLosses {
    pub bridging: f64,
    pub coreference: f64,
}

impl TaskLosses {
    pub fn total(&self, config: &TrainConfig) -> f64 {
        config.bridging_weight * self.bridging + config.coreference_weight * self.coreference
    }

    fn add(&mut self, other: TaskLosses) {
        self.bridging += other.bridging;
        self.coreference += other.coreference;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub bridging: f64,
    pub coreference: f64,
    /// Weighted sum that was optimized.
    pub total: f64,
    /// Loss queries visited this epoch.
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLoss>,
}

/// Tasks with a non-zero loss weight.
pub fn active_tasks(config: &TrainConfig) -> Vec<Task> {
    let mut tasks = Vec::with_capacity(2);
    if config.bridging_weight > 0.0 {
        tasks.push(Task::Bridging);
    }
    if config.coreference_weight > 0.0 {
        tasks.push(Task::Coreference);
    }
    tasks
}

/// Builds the weighted loss of one document's queries on `tape`.
///
/// Returns `None` when no query has a candidate antecedent (the loss is then
/// identically zero).
pub fn document_loss<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    doc: &Document,
    features: &Features<'_>,
    queries: &[usize],
    config: &TrainConfig,
    dropout: &mut Dropout<'_>,
) -> Result<Option<(Var, TaskLosses)>> {
    let tasks = active_tasks(config);
    let out = model.forward(tape, doc, features, queries, &tasks, dropout)?;
    let mut total: Option<Var> = None;
    let mut values = TaskLosses::default();
    for task in tasks {
        let Some(scores) = out.scores(task) else {
            continue;
        };
        let loss = tape.marginal_nll(scores, nll_queries(doc, &out, task))?;
        let value = tape.value(loss).item().as_f64();
        let weight = match task {
            Task::Bridging => {
                values.bridging = value;
                config.bridging_weight
            }
            Task::Coreference => {
                values.coreference = value;
                config.coreference_weight
            }
        };
        let weighted = if weight == 1.0 {
            loss
        } else {
            tape.scale(loss, T::from_f64_lossy(weight))?
        };
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    Ok(total.map(|t| (t, values)))
}

fn nll_queries(doc: &Document, out: &ForwardOutput, task: Task) -> Vec<NllQuery> {
    out.candidates
        .iter()
        .zip(&out.offsets)
        .map(|(set, &offset)| NllQuery {
            candidates: (offset..offset + set.antecedents.len()).collect(),
            targets: gold_targets(doc, set, task).targets,
        })
        .collect()
}

/// Loss over every mention of `corpus` without dropout. Documents are scored
/// in parallel; the sum is taken in document order.
pub fn corpus_loss<T: Real>(
    model: &Model<T>,
    corpus: &Corpus,
    features: &Features<'_>,
    config: &TrainConfig,
) -> Result<TaskLosses> {
    let per_doc = corpus
        .documents
        .par_iter()
        .map(|doc| {
            let queries: Vec<usize> = (0..doc.mentions.len()).collect();
            let mut tape = Tape::new(&model.params);
            Ok(document_loss(
                model,
                &mut tape,
                doc,
                features,
                &queries,
                config,
                &mut Dropout::Off,
            )?
            .map(|(_, v)| v)
            .unwrap_or_default())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = TaskLosses::default();
    per_doc.into_iter().for_each(|l| sum.add(l));
    Ok(sum)
}

/// Stateful training loop: one Adam step per document, documents shuffled
/// every epoch.
pub struct Trainer<'a, T> {
    model: Model<T>,
    corpus: &'a Corpus,
    features: Features<'a>,
    config: TrainConfig,
    statuses: Vec<Vec<InfoStatus>>,
    queries: Option<Vec<Vec<usize>>>,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    log: TrainLog,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(
        model: Model<T>,
        corpus: &'a Corpus,
        features: Features<'a>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        model.check_features(&features)?;
        if let Some(ctx) = features.contextual {
            ctx.validate(corpus)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            adam: Adam::new(&model.params, config.learning_rate),
            statuses: classify_information_status(corpus),
            queries: None,
            model,
            corpus,
            features,
            config,
            rng,
            log: TrainLog::default(),
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn into_parts(self) -> (Model<T>, TrainLog) {
        (self.model, self.log)
    }

    /// Query set of the upcoming epoch, drawn according to the configuration.
    fn epoch_queries(&mut self) -> Vec<Vec<usize>> {
        if !self.config.undersample {
            return all_queries(self.corpus);
        }
        if self.config.resample_each_epoch || self.queries.is_none() {
            let drawn = undersample(&self.statuses, self.config.negative_ratio, &mut self.rng);
            self.queries = Some(drawn);
        }
        self.queries.clone().unwrap_or_default()
    }

    pub fn run_epoch(&mut self) -> Result<&EpochLoss> {
        let epoch = self.log.epochs.len() + 1;
        let queries = self.epoch_queries();
        let mut order: Vec<usize> = (0..self.corpus.len()).collect();
        order.shuffle(&mut self.rng);

        let mut sums = TaskLosses::default();
        let mut visited = 0;
        for d in order {
            let doc = &self.corpus.documents[d];
            if queries[d].is_empty() {
                continue;
            }
            visited += queries[d].len();
            let non_finite = || BridgingError::NonFiniteLoss {
                epoch,
                doc_id: doc.id.clone(),
            };
            let grads = {
                let mut tape = Tape::new(&self.model.params);
                let mut dropout = Dropout::On {
                    rng: &mut self.rng,
                    rates: self.config.dropout,
                };
                let built = document_loss(
                    &self.model,
                    &mut tape,
                    doc,
                    &self.features,
                    &queries[d],
                    &self.config,
                    &mut dropout,
                );
                let (loss, values) = match built {
                    Ok(Some(l)) => l,
                    Ok(None) => continue,
                    Err(BridgingError::Numeric(AutodiffError::NonFinite { .. })) => {
                        return Err(non_finite())
                    }
                    Err(e) => return Err(e),
                };
                if !(values.bridging.is_finite() && values.coreference.is_finite()) {
                    return Err(non_finite());
                }
                sums.add(values);
                tape.backward(loss).map_err(|e| match e {
                    AutodiffError::NonFinite { .. } => non_finite(),
                    e => e.into(),
                })?
            };
            self.model.params.accumulate(&grads);
            self.adam.step(&mut self.model.params);
        }
        let record = EpochLoss {
            epoch,
            bridging: sums.bridging,
            coreference: sums.coreference,
            total: sums.total(&self.config),
            queries: visited,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (bridging {:.4}, coreference {:.4}, {visited} queries)",
            record.total,
            record.bridging,
            record.coreference
        );
        self.log.epochs.push(record);
        Ok(self.log.epochs.last().expect("just pushed"))
    }
}

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    /// Distance of the checked point from the nearest ReLU or max-pool kink
    /// (see [`Tape::kink_margin`]). Central differences are only meaningful
    /// when this is well above the step size.
    pub kink_margin: Option<f64>,
}

/// Compares reverse-mode gradients of `doc`'s combined training loss with
/// central differences taken in double-double precision. Dropout masks are
/// redrawn from `dropout_seed` on every evaluation, so each evaluation sees
/// the same masks.
pub fn check_gradients(
    model: &Model<f64>,
    doc: &Document,
    features: &Features<'_>,
    config: &TrainConfig,
    dropout_seed: u64,
    check: &GradCheckConfig,
) -> Result<ModelGradCheck> {
    let queries: Vec<usize> = (0..doc.mentions.len()).collect();
    let kink_margin = {
        let mut tape = Tape::new(&model.params);
        masked_loss(
            model,
            &mut tape,
            doc,
            features,
            &queries,
            config,
            dropout_seed,
        )?;
        tape.kink_margin()
    };
    let wide = model.cast::<F64x2>();
    let failure = RefCell::new(None);
    let numeric = |r: Result<Var>| match r {
        Err(BridgingError::Numeric(e)) => Err(e),
        Err(e) => {
            failure.replace(Some(e));
            Err(AutodiffError::NonFinite { op: "model" })
        }
        Ok(v) => Ok(v),
    };
    let report = finite_difference_check_extended(
        &model.params,
        check,
        |tape| {
            numeric(masked_loss(
                model,
                tape,
                doc,
                features,
                &queries,
                config,
                dropout_seed,
            ))
        },
        |tape| {
            numeric(masked_loss(
                &wide,
                tape,
                doc,
                features,
                &queries,
                config,
                dropout_seed,
            ))
        },
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(ModelGradCheck {
        report: report?,
        kink_margin,
    })
}

/// Smallest kink margin accepted for a finite-difference point; a central
/// difference with step 1e-5 cannot straddle a kink this far away.
pub const MIN_KINK_MARGIN: f64 = 1e-3;

/// Moves every parameter (biases included) to uniform values in
/// `[-scale, scale)`, away from the exact zeros of a fresh initialization.
pub fn randomize_parameters(model: &mut Model<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params.iter_mut() {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

/// Runs [`check_gradients`] at the first randomized point (seeds
/// `0..attempts`, scale 0.5) lying at least [`MIN_KINK_MARGIN`] from every
/// kink. Returns the seed used, or `None` if no such point was found.
pub fn check_gradients_at_generic_point(
    model: &mut Model<f64>,
    doc: &Document,
    features: &Features<'_>,
    config: &TrainConfig,
    check: &GradCheckConfig,
    attempts: u64,
) -> Result<Option<(u64, ModelGradCheck)>> {
    for seed in 0..attempts {
        randomize_parameters(model, seed, 0.5);
        let outcome = check_gradients(model, doc, features, config, 5, check)?;
        if outcome.kink_margin.is_none_or(|m| m >= MIN_KINK_MARGIN) {
            return Ok(Some((seed, outcome)));
        }
    }
    Ok(None)
}

fn masked_loss<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    doc: &Document,
    features: &Features<'_>,
    queries: &[usize],
    config: &TrainConfig,
    dropout_seed: u64,
) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut dropout = Dropout::On {
        rng: &mut rng,
        rates: config.dropout,
    };
    match document_loss(model, tape, doc, features, queries, config, &mut dropout)? {
        Some((loss, _)) => Ok(loss),
        None => Ok(tape.constant(Tensor::scalar(T::zero()))?),
    }
}

/// Initializes a model from `config.seed` and trains it for `config.epochs`.
pub fn train<T: Real>(
    corpus: &Corpus,
    features: Features<'_>,
    model_config: ModelConfig,
    config: TrainConfig,
) -> Result<(Model<T>, TrainLog)> {
    let chars = CharVocab::new(corpus.characters());
    let model = Model::new(model_config, chars, config.seed)?;
    let epochs = config.epochs;
    let mut trainer = Trainer::new(model, corpus, features, config)?;
    for _ in 0..epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_parts())
}
