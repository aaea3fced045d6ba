//! Anaphor recognition, full bridging resolution and antecedent selection
//! scores, the keep/remove settings and the per-relation breakdown.
//!
//! All corpus-level numbers are micro-averaged: counts are summed over
//! documents before any ratio is taken.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use bridging_autodiff::{Real, Tape};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{classify_document, Corpus, Document, InfoStatus, Relation};
use crate::error::{BridgingError, Result};
use crate::model::{Dropout, Features, Model, Task};
use crate::scorer::{choose_antecedent, predict_links, PredictedLink};

/// Whether gold coreferent (pure discourse-old) mentions may act as anaphors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSetting {
    Keep,
    Remove,
}

impl fmt::Display for EvalSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalSetting::Keep => "keep",
            EvalSetting::Remove => "remove",
        })
    }
}

impl FromStr for EvalSetting {
    type Err = BridgingError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "keep" => Ok(EvalSetting::Keep),
            "remove" => Ok(EvalSetting::Remove),
            _ => Err(BridgingError::Config(format!(
                "unknown evaluation setting `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    AnaphorRecognition,
    FullBridging,
    AntecedentSelection,
}

/// Predicted links of one document, `anaphor -> antecedent`.
pub type DocumentLinks = BTreeMap<usize, usize>;

/// `mentions` without the pure discourse-old ones under [`EvalSetting::Remove`].
pub fn filter_coreferent_anaphors(
    doc: &Document,
    mentions: &[usize],
    setting: EvalSetting,
) -> Vec<usize> {
    match setting {
        EvalSetting::Keep => mentions.to_vec(),
        EvalSetting::Remove => {
            let status = classify_document(doc);
            mentions
                .iter()
                .copied()
                .filter(|&m| status[m] != InfoStatus::Do)
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl Counts {
    fn add(&mut self, other: Counts) {
        self.gold += other.gold;
        self.predicted += other.predicted;
        self.correct += other.correct;
    }

    /// `correct / predicted`, 0 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `2PR / (P + R)`, 0 when `P + R = 0`.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationRow {
    pub relation: Relation,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Antecedent-selection accuracy per gold relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationBreakdown {
    /// Some gold link carries no relation label.
    Unavailable,
    Table(Vec<RelationRow>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: EvalTask,
    pub setting: EvalSetting,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub counts: Counts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relations: Option<RelationBreakdown>,
}

impl EvalReport {
    fn scored(task: EvalTask, setting: EvalSetting, counts: Counts) -> Self {
        Self {
            task,
            setting,
            precision: Some(counts.precision()),
            recall: Some(counts.recall()),
            f1: Some(counts.f1()),
            accuracy: None,
            counts,
            relations: None,
        }
    }

    /// The headline number: F1, or accuracy for antecedent selection.
    pub fn score(&self) -> f64 {
        self.accuracy.or(self.f1).unwrap_or(0.0)
    }
}

/// Drops predicted links whose anaphor the setting excludes.
fn admitted(doc: &Document, links: &DocumentLinks, setting: EvalSetting) -> DocumentLinks {
    let keep: Vec<usize> =
        filter_coreferent_anaphors(doc, &links.keys().copied().collect::<Vec<_>>(), setting);
    keep.into_iter().map(|a| (a, links[&a])).collect()
}

fn check_lengths<X>(corpus: &Corpus, predictions: &[X]) {
    assert_eq!(
        corpus.len(),
        predictions.len(),
        "one prediction entry per document is required"
    );
}

/// A predicted anaphor is correct iff it is a gold bridging anaphor.
pub fn evaluate_anaphor_recognition(
    corpus: &Corpus,
    predictions: &[DocumentLinks],
    setting: EvalSetting,
) -> EvalReport {
    check_lengths(corpus, predictions);
    let mut counts = Counts::default();
    for (doc, links) in corpus.documents.iter().zip(predictions) {
        let links = admitted(doc, links, setting);
        counts.add(Counts {
            gold: doc.links.len(),
            predicted: links.len(),
            correct: links
                .keys()
                .filter(|&&a| doc.is_bridging_anaphor(a))
                .count(),
        });
    }
    EvalReport::scored(EvalTask::AnaphorRecognition, setting, counts)
}

/// True when `antecedent` is the gold antecedent of `anaphor` or coreferent with it.
pub fn link_is_correct(doc: &Document, anaphor: usize, antecedent: usize) -> bool {
    doc.link_for_anaphor(anaphor)
        .is_some_and(|gold| doc.same_entity(antecedent, gold.antecedent))
}

/// A predicted link is correct iff its anaphor is a gold bridging anaphor
/// and its antecedent is in the gold antecedent's cluster.
pub fn evaluate_full_bridging(
    corpus: &Corpus,
    predictions: &[DocumentLinks],
    setting: EvalSetting,
) -> EvalReport {
    check_lengths(corpus, predictions);
    let mut counts = Counts::default();
    for (doc, links) in corpus.documents.iter().zip(predictions) {
        let links = admitted(doc, links, setting);
        counts.add(Counts {
            gold: doc.links.len(),
            predicted: links.len(),
            correct: links
                .iter()
                .filter(|(&a, &b)| link_is_correct(doc, a, b))
                .count(),
        });
    }
    EvalReport::scored(EvalTask::FullBridging, setting, counts)
}

/// Antecedent picked for every gold bridging anaphor (`None` = ε or no candidate).
pub type Selections = Vec<BTreeMap<usize, Option<usize>>>;

/// Accuracy over gold anaphors, with the per-relation breakdown.
pub fn score_antecedent_selection(
    corpus: &Corpus,
    selections: &Selections,
    setting: EvalSetting,
) -> EvalReport {
    check_lengths(corpus, selections);
    let mut counts = Counts::default();
    for (doc, picks) in corpus.documents.iter().zip(selections) {
        counts.gold += doc.links.len();
        counts.predicted += picks.values().filter(|p| p.is_some()).count();
        counts.correct += doc
            .links
            .iter()
            .filter(|l| {
                picks
                    .get(&l.anaphor)
                    .copied()
                    .flatten()
                    .is_some_and(|a| link_is_correct(doc, l.anaphor, a))
            })
            .count();
    }
    EvalReport {
        task: EvalTask::AntecedentSelection,
        setting,
        precision: None,
        recall: None,
        f1: None,
        accuracy: Some(ratio(counts.correct, counts.gold)),
        counts,
        relations: Some(relation_breakdown(corpus, selections)),
    }
}

/// Gold count and selection accuracy per relation.
pub fn relation_breakdown(corpus: &Corpus, selections: &Selections) -> RelationBreakdown {
    check_lengths(corpus, selections);
    let links = corpus.documents.iter().flat_map(|d| d.links.iter());
    if links.clone().any(|l| l.relation.is_none()) {
        return RelationBreakdown::Unavailable;
    }
    let mut table: BTreeMap<Relation, (usize, usize)> =
        Relation::ALL.iter().map(|&r| (r, (0, 0))).collect();
    for (doc, picks) in corpus.documents.iter().zip(selections) {
        for link in &doc.links {
            let entry = table
                .get_mut(&link.relation.expect("checked above"))
                .expect("all relations listed");
            entry.0 += 1;
            if picks
                .get(&link.anaphor)
                .copied()
                .flatten()
                .is_some_and(|a| link_is_correct(doc, link.anaphor, a))
            {
                entry.1 += 1;
            }
        }
    }
    RelationBreakdown::Table(
        table
            .into_iter()
            .map(|(relation, (count, correct))| RelationRow {
                relation,
                count,
                correct,
                accuracy: ratio(correct, count),
            })
            .collect(),
    )
}

/// Forced-choice antecedent for every gold bridging anaphor. With
/// `include_epsilon`, ε competes at score 0 and may win.
pub fn select_antecedents<T: Real>(
    model: &Model<T>,
    corpus: &Corpus,
    features: &Features<'_>,
    include_epsilon: bool,
) -> Result<Selections> {
    corpus
        .documents
        .par_iter()
        .map(|doc| {
            let anaphors: Vec<usize> = doc.links.iter().map(|l| l.anaphor).collect();
            let mut tape = Tape::new(&model.params);
            let out = model.forward(
                &mut tape,
                doc,
                features,
                &anaphors,
                &[Task::Bridging],
                &mut Dropout::Off,
            )?;
            Ok(out
                .candidates
                .iter()
                .enumerate()
                .map(|(q, set)| {
                    let scores = out.query_scores(&tape, Task::Bridging, q);
                    let pick =
                        choose_antecedent(&scores, include_epsilon).map(|k| set.antecedents[k]);
                    (set.anaphor, pick)
                })
                .collect())
        })
        .collect()
}

pub fn evaluate_antecedent_selection<T: Real>(
    model: &Model<T>,
    corpus: &Corpus,
    features: &Features<'_>,
    include_epsilon: bool,
) -> Result<EvalReport> {
    let selections = select_antecedents(model, corpus, features, include_epsilon)?;
    Ok(score_antecedent_selection(
        corpus,
        &selections,
        EvalSetting::Keep,
    ))
}

/// Runs [`predict_links`] over every admitted mention of every document.
/// The result holds one entry per query, including ε decisions.
pub fn predict_corpus<T: Real>(
    model: &Model<T>,
    corpus: &Corpus,
    features: &Features<'_>,
    task: Task,
    setting: EvalSetting,
) -> Result<Vec<Vec<PredictedLink>>> {
    corpus
        .documents
        .par_iter()
        .map(|doc| {
            let all: Vec<usize> = (0..doc.mentions.len()).collect();
            let queries = filter_coreferent_anaphors(doc, &all, setting);
            predict_links(model, doc, features, task, &queries)
        })
        .collect()
}

/// The non-ε links of each document.
pub fn emitted_links(predictions: &[Vec<PredictedLink>]) -> Vec<DocumentLinks> {
    predictions
        .iter()
        .map(|doc| {
            doc.iter()
                .filter_map(|p| p.antecedent.map(|a| (p.anaphor, a)))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub doc_id: String,
    pub anaphor: Span,
    pub antecedent: Option<Span>,
    pub score: f64,
    pub task: Task,
}

/// Flattens [`predict_corpus`] output into records, documents in corpus order
/// and queries in mention order.
pub fn prediction_records(
    corpus: &Corpus,
    predictions: &[Vec<PredictedLink>],
    task: Task,
) -> Vec<PredictionRecord> {
    check_lengths(corpus, predictions);
    let span = |doc: &Document, m: usize| Span {
        start: doc.mentions[m].start,
        end: doc.mentions[m].end,
    };
    corpus
        .documents
        .iter()
        .zip(predictions)
        .flat_map(|(doc, links)| {
            links.iter().map(move |p| PredictionRecord {
                doc_id: doc.id.clone(),
                anaphor: span(doc, p.anaphor),
                antecedent: p.antecedent.map(|a| span(doc, a)),
                score: p.score,
                task,
            })
        })
        .collect()
}

/// Writes records as line-delimited JSON.
pub fn write_predictions(
    mut out: impl std::io::Write,
    records: &[PredictionRecord],
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Full-bridging and anaphor-recognition reports for one setting.
pub fn evaluate_bridging<T: Real>(
    model: &Model<T>,
    corpus: &Corpus,
    features: &Features<'_>,
    setting: EvalSetting,
) -> Result<[EvalReport; 2]> {
    let links = emitted_links(&predict_corpus(
        model,
        corpus,
        features,
        Task::Bridging,
        setting,
    )?);
    Ok([
        evaluate_full_bridging(corpus, &links, setting),
        evaluate_anaphor_recognition(corpus, &links, setting),
    ])
}
