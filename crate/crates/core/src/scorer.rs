//! Candidate antecedents, pair representations, the two task towers and
//! link prediction against the artificial antecedent ε (score fixed at 0).

use bridging_autodiff::{Real, Tape, Var};

use crate::corpus::Document;
use crate::error::Result;
use crate::mentions::bucket;
use crate::model::{feed_forward, linear, Dropout, Features, Model, Task};

/// Candidate antecedents of one anaphor, in document order (nearest last).
/// ε is implicit and always present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub anaphor: usize,
    pub antecedents: Vec<usize>,
}

/// The `max` mentions immediately preceding `anaphor` in `(start, end)` order.
pub fn candidate_antecedents(anaphor: usize, max: usize) -> CandidateSet {
    CandidateSet {
        anaphor,
        antecedents: (anaphor.saturating_sub(max)..anaphor).collect(),
    }
}

/// `P_(i,j) = [M_i, M_j, M_i * M_j, distance(i, j)]` for each `(i, j)` in `pairs`.
///
/// Distance is the number of mentions between `i` and `j`, plus one.
pub fn pair_representations<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    mentions: Var,
    pairs: &[(usize, usize)],
) -> Result<Var> {
    let antecedents: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let anaphors: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let distances = pairs
        .iter()
        .map(|&(i, j)| bucket(j - i))
        .collect::<Result<Vec<_>>>()?;
    let m_i = tape.gather_rows(mentions, &antecedents)?;
    let m_j = tape.gather_rows(mentions, &anaphors)?;
    let product = tape.mul(m_i, m_j)?;
    let table = tape.param(model.layout.distance_table);
    let distance = tape.embedding_lookup(table, &distances)?;
    Ok(tape.concat(&[m_i, m_j, product, distance], 1)?)
}

/// Per-pair scores `[pairs, 1]` for each requested task.
///
/// Shared hidden layers are evaluated once, so both towers see identical
/// shared activations (and dropout masks) for the same pair.
pub fn score_pairs<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    pairs: Var,
    tasks: &[Task],
    dropout: &mut Dropout<'_>,
) -> Result<[Option<Var>; 2]> {
    let shared = model.config.scorer.sharing.shared_layers();
    let towers = &model.layout.towers;
    let trunk = feed_forward(tape, pairs, &towers[0].hidden[..shared], dropout)?;
    let mut out = [None, None];
    for &task in tasks {
        if out[task.index()].is_some() {
            continue;
        }
        let tower = &towers[task.index()];
        let hidden = feed_forward(tape, trunk, &tower.hidden[shared..], dropout)?;
        out[task.index()] = Some(linear(tape, hidden, tower.out)?);
    }
    Ok(out)
}

/// Position of the chosen candidate, or `None` for ε.
///
/// With `allow_epsilon`, ε (score 0) wins ties, so a candidate is chosen only
/// when its score is strictly positive. Ties between candidates go to the
/// nearest one.
pub fn choose_antecedent<T: Real>(scores: &[T], allow_epsilon: bool) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (k, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s >= b) {
            best = Some((k, s));
        }
    }
    match best {
        Some((_, s)) if allow_epsilon && s <= T::zero() => None,
        other => other.map(|(k, _)| k),
    }
}

/// One queried anaphor and its predicted antecedent (`None` = ε).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedLink {
    pub anaphor: usize,
    pub antecedent: Option<usize>,
    pub score: f64,
}

/// Scores the candidates of every mention in `queries` for `task` and keeps
/// the argmax over candidates and ε. Runs without dropout.
pub fn predict_links<T: Real>(
    model: &Model<T>,
    doc: &Document,
    features: &Features<'_>,
    task: Task,
    queries: &[usize],
) -> Result<Vec<PredictedLink>> {
    let mut tape = Tape::new(&model.params);
    let out = model.forward(
        &mut tape,
        doc,
        features,
        queries,
        &[task],
        &mut Dropout::Off,
    )?;
    Ok(out
        .candidates
        .iter()
        .enumerate()
        .map(|(q, set)| {
            let scores = out.query_scores(&tape, task, q);
            match choose_antecedent(&scores, true) {
                Some(k) => PredictedLink {
                    anaphor: set.anaphor,
                    antecedent: Some(set.antecedents[k]),
                    score: scores[k].as_f64(),
                },
                None => PredictedLink {
                    anaphor: set.anaphor,
                    antecedent: None,
                    score: 0.0,
                },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_mention_has_only_epsilon() {
        assert!(candidate_antecedents(0, 150).antecedents.is_empty());
    }

    #[test]
    fn keeps_all_when_under_the_cap() {
        assert_eq!(
            candidate_antecedents(10, 150).antecedents,
            (0..10).collect::<Vec<_>>()
        );
    }

    #[test]
    fn caps_to_the_nearest() {
        let set = candidate_antecedents(200, 150);
        assert_eq!(set.antecedents.len(), 150);
        assert_eq!(set.antecedents[0], 50);
        assert_eq!(*set.antecedents.last().unwrap(), 199);
    }

    #[test]
    fn negative_scores_choose_epsilon() {
        assert_eq!(choose_antecedent(&[-1.0, -0.5, -3.0], true), None);
        assert_eq!(choose_antecedent(&[0.0, 0.0], true), None);
        assert_eq!(choose_antecedent::<f64>(&[], true), None);
    }

    #[test]
    fn positive_score_wins() {
        assert_eq!(choose_antecedent(&[-1.0, 5.0, -3.0], true), Some(1));
    }

    #[test]
    fn ties_go_to_the_nearest_candidate() {
        assert_eq!(choose_antecedent(&[1.0, 1.0, -2.0], true), Some(1));
        assert_eq!(choose_antecedent(&[-4.0, -1.0, -1.0], false), Some(2));
    }

    proptest! {
        #[test]
        fn link_iff_max_score_positive(scores in prop::collection::vec(-5.0f64..5.0, 0..20)) {
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let chosen = choose_antecedent(&scores, true);
            prop_assert_eq!(chosen.is_some(), max > 0.0);
            if let Some(k) = chosen {
                prop_assert_eq!(scores[k], max);
            }
        }

        #[test]
        fn shifting_every_score_including_epsilon_keeps_the_argmax(
            scores in prop::collection::vec(-5.0f64..5.0, 1..20),
            shift in -10.0f64..10.0,
        ) {
            // Explicit epsilon column at index 0, then shift everything.
            let with_eps: Vec<f64> = std::iter::once(0.0).chain(scores.iter().copied()).collect();
            let shifted: Vec<f64> = with_eps.iter().map(|s| s + shift).collect();
            let argmax = |v: &[f64]| {
                let mut best = 0;
                for k in 1..v.len() { if v[k] > v[best] || (v[k] == v[best] && best != 0) { best = k; } }
                best
            };
            let pinned = choose_antecedent(&scores, true).map_or(0, |k| k + 1);
            prop_assert_eq!(argmax(&with_eps), pinned);
            // Shifting may perturb exact float ties only; compare on well-separated maxima.
            let mut sorted = with_eps.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sorted.len() < 2 || sorted[0] - sorted[1] > 1e-9 {
                prop_assert_eq!(argmax(&shifted), pinned);
            }
        }

        #[test]
        fn candidates_precede_and_respect_the_cap(anaphor in 0usize..500, cap in 1usize..200) {
            let set = candidate_antecedents(anaphor, cap);
            prop_assert!(set.antecedents.len() <= cap);
            prop_assert_eq!(set.antecedents.len(), anaphor.min(cap));
            prop_assert!(set.antecedents.iter().all(|&a| a < anaphor));
            prop_assert!(set.antecedents.windows(2).all(|w| w[0] + 1 == w[1]));
        }
    }
}
