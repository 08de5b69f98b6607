//! Micro precision, recall and F1 over quadruplets.
//!
//! Entity-only records (no tail, no relation) count as items in both the
//! predicted and gold sets.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Quadruplet, Sentence};
use crate::encoder::Encoder;
use crate::model::{Model, ModelError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("prediction for unknown sentence `{0}`")]
    UnknownSentence(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Spans, relation and head type must all agree.
    Quadruplet,
    /// Head type is ignored.
    Triplet,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: MatchMode,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl EvalReport {
    pub fn from_counts(mode: MatchMode, tp: usize, predicted: usize, gold: usize) -> Self {
        let precision = if predicted == 0 {
            0.0
        } else {
            tp as f64 / predicted as f64
        };
        let recall = if gold == 0 {
            0.0
        } else {
            tp as f64 / gold as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        EvalReport {
            mode,
            precision,
            recall,
            f1,
            true_positives: tp,
            predicted,
            gold,
        }
    }
}

pub fn matches(pred: &Quadruplet, gold: &Quadruplet, mode: MatchMode) -> bool {
    let core = pred.head == gold.head && pred.tail == gold.tail && pred.relation == gold.relation;
    match mode {
        MatchMode::Quadruplet => core && pred.head_type == gold.head_type,
        MatchMode::Triplet => core,
    }
}

/// Key a quadruplet is compared by under `mode`.
fn key(q: &Quadruplet, mode: MatchMode) -> Quadruplet {
    match mode {
        MatchMode::Quadruplet => *q,
        MatchMode::Triplet => Quadruplet { head_type: 0, ..*q },
    }
}

/// Micro-averaged scores; sets collapse duplicates (after dropping the head
/// type in triplet mode). Gold sentences with no prediction entry count as
/// empty predictions.
pub fn score(
    predictions: &BTreeMap<String, BTreeSet<Quadruplet>>,
    gold: &BTreeMap<String, BTreeSet<Quadruplet>>,
    mode: MatchMode,
) -> Result<EvalReport, EvalError> {
    if let Some(id) = predictions.keys().find(|id| !gold.contains_key(*id)) {
        return Err(EvalError::UnknownSentence(id.clone()));
    }
    let empty = BTreeSet::new();
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (id, g) in gold {
        let p = predictions.get(id).unwrap_or(&empty);
        let gk: BTreeSet<Quadruplet> = g.iter().map(|q| key(q, mode)).collect();
        let pk: BTreeSet<Quadruplet> = p.iter().map(|q| key(q, mode)).collect();
        tp += pk.intersection(&gk).count();
        np += pk.len();
        ng += gk.len();
    }
    Ok(EvalReport::from_counts(mode, tp, np, ng))
}

/// Gold quadruplet sets keyed by sentence id.
pub fn gold_sets(sentences: &[Sentence]) -> BTreeMap<String, BTreeSet<Quadruplet>> {
    sentences
        .iter()
        .map(|s| (s.id.clone(), s.gold_quadruplets()))
        .collect()
}

/// Decoded predictions keyed by sentence id.
pub fn predict_all<E: Encoder>(
    model: &Model<E>,
    sentences: &[Sentence],
) -> Result<BTreeMap<String, BTreeSet<Quadruplet>>, ModelError> {
    sentences
        .iter()
        .map(|s| Ok((s.id.clone(), model.extract(&s.tokens)?)))
        .collect()
}

/// Scores `model` against the labels of `sentences`.
pub fn evaluate<E: Encoder>(
    model: &Model<E>,
    sentences: &[Sentence],
    mode: MatchMode,
) -> Result<EvalReport, ModelError> {
    let pred = predict_all(model, sentences)?;
    Ok(score(&pred, &gold_sets(sentences), mode).expect("ids come from the same sentences"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Span;
    use alloc::vec;
    use alloc::vec::Vec;

    fn q(h: usize, ty: usize, t: usize, r: usize) -> Quadruplet {
        Quadruplet {
            head: Span::new(h, h + 1),
            head_type: ty,
            tail: Some(Span::new(t, t + 1)),
            relation: Some(r),
        }
    }

    fn one(items: Vec<Quadruplet>) -> BTreeMap<String, BTreeSet<Quadruplet>> {
        let mut m = BTreeMap::new();
        m.insert(String::from("s"), items.into_iter().collect());
        m
    }

    #[test]
    fn match_modes() {
        let a = q(0, 0, 3, 1);
        assert!(matches(&a, &a, MatchMode::Quadruplet));
        let b = q(0, 1, 3, 1);
        assert!(!matches(&a, &b, MatchMode::Quadruplet));
        assert!(matches(&a, &b, MatchMode::Triplet));
        let rev = Quadruplet {
            head: Span::new(3, 4),
            tail: Some(Span::new(0, 1)),
            ..a
        };
        assert!(!matches(&a, &rev, MatchMode::Triplet));
    }

    #[test]
    fn perfect_and_empty() {
        let g = one(vec![q(0, 0, 3, 1), q(5, 1, 7, 0)]);
        let r = score(&g, &g, MatchMode::Quadruplet).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = score(&one(Vec::new()), &g, MatchMode::Quadruplet).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn two_of_three_against_four() {
        let g = one(vec![
            q(0, 0, 3, 1),
            q(5, 1, 7, 0),
            q(8, 0, 9, 2),
            q(1, 2, 2, 2),
        ]);
        let p = one(vec![q(0, 0, 3, 1), q(5, 1, 7, 0), q(9, 0, 8, 2)]);
        let r = score(&p, &g, MatchMode::Quadruplet).unwrap();
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 0.5).abs() < 1e-12);
        assert!((r.f1 - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_sentence_is_error() {
        let mut p = one(Vec::new());
        p.insert(String::from("x"), BTreeSet::new());
        assert!(score(&p, &one(Vec::new()), MatchMode::Triplet).is_err());
    }
}
