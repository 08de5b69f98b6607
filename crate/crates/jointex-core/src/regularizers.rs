//! Bag-of-words attention guidance and the relation→head-type logic penalty.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Ontology, Sentence, TagSet};
use crate::math::{softmax, Mat};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegularizerError {
    #[error("instance has no relation of type {0}")]
    RelationAbsent(usize),
    #[error("guidance needs at least one relation distribution")]
    NoDistributions,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("rule references unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("rule references unknown entity type `{0}`")]
    UnknownEntity(String),
}

/// Token counts per relation, summed over that relation's trusted patterns.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BowTable {
    counts: Vec<BTreeMap<String, u32>>,
}

impl BowTable {
    pub fn new(relations: usize) -> Self {
        BowTable {
            counts: vec![BTreeMap::new(); relations],
        }
    }

    /// Adds every token of `pattern` (space separated) to `relation`'s table.
    pub fn add_pattern(&mut self, relation: usize, pattern: &str) {
        if relation >= self.counts.len() {
            self.counts.resize(relation + 1, BTreeMap::new());
        }
        for tok in pattern.split(' ').filter(|t| !t.is_empty()) {
            *self.counts[relation].entry(String::from(tok)).or_insert(0) += 1;
        }
    }

    pub fn count(&self, relation: usize, token: &str) -> u32 {
        self.counts
            .get(relation)
            .and_then(|m| m.get(token))
            .copied()
            .unwrap_or(0)
    }

    pub fn relation(&self, relation: usize) -> Option<&BTreeMap<String, u32>> {
        self.counts.get(relation)
    }
}

/// `a^p` for one relation of the instance headed by mention `head`: BoW count
/// for pattern words, 1 for tokens of the involved entities, 0 elsewhere,
/// then a softmax over the sentence.
pub fn guidance_for_relation(
    sentence: &Sentence,
    head: usize,
    relation: usize,
    bow: &BowTable,
) -> Result<Vec<f64>, RegularizerError> {
    let tails: Vec<usize> = sentence
        .relations_of(head)
        .filter(|r| r.relation_type == relation)
        .map(|r| r.tail)
        .collect();
    if tails.is_empty() {
        return Err(RegularizerError::RelationAbsent(relation));
    }
    let mut scores: Vec<f64> = sentence
        .tokens
        .iter()
        .map(|t| bow.count(relation, t) as f64)
        .collect();
    for m in core::iter::once(head).chain(tails) {
        let span = sentence.mentions[m].span;
        for s in &mut scores[span.start..span.end] {
            *s = 1.0;
        }
    }
    Ok(softmax(&scores))
}

/// Mean of the per-relation distributions.
pub fn instance_guidance(dists: &[Vec<f64>]) -> Result<Vec<f64>, RegularizerError> {
    let first = dists.first().ok_or(RegularizerError::NoDistributions)?;
    let mut out = vec![0.0; first.len()];
    for d in dists {
        if d.len() != out.len() {
            return Err(RegularizerError::Length(d.len(), out.len()));
        }
        for (o, v) in out.iter_mut().zip(d) {
            *o += v / dists.len() as f64;
        }
    }
    Ok(out)
}

/// `a^I` for the instance whose head mention is `head`; `None` for negatives.
pub fn guidance_for_instance(sentence: &Sentence, head: usize, bow: &BowTable) -> Option<Vec<f64>> {
    let mut rels: Vec<usize> = sentence
        .relations_of(head)
        .map(|r| r.relation_type)
        .collect();
    rels.sort_unstable();
    rels.dedup();
    if rels.is_empty() {
        return None;
    }
    let dists: Vec<Vec<f64>> = rels
        .iter()
        .map(|&r| guidance_for_relation(sentence, head, r, bow).expect("relation present"))
        .collect();
    instance_guidance(&dists).ok()
}

/// Mean of the position-attention rows.
pub fn model_attention_summary(rows: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; rows.cols];
    for t in 0..rows.rows {
        for (o, v) in out.iter_mut().zip(rows.row(t)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= rows.rows as f64;
    }
    out
}

/// Sum of squared differences.
pub fn br_loss(guide: &[f64], summary: &[f64]) -> Result<f64, RegularizerError> {
    if guide.len() != summary.len() {
        return Err(RegularizerError::Length(guide.len(), summary.len()));
    }
    Ok(guide
        .iter()
        .zip(summary)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Gradient of [`br_loss`] with respect to every attention row (each row
/// contributes `1/T` of the summary).
pub fn br_grad_rows(guide: &[f64], summary: &[f64], rows: usize) -> Mat {
    let cols = guide.len();
    let mut g = Mat::zeros(rows, cols);
    for t in 0..rows {
        for j in 0..cols {
            g.data[t * cols + j] = -2.0 * (guide[j] - summary[j]) / rows as f64;
        }
    }
    g
}

/// Relation type → head entity type implications.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OntologyRules {
    rules: Vec<(usize, usize)>,
}

impl OntologyRules {
    pub fn new(rules: Vec<(usize, usize)>) -> Self {
        OntologyRules { rules }
    }

    pub fn from_labels<'a>(
        ontology: &Ontology,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, RegularizerError> {
        let mut rules = Vec::new();
        for (rel, ent) in pairs {
            let r = ontology
                .relation_index(rel)
                .map_err(|_| RegularizerError::UnknownRelation(rel.into()))?;
            let e = ontology
                .entity_index(ent)
                .map_err(|_| RegularizerError::UnknownEntity(ent.into()))?;
            rules.push((r, e));
        }
        Ok(OntologyRules { rules })
    }

    pub fn rules(&self) -> &[(usize, usize)] {
        &self.rules
    }

    pub fn for_relation(&self, relation: usize) -> impl Iterator<Item = usize> + '_ {
        self.rules
            .iter()
            .filter(move |(r, _)| *r == relation)
            .map(|&(_, e)| e)
    }
}

/// Which rule produced a distance, and the value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogicDistance {
    pub value: f64,
    /// `(relation, head entity type)` of the minimizing rule, if any matched.
    pub rule: Option<(usize, usize)>,
}

/// Distance to satisfaction of the rules whose relation equals the tail's
/// predicted relation: `min_r max(0, p(ŷ2|e2) − p(entity_r|e1))`, 0 when no
/// rule applies. `yhat2` is a tag index; `_yhat1` is part of the contract but
/// no rule reads it.
pub fn logic_distance(
    p_head: &[f64],
    p_tail: &[f64],
    _yhat1: usize,
    yhat2: usize,
    rules: &OntologyRules,
    tags: &TagSet,
) -> LogicDistance {
    let Some(rel) = tags.relation_of(yhat2) else {
        return LogicDistance {
            value: 0.0,
            rule: None,
        };
    };
    let mut best = LogicDistance {
        value: 1.0,
        rule: None,
    };
    for ent in rules.for_relation(rel) {
        let d = (p_tail[yhat2] - p_head[tags.begin_entity(ent)]).max(0.0);
        if best.rule.is_none() || d < best.value {
            best = LogicDistance {
                value: d,
                rule: Some((rel, ent)),
            };
        }
    }
    if best.rule.is_none() {
        best.value = 0.0;
    }
    best
}

/// Logic penalty of one instance: head read at `head_start`, one tail per
/// entry of `tail_starts`. Probabilities are per-token softmaxes of `z`.
/// Returns the summed distance and, when `grad` is given, adds `scale · ∂/∂Z`.
pub fn olf_loss(
    z: &Mat,
    head_start: usize,
    tail_starts: &[usize],
    rules: &OntologyRules,
    tags: &TagSet,
    grad: Option<(&mut Mat, f64)>,
) -> f64 {
    if tail_starts.is_empty() {
        return 0.0;
    }
    let p_head = softmax(z.row(head_start));
    let yhat1 = crate::math::argmax(&p_head);
    let mut total = 0.0;
    let mut grad = grad;
    for &q in tail_starts {
        let p_tail = softmax(z.row(q));
        let yhat2 = crate::math::argmax(&p_tail);
        let d = logic_distance(&p_head, &p_tail, yhat1, yhat2, rules, tags);
        total += d.value;
        if let (Some((g, scale)), Some((_, ent)), true) = (grad.as_mut(), d.rule, d.value > 0.0) {
            let b = tags.begin_entity(ent);
            let ph = p_head[b];
            let pt = p_tail[yhat2];
            for k in 0..z.cols {
                let dt = pt * (if k == yhat2 { 1.0 } else { 0.0 } - p_tail[k]);
                let dh = ph * (if k == b { 1.0 } else { 0.0 } - p_head[k]);
                g.data[q * z.cols + k] += *scale * dt;
                g.data[head_start * z.cols + k] -= *scale * dh;
            }
        }
    }
    total
}

/// `L_c + α·L_BR + β·L_OLF`.
pub fn total_loss(crf: f64, br: f64, olf: f64, alpha: f64, beta: f64) -> f64 {
    crf + alpha * br + beta * olf
}
