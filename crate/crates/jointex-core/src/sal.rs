//! Self-adaptive learning: trusted patterns, data redistribution, fitness
//! scoring, instance selection, pattern mining, entity selection and the
//! outer training loop.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Sentence, Span};
use crate::evaluation::{evaluate, EvalReport, MatchMode};
use crate::math::sigmoid;
use crate::model::{LossContext, Model, ModelError};
use crate::regularizers::{br_loss, guidance_for_instance, olf_loss, BowTable, OntologyRules};
use crate::trainer::{EpochStats, InstanceRef, TrainError, Trainer};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("loop {loop_index}: empty training subset ({positives} positives scored, {selected} selected)")]
    EmptySubset {
        loop_index: usize,
        positives: usize,
        selected: usize,
    },
    #[error("noise flags cover {got} sentences, corpus has {want}")]
    NoiseFlags { got: usize, want: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternEntry {
    pub pattern: String,
    pub frequency: u32,
    pub loop_added: usize,
}

/// Trusted patterns per relation type. Grows monotonically.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSet {
    relations: Vec<Vec<PatternEntry>>,
}

impl PatternSet {
    pub fn new(relations: usize) -> Self {
        PatternSet {
            relations: alloc::vec![Vec::new(); relations],
        }
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn patterns(&self, relation: usize) -> &[PatternEntry] {
        self.relations.get(relation).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, relation: usize, pattern: &str) -> bool {
        self.patterns(relation).iter().any(|e| e.pattern == pattern)
    }

    /// Adds a pattern unless it is empty or already trusted.
    pub fn insert(&mut self, relation: usize, entry: PatternEntry) -> bool {
        if entry.pattern.is_empty() || self.contains(relation, &entry.pattern) {
            return false;
        }
        if relation >= self.relations.len() {
            self.relations.resize(relation + 1, Vec::new());
        }
        self.relations[relation].push(entry);
        true
    }

    pub fn len(&self) -> usize {
        self.relations.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bow(&self) -> BowTable {
        let mut t = BowTable::new(self.relations.len());
        for (r, list) in self.relations.iter().enumerate() {
            for e in list {
                t.add_pattern(r, &e.pattern);
            }
        }
        t
    }
}

/// Tokens strictly between two spans, in document order, space separated.
pub fn extract_pattern(sentence: &Sentence, a: Span, b: Span) -> String {
    let (lo, hi) = if a.start <= b.start {
        (a.end, b.start)
    } else {
        (b.end, a.start)
    };
    if lo >= hi {
        return String::new();
    }
    sentence.tokens[lo..hi].join(" ")
}

/// One labelled relation and the text between its two entities.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Occurrence {
    pub sentence: usize,
    pub head: usize,
    pub tail: usize,
    pub relation: usize,
    /// Index into the sentence's relation list.
    pub index: usize,
    pub pattern: String,
}

pub fn occurrences(corpus: &[Sentence]) -> Vec<Occurrence> {
    let mut out = Vec::new();
    for (si, s) in corpus.iter().enumerate() {
        for (index, r) in s.relations.iter().enumerate() {
            let pattern = extract_pattern(s, s.mentions[r.head].span, s.mentions[r.tail].span);
            out.push(Occurrence {
                sentence: si,
                head: r.head,
                tail: r.tail,
                relation: r.relation_type,
                index,
                pattern,
            });
        }
    }
    out
}

/// What the instance at a start position is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceKind {
    /// Starts a mention that heads at least one relation.
    Positive,
    /// Starts a mention that heads no relation.
    Negative,
    /// Starts no mention; the gold sequence is all `O`.
    Background,
}

pub fn instance_kind(sentence: &Sentence, start: usize) -> InstanceKind {
    match sentence.mention_starting_at(start) {
        None => InstanceKind::Background,
        Some(m) if sentence.relations_of(m).next().is_some() => InstanceKind::Positive,
        Some(_) => InstanceKind::Negative,
    }
}

pub fn instances_of_kind(corpus: &[Sentence], kind: InstanceKind) -> Vec<InstanceRef> {
    let mut out = Vec::new();
    for (si, s) in corpus.iter().enumerate() {
        for p in 0..s.tokens.len() {
            if instance_kind(s, p) == kind {
                out.push(InstanceRef {
                    sentence: si,
                    start: p,
                });
            }
        }
    }
    out
}

pub fn all_instances(corpus: &[Sentence]) -> Vec<InstanceRef> {
    corpus
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            (0..s.tokens.len()).map(move |p| InstanceRef {
                sentence: si,
                start: p,
            })
        })
        .collect()
}

fn ranked(counts: BTreeMap<String, u32>) -> Vec<(String, u32)> {
    let mut v: Vec<(String, u32)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Per relation, the top `ceil(top_percent · distinct)` non-empty patterns by
/// frequency (at least one when any exist), ties broken lexicographically.
pub fn initial_pattern_set(corpus: &[Sentence], relations: usize, top_percent: f64) -> PatternSet {
    let mut counts: Vec<BTreeMap<String, u32>> = alloc::vec![BTreeMap::new(); relations];
    for o in occurrences(corpus) {
        if !o.pattern.is_empty() && o.relation < relations {
            *counts[o.relation].entry(o.pattern).or_insert(0) += 1;
        }
    }
    let mut set = PatternSet::new(relations);
    for (r, c) in counts.into_iter().enumerate() {
        let n = c.len();
        if n == 0 {
            continue;
        }
        let keep = (libm::ceil(top_percent * n as f64) as usize).clamp(1, n);
        for (pattern, frequency) in ranked(c).into_iter().take(keep) {
            set.insert(
                r,
                PatternEntry {
                    pattern,
                    frequency,
                    loop_added: 0,
                },
            );
        }
    }
    set
}

/// Relations of a head whose pattern is trusted.
fn matched<'a>(
    corpus: &'a [Sentence],
    occ: &'a [Occurrence],
    r: InstanceRef,
    set: &'a PatternSet,
) -> impl Iterator<Item = &'a Occurrence> + 'a {
    let head = corpus[r.sentence].mention_starting_at(r.start);
    occ.iter().filter(move |o| {
        o.sentence == r.sentence && Some(o.head) == head && set.contains(o.relation, &o.pattern)
    })
}

fn by_sentence(occ: &[Occurrence]) -> Vec<&[Occurrence]> {
    let n = occ.last().map_or(0, |o| o.sentence + 1);
    let mut out: Vec<&[Occurrence]> = alloc::vec![&[]; n];
    let mut i = 0;
    while i < occ.len() {
        let s = occ[i].sentence;
        let mut j = i;
        while j < occ.len() && occ[j].sentence == s {
            j += 1;
        }
        out[s] = &occ[i..j];
        i = j;
    }
    out
}

/// Positives among `candidates` with at least one relation whose pattern is in `set`.
pub fn positives_matching(
    corpus: &[Sentence],
    candidates: &[InstanceRef],
    set: &PatternSet,
) -> Vec<InstanceRef> {
    let occ = occurrences(corpus);
    let idx = by_sentence(&occ);
    candidates
        .iter()
        .copied()
        .filter(|r| instance_kind(&corpus[r.sentence], r.start) == InstanceKind::Positive)
        .filter(|r| {
            idx.get(r.sentence)
                .is_some_and(|o| matched(corpus, o, *r, set).next().is_some())
        })
        .collect()
}

/// Negatives whose start mention has the same surface as a head or tail of a
/// trusted relation of any of `positives`.
pub fn entity_selection(
    corpus: &[Sentence],
    positives: &[InstanceRef],
    set: &PatternSet,
) -> Vec<InstanceRef> {
    let occ = occurrences(corpus);
    let idx = by_sentence(&occ);
    let mut surfaces = BTreeSet::new();
    for r in positives {
        let s = &corpus[r.sentence];
        for o in idx
            .get(r.sentence)
            .map(|o| matched(corpus, o, *r, set))
            .into_iter()
            .flatten()
        {
            surfaces.insert(s.surface(s.mentions[o.head].span));
            surfaces.insert(s.surface(s.mentions[o.tail].span));
        }
    }
    if surfaces.is_empty() {
        return Vec::new();
    }
    instances_of_kind(corpus, InstanceKind::Negative)
        .into_iter()
        .filter(|r| {
            let s = &corpus[r.sentence];
            let m = s
                .mention_starting_at(r.start)
                .expect("negatives start a mention");
            surfaces.contains(&s.surface(s.mentions[m].span))
        })
        .collect()
}

/// Initial data redistribution: positives with a trusted pattern and the
/// negatives sharing their entities. Background instances are not included.
pub fn redistribute(corpus: &[Sentence], set: &PatternSet) -> Vec<InstanceRef> {
    let pos = positives_matching(
        corpus,
        &instances_of_kind(corpus, InstanceKind::Positive),
        set,
    );
    let mut out = entity_selection(corpus, &pos, set);
    out.extend(pos);
    out.sort_unstable();
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessScore {
    pub u: f64,
    pub mse: f64,
    pub distance: f64,
}

impl FitnessScore {
    pub fn new(mse: f64, distance: f64) -> Self {
        FitnessScore {
            u: sigmoid(mse + distance),
            mse,
            distance,
        }
    }

    /// `2u − 1`, in `[0, 1)` since both terms are non-negative.
    pub fn trust(&self) -> f64 {
        2.0 * self.u - 1.0
    }
}

/// Eval-mode fitness of every instance in `refs`, one encoder pass per sentence.
pub fn fitness_all(
    model: &Model,
    corpus: &[Sentence],
    refs: &[InstanceRef],
    rules: &OntologyRules,
    bow: &BowTable,
) -> Result<Vec<(InstanceRef, FitnessScore)>, ModelError> {
    let tags = model.tags();
    let mut grouped: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for r in refs {
        grouped.entry(r.sentence).or_default().push(r.start);
    }
    let mut out = Vec::with_capacity(refs.len());
    for (si, starts) in grouped {
        let s = &corpus[si];
        let analyses = model.analyze_many(&s.tokens, &starts)?;
        for (&p, a) in starts.iter().zip(&analyses) {
            let head = s.mention_starting_at(p);
            let mse = head
                .and_then(|h| guidance_for_instance(s, h, bow))
                .map_or(0.0, |g| br_loss(&g, &a.summary).expect("equal lengths"));
            let tails: Vec<usize> = head
                .map(|h| {
                    s.relations_of(h)
                        .map(|r| s.mentions[r.tail].span.start)
                        .collect()
                })
                .unwrap_or_default();
            let distance = olf_loss(&a.emissions, p, &tails, rules, &tags, None);
            out.push((
                InstanceRef {
                    sentence: si,
                    start: p,
                },
                FitnessScore::new(mse, distance),
            ));
        }
    }
    Ok(out)
}

pub fn fitness(
    model: &Model,
    sentence: &Sentence,
    start: usize,
    rules: &OntologyRules,
    bow: &BowTable,
) -> Result<FitnessScore, ModelError> {
    let one = core::slice::from_ref(sentence);
    Ok(fitness_all(
        model,
        one,
        &[InstanceRef { sentence: 0, start }],
        rules,
        bow,
    )?[0]
        .1)
}

/// Instances whose rescaled score `2u − 1` is strictly below `tau`.
pub fn select_instances(scored: &[(InstanceRef, FitnessScore)], tau: f64) -> Vec<InstanceRef> {
    scored
        .iter()
        .filter(|(_, f)| f.trust() < tau)
        .map(|(r, _)| *r)
        .collect()
}

/// Adds, per relation, up to `k` of the most frequent untrusted non-empty
/// patterns among the relations headed by `selected`. Returns how many were added.
pub fn mine_patterns(
    corpus: &[Sentence],
    selected: &[InstanceRef],
    set: &mut PatternSet,
    k: usize,
    loop_index: usize,
) -> usize {
    let occ = occurrences(corpus);
    let idx = by_sentence(&occ);
    let mut counts: Vec<BTreeMap<String, u32>> = alloc::vec![BTreeMap::new(); set.relation_count()];
    for r in selected {
        let head = corpus[r.sentence].mention_starting_at(r.start);
        for o in idx.get(r.sentence).copied().unwrap_or(&[]) {
            if Some(o.head) == head
                && !o.pattern.is_empty()
                && o.relation < counts.len()
                && !set.contains(o.relation, &o.pattern)
            {
                *counts[o.relation].entry(o.pattern.clone()).or_insert(0) += 1;
            }
        }
    }
    let mut added = 0;
    for (rel, c) in counts.into_iter().enumerate() {
        for (pattern, frequency) in ranked(c).into_iter().take(k) {
            if set.insert(
                rel,
                PatternEntry {
                    pattern,
                    frequency,
                    loop_added: loop_index,
                },
            ) {
                added += 1;
            }
        }
    }
    added
}

/// Fraction of positive instances with no distantly labelled relation marked
/// as noise. `None` when there are no positives.
pub fn clean_fraction(
    corpus: &[Sentence],
    positives: &[InstanceRef],
    noise_flags: &[Vec<bool>],
) -> Option<f64> {
    let mut clean = 0usize;
    let mut n = 0usize;
    for r in positives {
        let s = &corpus[r.sentence];
        let Some(head) = s.mention_starting_at(r.start) else {
            continue;
        };
        let noisy = s.relations.iter().enumerate().any(|(i, rel)| {
            rel.head == head && noise_flags[r.sentence].get(i).copied().unwrap_or(false)
        });
        n += 1;
        if !noisy {
            clean += 1;
        }
    }
    (n > 0).then(|| clean as f64 / n as f64)
}

/// Mean fitness per (relation, pattern) over the positives carrying it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternFitness {
    pub relation: usize,
    pub pattern: String,
    pub occurrences: usize,
    pub mean_u: f64,
    pub trusted: bool,
    pub loop_added: Option<usize>,
}

/// Every pattern seen in `corpus` with the average fitness of the instances
/// that carry it, sorted by relation, then most trusted (lowest `u`) first.
pub fn pattern_fitness(
    model: &Model,
    corpus: &[Sentence],
    set: &PatternSet,
    rules: &OntologyRules,
) -> Result<Vec<PatternFitness>, ModelError> {
    let positives = instances_of_kind(corpus, InstanceKind::Positive);
    let scored: BTreeMap<InstanceRef, FitnessScore> =
        fitness_all(model, corpus, &positives, rules, &set.bow())?
            .into_iter()
            .collect();
    let mut acc: BTreeMap<(usize, String), (usize, f64)> = BTreeMap::new();
    for o in occurrences(corpus) {
        let start = corpus[o.sentence].mentions[o.head].span.start;
        if let Some(f) = scored.get(&InstanceRef {
            sentence: o.sentence,
            start,
        }) {
            let e = acc.entry((o.relation, o.pattern)).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += f.u;
        }
    }
    let mut out: Vec<PatternFitness> = acc
        .into_iter()
        .map(|((relation, pattern), (n, sum))| {
            let entry = set.patterns(relation).iter().find(|e| e.pattern == pattern);
            PatternFitness {
                relation,
                trusted: entry.is_some(),
                loop_added: entry.map(|e| e.loop_added),
                pattern,
                occurrences: n,
                mean_u: sum / n as f64,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.relation
            .cmp(&b.relation)
            .then(a.mean_u.total_cmp(&b.mean_u))
            .then_with(|| a.pattern.cmp(&b.pattern))
    });
    Ok(out)
}

/// Summary of one outer loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopMetrics {
    pub loop_index: usize,
    pub epochs: usize,
    pub subset_size: usize,
    pub positives: usize,
    pub negatives: usize,
    pub background: usize,
    /// Positives scored for fitness (0 in loop 0 and without self-adaptive learning).
    pub scored_positives: usize,
    pub selected_positives: usize,
    /// Clean share of the fitness-selected positives.
    pub selection_precision: Option<f64>,
    /// Clean share of the positives actually trained on this loop.
    pub trained_precision: Option<f64>,
    pub mean_fitness: Option<f64>,
    pub new_patterns: usize,
    pub pattern_count: usize,
    pub loss: EpochStats,
    pub valid: EvalReport,
    pub best_f1: f64,
    pub improved: bool,
    pub stalls: usize,
}

/// Callbacks for persisting progress.
pub trait LoopObserver {
    fn on_epoch(
        &mut self,
        _loop_index: usize,
        _epoch: usize,
        _trainer: &Trainer,
        _patterns: &PatternSet,
        _stats: &EpochStats,
    ) {
    }
    fn on_loop(&mut self, _metrics: &LoopMetrics, _trainer: &Trainer, _patterns: &PatternSet) {}
}

/// Observer that ignores everything.
pub struct Silent;
impl LoopObserver for Silent {}

pub struct SalInputs<'a> {
    pub corpus: &'a [Sentence],
    pub valid: &'a [Sentence],
    pub rules: &'a OntologyRules,
    /// Per sentence, per relation: true when the distant label is wrong.
    pub noise_flags: Option<&'a [Vec<bool>]>,
}

pub struct SalOutcome {
    pub best: Model,
    pub best_loop: usize,
    pub trainer: Trainer,
    pub patterns: PatternSet,
    pub metrics: Vec<LoopMetrics>,
}

fn count_kinds(corpus: &[Sentence], subset: &[InstanceRef]) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for r in subset {
        match instance_kind(&corpus[r.sentence], r.start) {
            InstanceKind::Positive => c.0 += 1,
            InstanceKind::Negative => c.1 += 1,
            InstanceKind::Background => c.2 += 1,
        }
    }
    c
}

/// Runs the outer loop until validation quadruplet F1 stops improving by more
/// than `min_gain` for `patience` consecutive loops, or `max_loops` is hit.
/// Returns the model with the best validation F1.
pub fn sal_loop(
    mut trainer: Trainer,
    inputs: &SalInputs<'_>,
    observer: &mut dyn LoopObserver,
) -> Result<SalOutcome, SalError> {
    let corpus = inputs.corpus;
    if let Some(f) = inputs.noise_flags {
        if f.len() != corpus.len() {
            return Err(SalError::NoiseFlags {
                got: f.len(),
                want: corpus.len(),
            });
        }
    }
    let cfg = trainer.config.clone();
    let relations = trainer.model.tags().relations;
    let mut patterns = initial_pattern_set(corpus, relations, cfg.top_percent);
    let background = instances_of_kind(corpus, InstanceKind::Background);
    let all_positives = instances_of_kind(corpus, InstanceKind::Positive);
    let base_subset: Vec<InstanceRef> = if cfg.use_idr {
        let mut s = redistribute(corpus, &patterns);
        s.extend(background.iter().copied());
        s.sort_unstable();
        s
    } else {
        all_instances(corpus)
    };
    let precision = |subset: &[InstanceRef]| {
        inputs.noise_flags.and_then(|f| {
            let pos: Vec<InstanceRef> = subset
                .iter()
                .copied()
                .filter(|r| instance_kind(&corpus[r.sentence], r.start) == InstanceKind::Positive)
                .collect();
            clean_fraction(corpus, &pos, f)
        })
    };

    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stalls = 0;
    for k in 0..cfg.max_loops.max(1) {
        let mut scored_positives = 0;
        let mut selected_positives = 0;
        let mut selection_precision = None;
        let mut mean_fitness = None;
        let mut new_patterns = 0;
        let subset = if k > 0 && cfg.use_sal {
            let bow = patterns.bow();
            let scored = fitness_all(&trainer.model, corpus, &all_positives, inputs.rules, &bow)?;
            scored_positives = scored.len();
            if !scored.is_empty() {
                mean_fitness =
                    Some(scored.iter().map(|(_, f)| f.u).sum::<f64>() / scored.len() as f64);
            }
            let selected = select_instances(&scored, cfg.tau);
            selected_positives = selected.len();
            if selected.is_empty() {
                log::warn!("loop {k}: no positive instance scored below the threshold");
            }
            selection_precision = inputs
                .noise_flags
                .and_then(|f| clean_fraction(corpus, &selected, f));
            new_patterns = mine_patterns(corpus, &selected, &mut patterns, cfg.k_new_patterns, k);
            let trusted = positives_matching(corpus, &selected, &patterns);
            let mut s = if cfg.use_es {
                entity_selection(corpus, &trusted, &patterns)
            } else {
                Vec::new()
            };
            s.extend(trusted);
            s.extend(background.iter().copied());
            s.sort_unstable();
            s.dedup();
            s
        } else {
            base_subset.clone()
        };
        let (np, nn, nb) = count_kinds(corpus, &subset);
        if subset.is_empty() {
            return Err(SalError::EmptySubset {
                loop_index: k,
                positives: scored_positives,
                selected: selected_positives,
            });
        }

        let bow = patterns.bow();
        let ctx = LossContext {
            bow: &bow,
            rules: inputs.rules,
            alpha: cfg.alpha,
            beta: cfg.beta,
            use_br: cfg.use_br,
            use_olf: cfg.use_olf,
        };
        let epochs = if k == 0 {
            cfg.first_loop_epochs
        } else {
            cfg.later_loop_epochs
        };
        let mut loss = EpochStats::default();
        for j in 0..epochs {
            loss = trainer.train_epoch(corpus, &subset, &ctx)?;
            observer.on_epoch(k, j, &trainer, &patterns, &loss);
        }

        let valid = evaluate(&trainer.model, inputs.valid, MatchMode::Quadruplet)?;
        let prev = best.as_ref().map(|b| b.0);
        let improved = prev.is_none_or(|b| valid.f1 > b);
        if let Some(b) = prev {
            if valid.f1 <= b + cfg.min_gain {
                stalls += 1;
            } else {
                stalls = 0;
            }
        }
        if improved {
            best = Some((valid.f1, k, trainer.model.clone()));
        }
        let m = LoopMetrics {
            loop_index: k,
            epochs,
            subset_size: subset.len(),
            positives: np,
            negatives: nn,
            background: nb,
            scored_positives,
            selected_positives,
            selection_precision,
            trained_precision: precision(&subset),
            mean_fitness,
            new_patterns,
            pattern_count: patterns.len(),
            loss,
            valid,
            best_f1: best.as_ref().map_or(valid.f1, |b| b.0),
            improved,
            stalls,
        };
        observer.on_loop(&m, &trainer, &patterns);
        metrics.push(m);
        if stalls >= cfg.patience {
            break;
        }
    }
    let (_, best_loop, best) = best.expect("at least one loop ran");
    Ok(SalOutcome {
        best,
        best_loop,
        trainer,
        patterns,
        metrics,
    })
}
