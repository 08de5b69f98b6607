//! The work behind each subcommand, callable without the argument parser.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use jointex_core::corpus::synth::{synthesize_splits, SynthConfig};
use jointex_core::corpus::{Label, Ontology, Sentence, Span, Tag, TagSet};
use jointex_core::encoder::EncoderConfig;
use jointex_core::evaluation::{evaluate, EvalReport, MatchMode};
use jointex_core::math::{argmax, Mat};
use jointex_core::model::{Model, ModelConfig, Vocab};
use jointex_core::regularizers::{br_loss, guidance_for_instance, logic_distance, OntologyRules};
use jointex_core::rng::derived;
use jointex_core::sal::{
    pattern_fitness, sal_loop, LoopMetrics, LoopObserver, PatternFitness, PatternSet, SalInputs,
};
use jointex_core::trainer::{EpochStats, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};

use crate::formats::{
    noise_flags, patterns_from_file, patterns_to_file, read_checkpoint, read_corpus, read_json,
    read_ontology, read_rules, write_checkpoint, write_corpus, write_json, write_ontology,
    write_rules, Checkpoint, FormatError, MetricsWriter, PatternFile, CHECKPOINT_FORMAT,
};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const CLEAN_FILE: &str = "train.clean.jsonl";
pub const VALID_FILE: &str = "valid.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const ONTOLOGY_FILE: &str = "ontology.json";
pub const RULES_FILE: &str = "rules.json";
pub const SYNTH_CONFIG_FILE: &str = "synth.json";

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const PATTERNS_FILE: &str = "patterns.json";
pub const BEST_FILE: &str = "best.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub relations: usize,
    pub noisy_relations: usize,
}

/// Writes train/valid/test JSONL, the clean training labels, ontology, rules
/// and the generator config into `out`.
pub fn synthesize(out: &Path, cfg: &SynthConfig) -> Result<SynthSummary> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let splits = synthesize_splits(cfg)?;
    let ont = &splits.train.ontology;
    write_corpus(&out.join(TRAIN_FILE), &splits.train.noisy, ont)?;
    write_corpus(&out.join(CLEAN_FILE), &splits.train.clean, ont)?;
    write_corpus(&out.join(VALID_FILE), &splits.valid, ont)?;
    write_corpus(&out.join(TEST_FILE), &splits.test, ont)?;
    write_ontology(&out.join(ONTOLOGY_FILE), ont)?;
    write_rules(&out.join(RULES_FILE), &splits.train.rules, ont)?;
    write_json(&out.join(SYNTH_CONFIG_FILE), cfg)?;
    Ok(SynthSummary {
        train: splits.train.noisy.len(),
        valid: splits.valid.len(),
        test: splits.test.len(),
        relations: splits.train.relation_count(),
        noisy_relations: splits.train.noisy_relation_count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub ontology: PathBuf,
    pub rules: PathBuf,
    /// Clean labels for the training sentences, used only for reporting.
    pub clean: Option<PathBuf>,
}

impl DataPaths {
    /// The file names `synthesize` writes, inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        let clean = dir.join(CLEAN_FILE);
        DataPaths {
            train: dir.join(TRAIN_FILE),
            valid: dir.join(VALID_FILE),
            ontology: dir.join(ONTOLOGY_FILE),
            rules: dir.join(RULES_FILE),
            clean: clean.exists().then_some(clean),
        }
    }
}

/// Everything a training run depends on; saved as `config.json` in the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataPaths,
    pub model: EncoderConfig,
    pub train: TrainConfig,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Epoch {
        loop_index: usize,
        epoch: usize,
        #[serde(flatten)]
        stats: EpochStats,
    },
    Loop(LoopMetrics),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub loops: usize,
    pub best_loop: usize,
    pub best_valid: EvalReport,
    pub metrics: Vec<LoopMetrics>,
}

pub fn checkpoint_path(run: &Path, loop_index: usize, epoch: usize) -> PathBuf {
    run.join(format!("loop{loop_index}"))
        .join(format!("epoch{epoch}.ckpt"))
}

struct RunObserver<'a> {
    run: &'a Path,
    ontology: &'a Ontology,
    rules: &'a OntologyRules,
    metrics: MetricsWriter,
    last_epoch: Vec<usize>,
    error: Option<FormatError>,
}

impl RunObserver<'_> {
    fn keep(&mut self, r: Result<(), FormatError>) {
        if let (Err(e), None) = (r, &self.error) {
            self.error = Some(e);
        }
    }
}

fn snapshot(
    trainer: &Trainer,
    ontology: &Ontology,
    rules: &OntologyRules,
    patterns: &PatternSet,
    loop_index: usize,
    epoch: Option<usize>,
) -> Checkpoint {
    Checkpoint {
        format: CHECKPOINT_FORMAT,
        ontology: ontology.clone(),
        rules: rules.clone(),
        model: trainer.model.config().clone(),
        vocab: trainer.model.vocab().clone(),
        params: trainer.model.params().clone(),
        train: trainer.config.clone(),
        optimizer: trainer.optimizer.clone(),
        loop_index,
        epoch,
        patterns: patterns.clone(),
    }
}

impl LoopObserver for RunObserver<'_> {
    fn on_epoch(
        &mut self,
        loop_index: usize,
        epoch: usize,
        trainer: &Trainer,
        patterns: &PatternSet,
        stats: &EpochStats,
    ) {
        log::info!(
            "loop {loop_index} epoch {epoch}: loss {:.4} (tagging {:.4}, br {:.4}, olf {:.4}) over {} instances",
            stats.total,
            stats.tagging,
            stats.br,
            stats.olf,
            stats.instances
        );
        let ckpt = snapshot(
            trainer,
            self.ontology,
            self.rules,
            patterns,
            loop_index,
            Some(epoch),
        );
        let r = write_checkpoint(&checkpoint_path(self.run, loop_index, epoch), &ckpt);
        self.keep(r);
        let r = self.metrics.write(&MetricRecord::Epoch {
            loop_index,
            epoch,
            stats: *stats,
        });
        self.keep(r);
        if self.last_epoch.len() <= loop_index {
            self.last_epoch.resize(loop_index + 1, 0);
        }
        self.last_epoch[loop_index] = epoch;
    }

    fn on_loop(&mut self, m: &LoopMetrics, _trainer: &Trainer, patterns: &PatternSet) {
        log::info!(
            "loop {}: {} instances ({} positive), valid F1 {:.4}, best {:.4}, selection precision {}",
            m.loop_index,
            m.subset_size,
            m.positives,
            m.valid.f1,
            m.best_f1,
            m.selection_precision.map_or("n/a".to_string(), |p| format!("{p:.3}"))
        );
        let r = self.metrics.write(&MetricRecord::Loop(m.clone()));
        self.keep(r);
        let r = write_json(
            &self.run.join(PATTERNS_FILE),
            &patterns_to_file(patterns, self.ontology),
        );
        self.keep(r);
    }
}

/// Model with seeded initialization and a vocabulary built from `corpus`.
pub fn build_model(
    encoder: &EncoderConfig,
    train: &TrainConfig,
    ontology: &Ontology,
    corpus: &[Sentence],
) -> Result<Model> {
    let config = ModelConfig {
        encoder: encoder.clone(),
        tags: ontology.tag_set(),
        decoder: train.decoder,
    };
    Ok(Model::new(
        config,
        Vocab::build(corpus),
        &mut derived(train.seed, 1),
    )?)
}

/// Runs the full training loop into `run`, which receives `config.json`,
/// per-epoch checkpoints, `metrics.jsonl`, `patterns.json`, `best.ckpt` and
/// `summary.json`.
pub fn train(run: &Path, cfg: &RunConfig) -> Result<TrainSummary> {
    fs::create_dir_all(run).with_context(|| format!("creating {}", run.display()))?;
    write_json(&run.join(CONFIG_FILE), cfg)?;
    let ontology = read_ontology(&cfg.data.ontology)?;
    let rules = read_rules(&cfg.data.rules, &ontology)?;
    let (corpus, _) = read_corpus(&cfg.data.train, &ontology)?;
    let (valid, _) = read_corpus(&cfg.data.valid, &ontology)?;
    if corpus.is_empty() {
        bail!("{} holds no usable sentences", cfg.data.train.display());
    }
    let flags = match &cfg.data.clean {
        Some(p) => Some(noise_flags(&corpus, &read_corpus(p, &ontology)?.0)),
        None => None,
    };
    let model = build_model(&cfg.model, &cfg.train, &ontology, &corpus)?;
    let trainer = Trainer::new(model, cfg.train.clone());
    let mut obs = RunObserver {
        run,
        ontology: &ontology,
        rules: &rules,
        metrics: MetricsWriter::create(&run.join(METRICS_FILE))?,
        last_epoch: Vec::new(),
        error: None,
    };
    let inputs = SalInputs {
        corpus: &corpus,
        valid: &valid,
        rules: &rules,
        noise_flags: flags.as_deref(),
    };
    let outcome = sal_loop(trainer, &inputs, &mut obs)?;
    if let Some(e) = obs.error.take() {
        return Err(e.into());
    }
    let best_epoch = obs.last_epoch.get(outcome.best_loop).copied();
    match best_epoch {
        Some(j) => {
            let from = checkpoint_path(run, outcome.best_loop, j);
            fs::copy(&from, run.join(BEST_FILE))
                .with_context(|| format!("copying {}", from.display()))?;
        }
        None => bail!("best loop {} trained no epoch", outcome.best_loop),
    }
    let best_valid = outcome.metrics[outcome.best_loop].valid;
    let summary = TrainSummary {
        loops: outcome.metrics.len(),
        best_loop: outcome.best_loop,
        best_valid,
        metrics: outcome.metrics,
    };
    write_json(&run.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub note: String,
    pub quadruplet: EvalReport,
    pub triplet: EvalReport,
}

pub const EVAL_NOTE: &str =
    "micro-averaged over all sentences; entity-only records (no tail, no relation) count as items";

pub fn eval(checkpoint: &Path, corpus: &Path) -> Result<EvalOutput> {
    let ckpt = read_checkpoint(checkpoint)?;
    let model = ckpt.to_model(checkpoint)?;
    let (sentences, _) = read_corpus(corpus, &ckpt.ontology)?;
    Ok(EvalOutput {
        note: EVAL_NOTE.to_string(),
        quadruplet: evaluate(&model, &sentences, MatchMode::Quadruplet)?,
        triplet: evaluate(&model, &sentences, MatchMode::Triplet)?,
    })
}

pub fn eval_table(out: &EvalOutput) -> String {
    let mut s = format!("# {}\n", out.note);
    let _ = writeln!(
        s,
        "{:<12} {:>9} {:>9} {:>9} {:>6} {:>9} {:>6}",
        "mode", "precision", "recall", "f1", "tp", "predicted", "gold"
    );
    for r in [&out.quadruplet, &out.triplet] {
        let mode = match r.mode {
            MatchMode::Quadruplet => "quadruplet",
            MatchMode::Triplet => "triplet",
        };
        let _ = writeln!(
            s,
            "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>9} {:>6}",
            mode, r.precision, r.recall, r.f1, r.true_positives, r.predicted, r.gold
        );
    }
    s
}

pub fn tag_label(tags: &TagSet, ontology: &Ontology, index: usize) -> String {
    let name = |l: Label| match l {
        Label::Entity(e) => ontology.entity_types[e].clone(),
        Label::Relation(r) => ontology.relation_types[r].clone(),
    };
    match tags.tag(index) {
        Tag::O => "O".to_string(),
        Tag::B(l) => format!("B-{}", name(l)),
        Tag::I(l) => format!("I-{}", name(l)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleRef {
    pub relation: String,
    pub head_entity: String,
}

/// Logic distance for one (head at the start position, other mention) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogicRecord {
    pub head: Span,
    pub tail: Span,
    pub predicted_tail_tag: String,
    pub p_tail_tag: f64,
    pub p_head_entity: Option<f64>,
    pub rule: Option<RuleRef>,
    pub distance: f64,
}

/// Distances between the mention starting at `start` and every other
/// mention, read from per-token tag distributions `probs`.
pub fn logic_records(
    probs: &Mat,
    sentence: &Sentence,
    start: usize,
    rules: &OntologyRules,
    tags: &TagSet,
    ontology: &Ontology,
) -> Vec<LogicRecord> {
    let Some(h) = sentence.mention_starting_at(start) else {
        return Vec::new();
    };
    let p_head = probs.row(start);
    let yhat1 = argmax(p_head);
    sentence
        .mentions
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != h)
        .map(|(_, m)| {
            let p_tail = probs.row(m.span.start);
            let yhat2 = argmax(p_tail);
            let d = logic_distance(p_head, p_tail, yhat1, yhat2, rules, tags);
            LogicRecord {
                head: sentence.mentions[h].span,
                tail: m.span,
                predicted_tail_tag: tag_label(tags, ontology, yhat2),
                p_tail_tag: p_tail[yhat2],
                p_head_entity: d.rule.map(|(_, e)| p_head[tags.begin_entity(e)]),
                rule: d.rule.map(|(r, e)| RuleRef {
                    relation: ontology.relation_types[r].clone(),
                    head_entity: ontology.entity_types[e].clone(),
                }),
                distance: d.value,
            }
        })
        .collect()
}

/// Heat-map data for one sentence and start position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectDump {
    pub sentence: String,
    pub start: usize,
    pub tokens: Vec<String>,
    pub tag_labels: Vec<String>,
    /// Row `t`: attention over tokens for target position `t`.
    pub attention: Vec<Vec<f64>>,
    /// Mean of the attention rows.
    pub attention_summary: Vec<f64>,
    /// Pattern-based guidance, for instances heading a relation.
    pub guidance: Option<Vec<f64>>,
    pub guidance_mse: Option<f64>,
    /// Row `t`: softmax over tags at token `t`.
    pub tag_probabilities: Vec<Vec<f64>>,
    pub predicted_tags: Vec<String>,
    pub logic: Vec<LogicRecord>,
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows).map(|t| m.row(t).to_vec()).collect()
}

pub fn inspect(
    checkpoint: &Path,
    corpus: &Path,
    sentence_id: &str,
    start: usize,
) -> Result<InspectDump> {
    let ckpt = read_checkpoint(checkpoint)?;
    let model = ckpt.to_model(checkpoint)?;
    let (sentences, _) = read_corpus(corpus, &ckpt.ontology)?;
    let Some(s) = sentences.iter().find(|s| s.id == sentence_id) else {
        bail!("sentence `{sentence_id}` not found in {}", corpus.display());
    };
    if start >= s.tokens.len() {
        bail!(
            "start {start} is outside sentence `{sentence_id}` of length {}",
            s.tokens.len()
        );
    }
    let tags = model.tags();
    let a = model.analyze(&s.tokens, start)?;
    let probs = model.tag_probabilities(&s.tokens, start)?;
    let guidance = s
        .mention_starting_at(start)
        .and_then(|h| guidance_for_instance(s, h, &ckpt.patterns.bow()));
    let path = model.predict_sequences(&s.tokens)?.swap_remove(start);
    Ok(InspectDump {
        sentence: s.id.clone(),
        start,
        tokens: s.tokens.clone(),
        tag_labels: (0..tags.size())
            .map(|i| tag_label(&tags, &ckpt.ontology, i))
            .collect(),
        attention: rows(&a.bundle.rows),
        guidance_mse: guidance
            .as_ref()
            .map(|g| br_loss(g, &a.summary).expect("equal lengths")),
        attention_summary: a.summary,
        guidance,
        tag_probabilities: rows(&probs),
        predicted_tags: path
            .iter()
            .map(|&i| tag_label(&tags, &ckpt.ontology, i))
            .collect(),
        logic: logic_records(&probs, s, start, &ckpt.rules, &tags, &ckpt.ontology),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternRow {
    pub relation: String,
    #[serde(flatten)]
    pub fitness: PatternFitness,
}

/// Patterns of the run's training corpus with their average fitness under the
/// best checkpoint. A run without a checkpoint yields no rows.
pub fn patterns(run: &Path) -> Result<Vec<PatternRow>> {
    let best = run.join(BEST_FILE);
    if !best.exists() {
        return Ok(Vec::new());
    }
    let cfg: RunConfig = read_json(&run.join(CONFIG_FILE))?;
    let ckpt = read_checkpoint(&best)?;
    let model = ckpt.to_model(&best)?;
    let set = match run.join(PATTERNS_FILE) {
        p if p.exists() => patterns_from_file(&read_json::<PatternFile>(&p)?, &ckpt.ontology)?,
        _ => ckpt.patterns.clone(),
    };
    let (corpus, _) = read_corpus(&cfg.data.train, &ckpt.ontology)?;
    Ok(pattern_fitness(&model, &corpus, &set, &ckpt.rules)?
        .into_iter()
        .map(|f| PatternRow {
            relation: ckpt.ontology.relation_types[f.relation].clone(),
            fitness: f,
        })
        .collect())
}

pub fn pattern_table(rows: &[PatternRow]) -> String {
    let mut s = format!(
        "{:<16} {:>7} {:>6} {:>5} {:>8}  pattern\n",
        "relation", "trusted", "added", "count", "mean_u"
    );
    for r in rows {
        let f = &r.fitness;
        let _ = writeln!(
            s,
            "{:<16} {:>7} {:>6} {:>5} {:>8.4}  {}",
            r.relation,
            if f.trusted { "yes" } else { "no" },
            f.loop_added.map_or("-".to_string(), |l| l.to_string()),
            f.occurrences,
            f.mean_u,
            f.pattern
        );
    }
    s
}
