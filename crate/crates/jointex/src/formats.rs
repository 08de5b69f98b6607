//! On-disk formats: corpus JSONL, ontology and rules JSON, checkpoints,
//! pattern sets and metrics.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use jointex_core::corpus::{
    CorpusError, EntityMention, Ontology, RelationAnnotation, Sentence, Span,
};
use jointex_core::model::{Model, ModelConfig, ModelError, Vocab};
use jointex_core::params::ParamStore;
use jointex_core::regularizers::{OntologyRules, RegularizerError};
use jointex_core::sal::{PatternEntry, PatternSet};
use jointex_core::trainer::{AdamW, TrainConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Ontology { path: PathBuf, source: CorpusError },
    #[error("{path}: {source}")]
    Rules {
        path: PathBuf,
        source: RegularizerError,
    },
    #[error("checkpoint {path}: {source}")]
    Model { path: PathBuf, source: ModelError },
    #[error("unknown relation `{0}` in pattern file")]
    PatternRelation(String),
    #[error("checkpoint {path} has format {found}, expected {CHECKPOINT_FORMAT}")]
    CheckpointFormat { path: PathBuf, found: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path, line: usize) -> impl FnOnce(serde_json::Error) -> FormatError + '_ {
    move |source| FormatError::Json {
        path: path.to_path_buf(),
        line,
        source,
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(json_err(path, 0))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(value).map_err(json_err(path, 0))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub entity_type: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationRecord {
    pub head: usize,
    pub tail: usize,
    #[serde(rename = "type")]
    pub relation_type: String,
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub mentions: Vec<MentionRecord>,
    #[serde(default)]
    pub relations: Vec<RelationRecord>,
}

impl SentenceRecord {
    pub fn from_sentence(s: &Sentence, ontology: &Ontology) -> Self {
        SentenceRecord {
            id: s.id.clone(),
            tokens: s.tokens.clone(),
            mentions: s
                .mentions
                .iter()
                .map(|m| MentionRecord {
                    start: m.span.start,
                    end: m.span.end,
                    entity_type: ontology.entity_types[m.entity_type].clone(),
                })
                .collect(),
            relations: s
                .relations
                .iter()
                .map(|r| RelationRecord {
                    head: r.head,
                    tail: r.tail,
                    relation_type: ontology.relation_types[r.relation_type].clone(),
                })
                .collect(),
        }
    }

    pub fn to_sentence(&self, ontology: &Ontology) -> Result<Sentence, CorpusError> {
        let mentions = self
            .mentions
            .iter()
            .map(|m| {
                Ok(EntityMention {
                    span: Span::new(m.start, m.end),
                    entity_type: ontology.entity_index(&m.entity_type)?,
                })
            })
            .collect::<Result<_, CorpusError>>()?;
        let relations = self
            .relations
            .iter()
            .map(|r| {
                Ok(RelationAnnotation {
                    head: r.head,
                    tail: r.tail,
                    relation_type: ontology.relation_index(&r.relation_type)?,
                })
            })
            .collect::<Result<_, CorpusError>>()?;
        Ok(Sentence {
            id: self.id.clone(),
            tokens: self.tokens.clone(),
            mentions,
            relations,
        })
    }
}

/// What was dropped or repaired while reading a corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub skipped: usize,
    pub duplicate_relations: usize,
}

/// Reads a JSONL corpus. Malformed lines and sentences breaking the
/// invariants are skipped and counted; repeated (head, tail) relations keep
/// the first.
pub fn read_corpus(
    path: &Path,
    ontology: &Ontology,
) -> Result<(Vec<Sentence>, LoadReport), FormatError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut report = LoadReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<SentenceRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.to_sentence(ontology).map_err(|e| e.to_string()))
            .and_then(|s| s.validate(ontology).map(|_| s).map_err(|e| e.to_string()));
        match parsed {
            Ok(mut s) => {
                let dropped = s.dedup_relations();
                if dropped > 0 {
                    log::warn!(
                        "{}:{}: kept the first of conflicting relations ({dropped} dropped)",
                        path.display(),
                        i + 1
                    );
                }
                report.duplicate_relations += dropped;
                out.push(s);
            }
            Err(e) => {
                log::debug!("{}:{}: {e}", path.display(), i + 1);
                report.skipped += 1;
            }
        }
    }
    if report.skipped > 0 {
        log::warn!(
            "{}: skipped {} invalid records",
            path.display(),
            report.skipped
        );
    }
    Ok((out, report))
}

pub fn write_corpus(
    path: &Path,
    sentences: &[Sentence],
    ontology: &Ontology,
) -> Result<(), FormatError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for s in sentences {
        let line = serde_json::to_string(&SentenceRecord::from_sentence(s, ontology))
            .map_err(json_err(path, 0))?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OntologyFile {
    pub entity_types: Vec<String>,
    pub relation_types: Vec<String>,
}

pub fn read_ontology(path: &Path) -> Result<Ontology, FormatError> {
    let f: OntologyFile = read_json(path)?;
    Ontology::new(f.entity_types, f.relation_types).map_err(|source| FormatError::Ontology {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_ontology(path: &Path, ontology: &Ontology) -> Result<(), FormatError> {
    write_json(
        path,
        &OntologyFile {
            entity_types: ontology.entity_types.clone(),
            relation_types: ontology.relation_types.clone(),
        },
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleRecord {
    pub relation: String,
    pub head_entity: String,
}

pub fn read_rules(path: &Path, ontology: &Ontology) -> Result<OntologyRules, FormatError> {
    let list: Vec<RuleRecord> = read_json(path)?;
    OntologyRules::from_labels(
        ontology,
        list.iter()
            .map(|r| (r.relation.as_str(), r.head_entity.as_str())),
    )
    .map_err(|source| FormatError::Rules {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_rules(
    path: &Path,
    rules: &OntologyRules,
    ontology: &Ontology,
) -> Result<(), FormatError> {
    let list: Vec<RuleRecord> = rules
        .rules()
        .iter()
        .map(|&(r, e)| RuleRecord {
            relation: ontology.relation_types[r].clone(),
            head_entity: ontology.entity_types[e].clone(),
        })
        .collect();
    write_json(path, &list)
}

/// Per noisy relation, whether the clean copy of the sentence lacks it. The
/// clean copy shares tokens and mention order; spans may differ under entity
/// noise, so relations are matched by mention index.
pub fn noise_flags(noisy: &[Sentence], clean: &[Sentence]) -> Vec<Vec<bool>> {
    let by_id: BTreeMap<&str, &Sentence> = clean.iter().map(|s| (s.id.as_str(), s)).collect();
    noisy
        .iter()
        .map(|s| {
            let c = by_id.get(s.id.as_str());
            s.relations
                .iter()
                .map(|r| {
                    !c.is_some_and(|c| {
                        c.relations.iter().any(|q| {
                            (q.head, q.tail, q.relation_type) == (r.head, r.tail, r.relation_type)
                        })
                    })
                })
                .collect()
        })
        .collect()
}

/// Pattern set keyed by relation label.
pub type PatternFile = BTreeMap<String, Vec<PatternEntry>>;

pub fn patterns_to_file(set: &PatternSet, ontology: &Ontology) -> PatternFile {
    ontology
        .relation_types
        .iter()
        .enumerate()
        .map(|(r, name)| (name.clone(), set.patterns(r).to_vec()))
        .collect()
}

pub fn patterns_from_file(
    file: &PatternFile,
    ontology: &Ontology,
) -> Result<PatternSet, FormatError> {
    let mut set = PatternSet::new(ontology.relation_types.len());
    for (name, list) in file {
        let r = ontology
            .relation_index(name)
            .map_err(|_| FormatError::PatternRelation(name.clone()))?;
        for e in list {
            set.insert(r, e.clone());
        }
    }
    Ok(set)
}

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Everything needed to rebuild the model and resume bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub ontology: Ontology,
    pub rules: OntologyRules,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub train: TrainConfig,
    pub optimizer: AdamW,
    pub loop_index: usize,
    pub epoch: Option<usize>,
    pub patterns: PatternSet,
}

impl Checkpoint {
    pub fn to_model(&self, path: &Path) -> Result<Model, FormatError> {
        Model::from_parts(self.model.clone(), self.vocab.clone(), self.params.clone()).map_err(
            |source| FormatError::Model {
                path: path.to_path_buf(),
                source,
            },
        )
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), FormatError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, ckpt).map_err(json_err(path, 0))?;
    w.flush().map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, FormatError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut ckpt: Checkpoint =
        serde_json::from_reader(BufReader::new(file)).map_err(json_err(path, 0))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(FormatError::CheckpointFormat {
            path: path.to_path_buf(),
            found: ckpt.format,
        });
    }
    ckpt.vocab.reindex();
    Ok(ckpt)
}

/// Appends one JSON object per line.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, FormatError> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), FormatError> {
        let line = serde_json::to_string(record).map_err(json_err(&self.path, 0))?;
        writeln!(self.out, "{line}").map_err(io_err(&self.path))?;
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(json_err(path, i + 1)))
        .collect()
}
