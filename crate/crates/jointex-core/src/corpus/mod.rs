//! Sentences, mentions, the per-start-position tagging scheme and its decoder.

pub mod synth;

pub use synth::{synthesize_corpus, synthesize_splits, SynthConfig, SynthCorpus, SynthSplits};

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorpusError {
    #[error("ontology needs at least one entity type")]
    NoEntityTypes,
    #[error("ontology needs at least one relation type")]
    NoRelationTypes,
    #[error("duplicate label `{0}` in ontology")]
    DuplicateLabel(String),
    #[error("unknown entity type `{0}`")]
    UnknownEntityType(String),
    #[error("unknown relation type `{0}`")]
    UnknownRelationType(String),
    #[error("rate `{name}` = {value} is outside [0, 1]")]
    BadRate { name: &'static str, value: f64 },
    #[error("synthetic corpus needs {0}")]
    BadSynthConfig(&'static str),
}

/// Why a sentence failed validation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidSentence {
    #[error("sentence has no tokens")]
    Empty,
    #[error("mention {0} has an empty or out-of-bounds span")]
    BadSpan(usize),
    #[error("mentions {0} and {1} overlap")]
    Overlap(usize, usize),
    #[error("mention {0} has an entity type outside the ontology")]
    BadEntityType(usize),
    #[error("relation {0} references a missing mention")]
    DanglingRelation(usize),
    #[error("relation {0} links a mention to itself")]
    SelfRelation(usize),
    #[error("relation {0} has a relation type outside the ontology")]
    BadRelationType(usize),
}

/// Closed label sets for entities and relations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ontology {
    pub entity_types: Vec<String>,
    pub relation_types: Vec<String>,
}

impl Ontology {
    pub fn new(
        entity_types: Vec<String>,
        relation_types: Vec<String>,
    ) -> Result<Self, CorpusError> {
        if entity_types.is_empty() {
            return Err(CorpusError::NoEntityTypes);
        }
        if relation_types.is_empty() {
            return Err(CorpusError::NoRelationTypes);
        }
        let mut seen = BTreeSet::new();
        for l in entity_types.iter().chain(&relation_types) {
            if !seen.insert(l.as_str()) {
                return Err(CorpusError::DuplicateLabel(l.clone()));
            }
        }
        Ok(Ontology {
            entity_types,
            relation_types,
        })
    }

    pub fn entity_index(&self, label: &str) -> Result<usize, CorpusError> {
        self.entity_types
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| CorpusError::UnknownEntityType(label.into()))
    }

    pub fn relation_index(&self, label: &str) -> Result<usize, CorpusError> {
        self.relation_types
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| CorpusError::UnknownRelationType(label.into()))
    }

    pub fn tag_set(&self) -> TagSet {
        TagSet::new(self.entity_types.len(), self.relation_types.len())
    }
}

/// Half-open token interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub span: Span,
    pub entity_type: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationAnnotation {
    pub head: usize,
    pub tail: usize,
    pub relation_type: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub mentions: Vec<EntityMention>,
    pub relations: Vec<RelationAnnotation>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, ontology: &Ontology) -> Result<(), InvalidSentence> {
        if self.tokens.is_empty() {
            return Err(InvalidSentence::Empty);
        }
        for (i, m) in self.mentions.iter().enumerate() {
            if m.span.is_empty() || m.span.end > self.tokens.len() {
                return Err(InvalidSentence::BadSpan(i));
            }
            if m.entity_type >= ontology.entity_types.len() {
                return Err(InvalidSentence::BadEntityType(i));
            }
            for (j, o) in self.mentions.iter().enumerate().skip(i + 1) {
                if m.span.overlaps(&o.span) {
                    return Err(InvalidSentence::Overlap(i, j));
                }
            }
        }
        for (i, r) in self.relations.iter().enumerate() {
            if r.head >= self.mentions.len() || r.tail >= self.mentions.len() {
                return Err(InvalidSentence::DanglingRelation(i));
            }
            if r.head == r.tail {
                return Err(InvalidSentence::SelfRelation(i));
            }
            if r.relation_type >= ontology.relation_types.len() {
                return Err(InvalidSentence::BadRelationType(i));
            }
        }
        Ok(())
    }

    /// Keeps the first relation per (head, tail) pair. Returns how many were dropped.
    pub fn dedup_relations(&mut self) -> usize {
        let mut seen = BTreeSet::new();
        let before = self.relations.len();
        self.relations.retain(|r| seen.insert((r.head, r.tail)));
        before - self.relations.len()
    }

    pub fn mention_starting_at(&self, p: usize) -> Option<usize> {
        self.mentions.iter().position(|m| m.span.start == p)
    }

    pub fn surface(&self, span: Span) -> String {
        self.tokens[span.start..span.end].join(" ")
    }

    /// Relations headed by mention `head`, in annotation order.
    pub fn relations_of(&self, head: usize) -> impl Iterator<Item = &RelationAnnotation> {
        self.relations.iter().filter(move |r| r.head == head)
    }

    /// Quadruplets the tagging scheme is expected to reproduce: one per
    /// relation, and an entity-only record for every mention heading none.
    pub fn gold_quadruplets(&self) -> BTreeSet<Quadruplet> {
        let mut out = BTreeSet::new();
        for (i, m) in self.mentions.iter().enumerate() {
            let mut any = false;
            for r in self.relations_of(i) {
                any = true;
                out.insert(Quadruplet {
                    head: m.span,
                    head_type: m.entity_type,
                    tail: Some(self.mentions[r.tail].span),
                    relation: Some(r.relation_type),
                });
            }
            if !any {
                out.insert(Quadruplet::entity_only(m.span, m.entity_type));
            }
        }
        out
    }
}

/// Head entity, its type, and optionally a tail with the relation it holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Quadruplet {
    pub head: Span,
    pub head_type: usize,
    pub tail: Option<Span>,
    pub relation: Option<usize>,
}

impl Quadruplet {
    pub fn entity_only(head: Span, head_type: usize) -> Self {
        Quadruplet {
            head,
            head_type,
            tail: None,
            relation: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Label {
    Entity(usize),
    Relation(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tag {
    O,
    B(Label),
    I(Label),
}

impl Tag {
    pub fn label(self) -> Option<Label> {
        match self {
            Tag::O => None,
            Tag::B(l) | Tag::I(l) => Some(l),
        }
    }
}

/// Index layout: `O = 0`, then B/I pairs for every entity type, then B/I
/// pairs for every relation type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSet {
    pub entities: usize,
    pub relations: usize,
}

impl TagSet {
    pub fn new(entities: usize, relations: usize) -> Self {
        TagSet {
            entities,
            relations,
        }
    }

    pub fn size(&self) -> usize {
        1 + 2 * (self.entities + self.relations)
    }

    fn label_slot(&self, l: Label) -> usize {
        match l {
            Label::Entity(e) => e,
            Label::Relation(r) => self.entities + r,
        }
    }

    pub fn index(&self, tag: Tag) -> usize {
        match tag {
            Tag::O => 0,
            Tag::B(l) => 1 + 2 * self.label_slot(l),
            Tag::I(l) => 2 + 2 * self.label_slot(l),
        }
    }

    pub fn tag(&self, index: usize) -> Tag {
        if index == 0 || index >= self.size() {
            return Tag::O;
        }
        let slot = (index - 1) / 2;
        let label = if slot < self.entities {
            Label::Entity(slot)
        } else {
            Label::Relation(slot - self.entities)
        };
        if (index - 1).is_multiple_of(2) {
            Tag::B(label)
        } else {
            Tag::I(label)
        }
    }

    pub fn begin_entity(&self, e: usize) -> usize {
        self.index(Tag::B(Label::Entity(e)))
    }

    pub fn begin_relation(&self, r: usize) -> usize {
        self.index(Tag::B(Label::Relation(r)))
    }

    /// Relation type carried by tag `index`, if any.
    pub fn relation_of(&self, index: usize) -> Option<usize> {
        match self.tag(index).label() {
            Some(Label::Relation(r)) => Some(r),
            _ => None,
        }
    }

    pub fn is_bio_valid(&self, seq: &[usize]) -> bool {
        let mut prev = Tag::O;
        for &i in seq {
            let t = self.tag(i);
            if let Tag::I(l) = t {
                if prev.label() != Some(l) {
                    return false;
                }
            }
            prev = t;
        }
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

/// Gold tag sequence for one start position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub start: usize,
    pub tags: Vec<usize>,
    pub polarity: Polarity,
}

fn write_span(seq: &mut [usize], span: Span, label: Label, tags: &TagSet) {
    seq[span.start] = tags.index(Tag::B(label));
    for t in &mut seq[span.start + 1..span.end] {
        *t = tags.index(Tag::I(label));
    }
}

/// One instance per token position. Relation tags live only in the head's sequence.
pub fn encode_tag_sequences(sentence: &Sentence, tags: &TagSet) -> Vec<Instance> {
    let n = sentence.tokens.len();
    (0..n)
        .map(|p| {
            let mut seq = vec![0usize; n];
            let mut polarity = Polarity::Negative;
            if let Some(h) = sentence.mention_starting_at(p) {
                let m = &sentence.mentions[h];
                write_span(&mut seq, m.span, Label::Entity(m.entity_type), tags);
                for r in sentence.relations_of(h) {
                    let tail = sentence.mentions[r.tail].span;
                    write_span(&mut seq, tail, Label::Relation(r.relation_type), tags);
                    polarity = Polarity::Positive;
                }
            }
            Instance {
                start: p,
                tags: seq,
                polarity,
            }
        })
        .collect()
}

/// Reads quadruplets back from the per-position sequences (`seqs[p]` is the
/// sequence for start position `p`). Dangling `I-X` opens a new span.
pub fn decode_quadruplets(seqs: &[Vec<usize>], tags: &TagSet) -> BTreeSet<Quadruplet> {
    let mut out = BTreeSet::new();
    for (p, seq) in seqs.iter().enumerate() {
        if p >= seq.len() {
            continue;
        }
        let head_type = match tags.tag(seq[p]).label() {
            Some(Label::Entity(e)) => e,
            _ => continue,
        };
        let mut end = p + 1;
        while end < seq.len() && tags.tag(seq[end]) == Tag::I(Label::Entity(head_type)) {
            end += 1;
        }
        let head = Span::new(p, end);
        let mut found = false;
        for (span, r) in relation_spans(seq, tags) {
            if span.overlaps(&head) {
                continue;
            }
            found = true;
            out.insert(Quadruplet {
                head,
                head_type,
                tail: Some(span),
                relation: Some(r),
            });
        }
        if !found {
            out.insert(Quadruplet::entity_only(head, head_type));
        }
    }
    out
}

fn relation_spans(seq: &[usize], tags: &TagSet) -> Vec<(Span, usize)> {
    let mut spans = Vec::new();
    let mut k = 0;
    while k < seq.len() {
        match tags.tag(seq[k]) {
            Tag::B(Label::Relation(r)) | Tag::I(Label::Relation(r)) => {
                let start = k;
                k += 1;
                while k < seq.len() && tags.tag(seq[k]) == Tag::I(Label::Relation(r)) {
                    k += 1;
                }
                spans.push((Span::new(start, k), r));
            }
            _ => k += 1,
        }
    }
    spans
}

/// Entity type for every span that begins some sequence with an entity tag;
/// used to look up tail types.
pub fn entity_types_by_span(seqs: &[Vec<usize>], tags: &TagSet) -> BTreeMap<Span, usize> {
    decode_quadruplets(seqs, tags)
        .into_iter()
        .map(|q| (q.head, q.head_type))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn words(s: &str) -> Vec<String> {
        s.split(' ').map(|w| w.to_string()).collect()
    }

    /// "Microsoft is located in Albuquerque , New Mexico" shaped fixture.
    fn fixture() -> (Sentence, TagSet) {
        let tokens =
            words("Microsoft was founded in Albuquerque , New Mexico by Bill Gates in 1975 .");
        let mentions = vec![
            EntityMention {
                span: Span::new(0, 1),
                entity_type: 1,
            },
            EntityMention {
                span: Span::new(4, 5),
                entity_type: 2,
            },
            EntityMention {
                span: Span::new(6, 8),
                entity_type: 2,
            },
            EntityMention {
                span: Span::new(9, 11),
                entity_type: 0,
            },
        ];
        let relations = vec![
            RelationAnnotation {
                head: 0,
                tail: 1,
                relation_type: 0,
            },
            RelationAnnotation {
                head: 0,
                tail: 2,
                relation_type: 0,
            },
        ];
        let s = Sentence {
            id: "fig".into(),
            tokens,
            mentions,
            relations,
        };
        (s, TagSet::new(3, 2))
    }

    #[test]
    fn tag_indices_round_trip() {
        let ts = TagSet::new(3, 5);
        assert_eq!(ts.size(), 17);
        for i in 0..ts.size() {
            assert_eq!(ts.index(ts.tag(i)), i);
        }
    }

    #[test]
    fn head_sequence_carries_relation_tails() {
        let (s, ts) = fixture();
        let inst = encode_tag_sequences(&s, &ts);
        assert_eq!(inst.len(), s.len());
        let seq = &inst[0].tags;
        assert_eq!(ts.tag(seq[0]), Tag::B(Label::Entity(1)));
        assert_eq!(ts.tag(seq[4]), Tag::B(Label::Relation(0)));
        assert_eq!(ts.tag(seq[6]), Tag::B(Label::Relation(0)));
        assert_eq!(ts.tag(seq[7]), Tag::I(Label::Relation(0)));
        assert_eq!(seq.iter().filter(|&&t| t != 0).count(), 4);
        assert_eq!(inst[0].polarity, Polarity::Positive);
    }

    #[test]
    fn tail_sequence_has_only_its_type() {
        let (s, ts) = fixture();
        let inst = encode_tag_sequences(&s, &ts);
        let seq = &inst[4].tags;
        assert_eq!(ts.tag(seq[4]), Tag::B(Label::Entity(2)));
        assert_eq!(seq.iter().filter(|&&t| t != 0).count(), 1);
        assert_eq!(inst[4].polarity, Polarity::Negative);
    }

    #[test]
    fn position_without_entity_is_all_o() {
        let (s, ts) = fixture();
        let inst = encode_tag_sequences(&s, &ts);
        assert!(inst[12].tags.iter().all(|&t| t == 0));
        assert!(inst[7].tags.iter().all(|&t| t == 0));
    }

    #[test]
    fn round_trip_on_fixture() {
        let (s, ts) = fixture();
        let seqs: Vec<_> = encode_tag_sequences(&s, &ts)
            .into_iter()
            .map(|i| i.tags)
            .collect();
        assert_eq!(decode_quadruplets(&seqs, &ts), s.gold_quadruplets());
    }

    #[test]
    fn all_o_decodes_to_nothing() {
        let ts = TagSet::new(3, 5);
        let seqs = vec![vec![0; 4]; 4];
        assert!(decode_quadruplets(&seqs, &ts).is_empty());
    }

    #[test]
    fn single_head_and_tail() {
        let ts = TagSet::new(3, 5);
        let mut seqs = vec![vec![0; 5]; 5];
        seqs[1][1] = ts.begin_entity(0);
        seqs[1][3] = ts.begin_relation(0);
        let got = decode_quadruplets(&seqs, &ts);
        let want = Quadruplet {
            head: Span::new(1, 2),
            head_type: 0,
            tail: Some(Span::new(3, 4)),
            relation: Some(0),
        };
        assert_eq!(got.into_iter().collect::<Vec<_>>(), vec![want]);
    }

    #[test]
    fn dangling_inside_tag_is_repaired() {
        let ts = TagSet::new(3, 5);
        let mut seqs = vec![vec![0; 5]; 5];
        seqs[0][0] = ts.index(Tag::I(Label::Entity(2)));
        seqs[0][3] = ts.index(Tag::I(Label::Relation(1)));
        seqs[0][4] = ts.index(Tag::I(Label::Relation(1)));
        let got = decode_quadruplets(&seqs, &ts);
        assert!(got.contains(&Quadruplet {
            head: Span::new(0, 1),
            head_type: 2,
            tail: Some(Span::new(3, 5)),
            relation: Some(1)
        }));
        assert!(!ts.is_bio_valid(&seqs[0]));
    }

    #[test]
    fn validation_rejects_overlap() {
        let (mut s, ts) = fixture();
        let ont = Ontology::new(
            vec!["PER".into(), "ORG".into(), "LOC".into()],
            vec!["loc_in".into(), "founder".into()],
        )
        .unwrap();
        assert_eq!(ts, ont.tag_set());
        assert!(s.validate(&ont).is_ok());
        s.mentions[1].span = Span::new(0, 2);
        assert_eq!(s.validate(&ont), Err(InvalidSentence::Overlap(0, 1)));
    }

    #[test]
    fn dedup_keeps_first_relation() {
        let (mut s, _) = fixture();
        s.relations.push(RelationAnnotation {
            head: 0,
            tail: 1,
            relation_type: 1,
        });
        assert_eq!(s.dedup_relations(), 1);
        assert_eq!(s.relations[0].relation_type, 0);
    }
}
