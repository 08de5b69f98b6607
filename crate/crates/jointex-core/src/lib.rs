//! Core of a distantly supervised joint entity and relation extractor.
//!
//! Everything here is `no_std` with `alloc`: the tagging scheme, a small
//! transformer with hand-written backward passes, the CRF, the two noise
//! regularizers, the self-adaptive selection loop and the scorer. File formats
//! and the command line live in the `jointex` crate.
#![no_std]

extern crate alloc;

pub mod corpus;
pub mod crf;
pub mod encoder;
pub mod evaluation;
pub mod math;
pub mod model;
pub mod params;
pub mod regularizers;
pub mod rng;
pub mod sal;
pub mod trainer;

pub use corpus::{
    decode_quadruplets, encode_tag_sequences, EntityMention, Instance, Ontology, Polarity,
    Quadruplet, RelationAnnotation, Sentence, Span, Tag, TagSet,
};
pub use evaluation::{EvalReport, MatchMode};
pub use model::{DecoderKind, Model, ModelConfig};
pub use regularizers::{BowTable, OntologyRules};
pub use sal::{FitnessScore, PatternSet};
pub use trainer::{TrainConfig, Trainer};
