#![allow(dead_code)]

use jointex_core::corpus::{EntityMention, RelationAnnotation, Sentence, Span, TagSet};
use jointex_core::encoder::EncoderConfig;
use jointex_core::model::{DecoderKind, Model, ModelConfig, Vocab};
use jointex_core::rng::seeded;

pub fn sentence(
    text: &str,
    mentions: &[(usize, usize, usize)],
    relations: &[(usize, usize, usize)],
) -> Sentence {
    Sentence {
        id: text.replace(' ', "_"),
        tokens: text.split(' ').map(String::from).collect(),
        mentions: mentions
            .iter()
            .map(|&(s, e, t)| EntityMention {
                span: Span::new(s, e),
                entity_type: t,
            })
            .collect(),
        relations: relations
            .iter()
            .map(|&(h, t, r)| RelationAnnotation {
                head: h,
                tail: t,
                relation_type: r,
            })
            .collect(),
    }
}

/// d = 8, two layers, two heads.
pub fn tiny_config(entities: usize, relations: usize, decoder: DecoderKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 0,
            d_model: 8,
            layers: 2,
            heads: 2,
            ffn: 16,
            max_len: 16,
            dropout: 0.0,
        },
        tags: TagSet::new(entities, relations),
        decoder,
    }
}

pub fn tiny_model(
    sentences: &[Sentence],
    entities: usize,
    relations: usize,
    decoder: DecoderKind,
    seed: u64,
) -> Model {
    let vocab = Vocab::build(sentences);
    Model::new(
        tiny_config(entities, relations, decoder),
        vocab,
        &mut seeded(seed),
    )
    .unwrap()
}
