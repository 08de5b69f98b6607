//! Synthetic distant-supervision corpus with planted patterns and controllable noise.
//!
//! A seed fixes a small world: entity names per type, keywords per relation,
//! and `patterns_per_relation` phrasings per relation with Zipf-like usage.
//! Relation noise swaps the phrasing for one that belongs to a relation with a
//! different type signature while the distant label stays; the clean copy drops
//! that relation. Entity noise corrupts a mention's type or right boundary in
//! the distant labels only.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, EntityMention, Ontology, RelationAnnotation, Sentence, Span};
use crate::regularizers::OntologyRules;
use crate::rng::{derived, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Training sentences.
    pub n_sentences: usize,
    /// Clean evaluation sentences (validation + test) for [`synthesize_splits`].
    pub eval_sentences: usize,
    pub entity_types: Vec<String>,
    pub relation_types: Vec<String>,
    pub patterns_per_relation: usize,
    pub relation_noise_rate: f64,
    pub entity_noise_rate: f64,
    pub negative_rate: f64,
    pub shared_head_rate: f64,
    pub entities_per_type: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sentences: 1600,
            eval_sentences: 400,
            entity_types: ["PERSON", "ORGANIZATION", "LOCATION"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            relation_types: [
                "founder_of",
                "located_in",
                "capital_of",
                "works_for",
                "born_in",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            patterns_per_relation: 10,
            relation_noise_rate: 0.3,
            entity_noise_rate: 0.1,
            negative_rate: 0.15,
            shared_head_rate: 0.15,
            entities_per_type: 60,
            seed: 0,
        }
    }
}

/// Distant labels plus the hidden truth for the same token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub ontology: Ontology,
    pub rules: OntologyRules,
    pub noisy: Vec<Sentence>,
    pub clean: Vec<Sentence>,
    /// Per noisy sentence, one flag per relation: true when the relation is a distant-label error.
    pub noise_flags: Vec<Vec<bool>>,
}

impl SynthCorpus {
    pub fn noisy_relation_count(&self) -> usize {
        self.noise_flags.iter().flatten().filter(|&&f| f).count()
    }

    pub fn relation_count(&self) -> usize {
        self.noise_flags.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplits {
    pub train: SynthCorpus,
    pub valid: Vec<Sentence>,
    pub test: Vec<Sentence>,
}

const FUNCTION_WORDS: [&str; 9] = ["of", "the", "at", "in", "for", ",", "a", "by", "its"];
const NEUTRAL_WORDS: [&str; 16] = [
    "met", "with", "and", "visited", "near", "after", "saw", "called", "talked", "to", "about",
    "beside", "while", "then", "greeted", "praised",
];
const FILLER_WORDS: [&str; 12] = [
    "yesterday",
    "today",
    "reportedly",
    "again",
    "last",
    "week",
    "said",
    "officials",
    "on",
    "monday",
    "recently",
    "too",
];
const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

struct Phrase {
    tokens: Vec<String>,
    /// Tail comes first ("<tail> <phrase> <head>").
    inverted: bool,
}

struct World {
    names: Vec<Vec<Vec<String>>>,
    phrases: Vec<Vec<Phrase>>,
    signature: Vec<(usize, usize)>,
}

fn fresh_word(rng: &mut SeededRng, used: &mut BTreeSet<String>) -> String {
    loop {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).unwrap());
            w.push_str(VOWELS.choose(rng).unwrap());
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

impl World {
    fn build(cfg: &SynthConfig) -> World {
        let mut rng = derived(cfg.seed, 1);
        let e = cfg.entity_types.len();
        let r = cfg.relation_types.len();
        let mut used: BTreeSet<String> = FUNCTION_WORDS
            .iter()
            .chain(&NEUTRAL_WORDS)
            .chain(&FILLER_WORDS)
            .map(|s| s.to_string())
            .collect();
        let mut names = Vec::with_capacity(e);
        for _ in 0..e {
            let pool: Vec<String> = (0..cfg.entities_per_type + 20)
                .map(|_| fresh_word(&mut rng, &mut used))
                .collect();
            let mut seen = BTreeSet::new();
            let mut ents = Vec::new();
            while ents.len() < cfg.entities_per_type {
                let n = *[1usize, 1, 2, 2, 3].choose(&mut rng).unwrap();
                let name: Vec<String> = (0..n)
                    .map(|_| pool.choose(&mut rng).unwrap().clone())
                    .collect();
                if seen.insert(name.clone()) {
                    ents.push(name);
                }
            }
            names.push(ents);
        }
        let mut phrases = Vec::with_capacity(r);
        for _ in 0..r {
            let keywords: Vec<String> = (0..4).map(|_| fresh_word(&mut rng, &mut used)).collect();
            let mut seen = BTreeSet::new();
            let mut list = Vec::new();
            while list.len() < cfg.patterns_per_relation {
                let len = *[1usize, 2, 2, 3, 3, 4].choose(&mut rng).unwrap();
                let mut toks: Vec<String> = (0..len)
                    .map(|_| {
                        if rng.gen_bool(0.5) {
                            keywords.choose(&mut rng).unwrap().clone()
                        } else {
                            FUNCTION_WORDS.choose(&mut rng).unwrap().to_string()
                        }
                    })
                    .collect();
                if !toks.iter().any(|t| keywords.contains(t)) {
                    let i = rng.gen_range(0..len);
                    toks[i] = keywords.choose(&mut rng).unwrap().clone();
                }
                if seen.insert(toks.clone()) {
                    let inverted = list.len() % 4 == 1;
                    list.push(Phrase {
                        tokens: toks,
                        inverted,
                    });
                }
            }
            phrases.push(list);
        }
        let signature = (0..r).map(|i| (i % e, (i + 1) % e)).collect();
        World {
            names,
            phrases,
            signature,
        }
    }
}

struct Draft {
    tokens: Vec<String>,
    mentions: Vec<EntityMention>,
    relations: Vec<RelationAnnotation>,
    flags: Vec<bool>,
}

impl Draft {
    fn mention(&mut self, world: &World, ty: usize, rng: &mut SeededRng) -> usize {
        let name = world.names[ty].choose(rng).unwrap();
        let start = self.tokens.len();
        self.tokens.extend(name.iter().cloned());
        self.mentions.push(EntityMention {
            span: Span::new(start, self.tokens.len()),
            entity_type: ty,
        });
        self.mentions.len() - 1
    }

    fn words(&mut self, pool: &[&str], lo: usize, hi: usize, rng: &mut SeededRng) {
        let n = rng.gen_range(lo..=hi);
        for _ in 0..n {
            self.tokens.push(pool.choose(rng).unwrap().to_string());
        }
    }
}

fn zipf_pick<'a>(
    list: &'a [Phrase],
    inverted: Option<bool>,
    rng: &mut SeededRng,
) -> Option<&'a Phrase> {
    let cands: Vec<(usize, &Phrase)> = list
        .iter()
        .enumerate()
        .filter(|(_, p)| inverted.is_none_or(|inv| p.inverted == inv))
        .collect();
    if cands.is_empty() {
        return None;
    }
    let total: f64 = cands.iter().map(|(i, _)| 1.0 / (*i as f64 + 1.0)).sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, p) in &cands {
        x -= 1.0 / (*i as f64 + 1.0);
        if x <= 0.0 {
            return Some(p);
        }
    }
    cands.last().map(|(_, p)| *p)
}

/// Context of a sentence that mentions a KB pair without expressing the
/// fact: neutral words with an optional function word.
fn distractor(rng: &mut SeededRng) -> Vec<String> {
    let n = rng.gen_range(1..=3);
    let mut out: Vec<String> = (0..n)
        .map(|_| NEUTRAL_WORDS.choose(rng).unwrap().to_string())
        .collect();
    if rng.gen_bool(0.5) {
        let i = rng.gen_range(0..=out.len());
        out.insert(i, FUNCTION_WORDS.choose(rng).unwrap().to_string());
    }
    out
}

fn phrase_for(
    world: &World,
    r: usize,
    inverted: bool,
    noise: f64,
    rng: &mut SeededRng,
) -> (Vec<String>, bool) {
    if rng.gen_bool(noise) {
        (distractor(rng), true)
    } else {
        (
            zipf_pick(&world.phrases[r], Some(inverted), rng)
                .map(|p| p.tokens.clone())
                .unwrap_or_default(),
            false,
        )
    }
}

fn draft_sentence(world: &World, cfg: &SynthConfig, noise: f64, rng: &mut SeededRng) -> Draft {
    let e = cfg.entity_types.len();
    let r_count = cfg.relation_types.len();
    let mut d = Draft {
        tokens: Vec::new(),
        mentions: Vec::new(),
        relations: Vec::new(),
        flags: Vec::new(),
    };
    if rng.gen_bool(0.3) {
        d.words(&FILLER_WORDS, 1, 2, rng);
    }
    let u: f64 = rng.gen();
    if u < cfg.negative_rate {
        d.mention(world, rng.gen_range(0..e), rng);
        d.words(&NEUTRAL_WORDS, 1, 3, rng);
        d.mention(world, rng.gen_range(0..e), rng);
    } else if u > 1.0 - cfg.shared_head_rate && shared_head(world, &mut d, noise, rng) {
        // "<tail1> <inverted phrase> <head> <phrase> <tail2>"
    } else {
        let r = rng.gen_range(0..r_count);
        let (ht, tt) = world.signature[r];
        let planned = zipf_pick(&world.phrases[r], None, rng).expect("relation has phrases");
        let inverted = planned.inverted;
        let (phrase, flag) = if rng.gen_bool(noise) {
            (distractor(rng), true)
        } else {
            (planned.tokens.clone(), false)
        };
        let (h, t) = if inverted {
            let t = d.mention(world, tt, rng);
            d.tokens.extend(phrase);
            (d.mention(world, ht, rng), t)
        } else {
            let h = d.mention(world, ht, rng);
            d.tokens.extend(phrase);
            (h, d.mention(world, tt, rng))
        };
        d.relations.push(RelationAnnotation {
            head: h,
            tail: t,
            relation_type: r,
        });
        d.flags.push(flag);
    }
    if rng.gen_bool(0.5) {
        d.words(&FILLER_WORDS, 1, 3, rng);
    }
    d
}

fn shared_head(world: &World, d: &mut Draft, noise: f64, rng: &mut SeededRng) -> bool {
    let r_count = world.phrases.len();
    let heads: Vec<usize> = {
        let mut s: Vec<usize> = (0..r_count)
            .filter(|&r| world.phrases[r].iter().any(|p| p.inverted))
            .map(|r| world.signature[r].0)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let Some(&ht) = heads.choose(rng) else {
        return false;
    };
    let first: Vec<usize> = (0..r_count)
        .filter(|&r| world.signature[r].0 == ht && world.phrases[r].iter().any(|p| p.inverted))
        .collect();
    let second: Vec<usize> = (0..r_count)
        .filter(|&r| world.signature[r].0 == ht && world.phrases[r].iter().any(|p| !p.inverted))
        .collect();
    let (Some(&r1), Some(&r2)) = (first.choose(rng), second.choose(rng)) else {
        return false;
    };
    let t1 = d.mention(world, world.signature[r1].1, rng);
    let (p1, f1) = phrase_for(world, r1, true, noise, rng);
    d.tokens.extend(p1);
    let h = d.mention(world, ht, rng);
    let (p2, f2) = phrase_for(world, r2, false, noise, rng);
    d.tokens.extend(p2);
    let t2 = d.mention(world, world.signature[r2].1, rng);
    d.relations.push(RelationAnnotation {
        head: h,
        tail: t1,
        relation_type: r1,
    });
    d.relations.push(RelationAnnotation {
        head: h,
        tail: t2,
        relation_type: r2,
    });
    d.flags.push(f1);
    d.flags.push(f2);
    true
}

fn corrupt_mentions(
    mentions: &mut [EntityMention],
    entity_types: usize,
    rate: f64,
    rng: &mut SeededRng,
) {
    for m in mentions {
        if !rng.gen_bool(rate) {
            continue;
        }
        let retype = rng.gen_bool(0.5) || m.span.len() < 2;
        if retype {
            if entity_types > 1 {
                let shift = rng.gen_range(1..entity_types);
                m.entity_type = (m.entity_type + shift) % entity_types;
            }
        } else {
            m.span.end -= 1;
        }
    }
}

fn check(cfg: &SynthConfig) -> Result<Ontology, CorpusError> {
    for (name, value) in [
        ("relation_noise_rate", cfg.relation_noise_rate),
        ("entity_noise_rate", cfg.entity_noise_rate),
        ("negative_rate", cfg.negative_rate),
        ("shared_head_rate", cfg.shared_head_rate),
    ] {
        if !(0.0..=1.0).contains(&value) {
            return Err(CorpusError::BadRate { name, value });
        }
    }
    if cfg.patterns_per_relation == 0 {
        return Err(CorpusError::BadSynthConfig(
            "at least one pattern per relation",
        ));
    }
    if cfg.entities_per_type == 0 {
        return Err(CorpusError::BadSynthConfig("at least one entity per type"));
    }
    Ontology::new(cfg.entity_types.clone(), cfg.relation_types.clone())
}

fn rules_for(world: &World) -> OntologyRules {
    OntologyRules::new(
        world
            .signature
            .iter()
            .enumerate()
            .map(|(r, &(h, _))| (r, h))
            .collect(),
    )
}

fn generate(
    world: &World,
    cfg: &SynthConfig,
    n: usize,
    prefix: &str,
    rel_noise: f64,
    ent_noise: f64,
    rng: &mut SeededRng,
) -> SynthCorpus {
    let mut out = SynthCorpus {
        ontology: Ontology {
            entity_types: cfg.entity_types.clone(),
            relation_types: cfg.relation_types.clone(),
        },
        rules: rules_for(world),
        noisy: Vec::with_capacity(n),
        clean: Vec::with_capacity(n),
        noise_flags: Vec::with_capacity(n),
    };
    for i in 0..n {
        let d = draft_sentence(world, cfg, rel_noise, rng);
        let id = format!("{prefix}-{i:06}");
        let clean_rel = d
            .relations
            .iter()
            .zip(&d.flags)
            .filter(|(_, &f)| !f)
            .map(|(r, _)| r.clone())
            .collect();
        let clean = Sentence {
            id: id.clone(),
            tokens: d.tokens.clone(),
            mentions: d.mentions.clone(),
            relations: clean_rel,
        };
        let mut mentions = d.mentions;
        corrupt_mentions(&mut mentions, cfg.entity_types.len(), ent_noise, rng);
        out.noisy.push(Sentence {
            id,
            tokens: d.tokens,
            mentions,
            relations: d.relations,
        });
        out.clean.push(clean);
        out.noise_flags.push(d.flags);
    }
    out
}

/// Distant-labelled training corpus and its hidden clean labels.
pub fn synthesize_corpus(cfg: &SynthConfig) -> Result<SynthCorpus, CorpusError> {
    check(cfg)?;
    let world = World::build(cfg);
    let mut rng = derived(cfg.seed, 2);
    Ok(generate(
        &world,
        cfg,
        cfg.n_sentences,
        "train",
        cfg.relation_noise_rate,
        cfg.entity_noise_rate,
        &mut rng,
    ))
}

/// Training corpus plus validation and test sentences from the same world,
/// carrying clean labels. Validation is a seeded 10% sample of the evaluation sentences.
pub fn synthesize_splits(cfg: &SynthConfig) -> Result<SynthSplits, CorpusError> {
    let train = synthesize_corpus(cfg)?;
    let world = World::build(cfg);
    let mut rng = derived(cfg.seed, 3);
    // Same sentence distribution as training, distractor contexts included,
    // scored against the hidden clean labels.
    let eval = generate(
        &world,
        cfg,
        cfg.eval_sentences,
        "eval",
        cfg.relation_noise_rate,
        0.0,
        &mut rng,
    )
    .clean;
    let n_valid = libm::ceil(eval.len() as f64 * 0.1) as usize;
    let mut order: Vec<usize> = (0..eval.len()).collect();
    order.shuffle(&mut derived(cfg.seed, 4));
    let valid_ids: BTreeSet<usize> = order[..n_valid.min(eval.len())].iter().copied().collect();
    let (mut valid, mut test) = (Vec::new(), Vec::new());
    for (i, s) in eval.into_iter().enumerate() {
        if valid_ids.contains(&i) {
            valid.push(s);
        } else {
            test.push(s);
        }
    }
    Ok(SynthSplits { train, valid, test })
}
