mod common;

use std::collections::{BTreeMap, BTreeSet};

use jointex_core::corpus::{
    decode_quadruplets, encode_tag_sequences, Polarity, Quadruplet, Sentence, Span, TagSet,
};
use jointex_core::crf::{crf_nll, log_partition, path_score, viterbi};
use jointex_core::evaluation::{score, MatchMode};
use jointex_core::math::Mat;
use jointex_core::model::DecoderKind;
use jointex_core::regularizers::{guidance_for_instance, logic_distance, BowTable, OntologyRules};
use jointex_core::sal::{mine_patterns, FitnessScore, PatternSet};
use jointex_core::trainer::InstanceRef;
use proptest::prelude::*;

const ENTITIES: usize = 3;
const RELATIONS: usize = 4;
const WORDS: [&str; 8] = ["of", "the", "at", "ceo", "in", "x", "y", "z"];

/// Random valid sentence: non-overlapping mentions (possibly multi-token),
/// relations between distinct mentions, at most one per ordered pair.
fn arb_sentence() -> impl Strategy<Value = Sentence> {
    (2usize..14)
        .prop_flat_map(|n| {
            (
                Just(n),
                prop::collection::vec(0usize..WORDS.len(), n),
                prop::collection::vec((0usize..3, 1usize..3, 0usize..ENTITIES), 0..5),
                prop::collection::vec((0usize..5, 0usize..5, 0usize..RELATIONS), 0..6),
            )
        })
        .prop_map(|(n, words, raw_mentions, raw_rels)| {
            let tokens = words.iter().map(|&w| WORDS[w].to_string()).collect();
            let mut mentions = Vec::new();
            let mut cursor = 0;
            for (gap, len, ty) in raw_mentions {
                let start = cursor + gap;
                let end = start + len;
                if end > n {
                    break;
                }
                mentions.push(jointex_core::EntityMention {
                    span: Span::new(start, end),
                    entity_type: ty,
                });
                cursor = end;
            }
            let mut relations = Vec::new();
            let mut seen = BTreeSet::new();
            if mentions.len() >= 2 {
                for (h, t, r) in raw_rels {
                    let (h, t) = (h % mentions.len(), t % mentions.len());
                    if h != t && seen.insert((h, t)) {
                        relations.push(jointex_core::RelationAnnotation {
                            head: h,
                            tail: t,
                            relation_type: r,
                        });
                    }
                }
            }
            Sentence {
                id: "s".into(),
                tokens,
                mentions,
                relations,
            }
        })
}

fn tags() -> TagSet {
    TagSet::new(ENTITIES, RELATIONS)
}

fn arb_simplex(v: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, v).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tag_round_trip(s in arb_sentence()) {
        let seqs: Vec<Vec<usize>> = encode_tag_sequences(&s, &tags()).into_iter().map(|i| i.tags).collect();
        prop_assert_eq!(decode_quadruplets(&seqs, &tags()), s.gold_quadruplets());
    }

    #[test]
    fn one_valid_instance_per_token(s in arb_sentence()) {
        let inst = encode_tag_sequences(&s, &tags());
        prop_assert_eq!(inst.len(), s.tokens.len());
        for (p, i) in inst.iter().enumerate() {
            prop_assert_eq!(i.start, p);
            prop_assert!(tags().is_bio_valid(&i.tags));
        }
        let heads: BTreeSet<usize> = s.relations.iter().map(|r| s.mentions[r.head].span.start).collect();
        let positives: BTreeSet<usize> = inst.iter().filter(|i| i.polarity == Polarity::Positive).map(|i| i.start).collect();
        prop_assert_eq!(positives, heads);
    }

    #[test]
    fn guidance_is_a_distribution(s in arb_sentence(), counts in prop::collection::vec(0u32..20, WORDS.len())) {
        let mut bow = BowTable::new(RELATIONS);
        for (w, &c) in WORDS.iter().zip(&counts) {
            for r in 0..RELATIONS {
                for _ in 0..c {
                    bow.add_pattern(r, w);
                }
            }
        }
        for h in 0..s.mentions.len() {
            match guidance_for_instance(&s, h, &bow) {
                Some(g) => {
                    prop_assert_eq!(g.len(), s.tokens.len());
                    prop_assert!(g.iter().all(|&x| (0.0..=1.0).contains(&x)));
                    prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
                None => prop_assert!(s.relations_of(h).next().is_none()),
            }
        }
    }

    #[test]
    fn logic_distance_bounds_and_monotonicity(
        head in arb_simplex(1 + 2 * (ENTITIES + RELATIONS)),
        tail in arb_simplex(1 + 2 * (ENTITIES + RELATIONS)),
        rel in 0usize..RELATIONS,
        ent in 0usize..ENTITIES,
        bump in 0.0f64..0.5,
    ) {
        let t = tags();
        let rules = OntologyRules::new(vec![(rel, ent)]);
        let yhat2 = t.begin_relation(rel);
        let d = logic_distance(&head, &tail, 0, yhat2, &rules, &t);
        prop_assert!((0.0..=1.0).contains(&d.value));
        if head[t.begin_entity(ent)] >= tail[yhat2] {
            prop_assert_eq!(d.value, 0.0);
        }
        // more confidence in the entailed head type never raises the distance
        let mut more = head.clone();
        more[t.begin_entity(ent)] += bump;
        let s: f64 = more.iter().sum();
        more.iter_mut().for_each(|x| *x /= s);
        let d2 = logic_distance(&more, &tail, 0, yhat2, &rules, &t);
        prop_assert!(d2.value <= d.value + 1e-12, "{} > {}", d2.value, d.value);
        let unrelated = OntologyRules::new(vec![((rel + 1) % RELATIONS, ent)]);
        prop_assert_eq!(logic_distance(&head, &tail, 0, yhat2, &unrelated, &t).value, 0.0);
    }

    #[test]
    fn fitness_is_a_monotone_probability(a in 0.0f64..5.0, b in 0.0f64..5.0, da in 0.001f64..1.0) {
        let f = FitnessScore::new(a, b);
        prop_assert!(f.u > 0.0 && f.u < 1.0);
        prop_assert!(FitnessScore::new(a + da, b).u >= f.u);
        prop_assert!(FitnessScore::new(a, b + da).u >= f.u);
    }

    #[test]
    fn viterbi_and_partition_match_enumeration(
        n in 1usize..5,
        v in 1usize..5,
        seed in prop::collection::vec(-3.0f64..3.0, 4 * 4 + 4 * 4),
    ) {
        let z = Mat::from_vec(n, v, seed[..n * v].to_vec());
        let trans = seed[16..16 + v * v].to_vec();
        let mut best = (f64::NEG_INFINITY, Vec::new());
        let mut total = 0.0f64;
        // lexicographic order, so strict `>` keeps the lowest-index path on ties
        for code in 0..v.pow(n as u32) {
            let path: Vec<usize> = (0..n).map(|i| code / v.pow((n - 1 - i) as u32) % v).collect();
            let s = path_score(&z, &path, &trans);
            total += s.exp();
            if s > best.0 {
                best = (s, path);
            }
        }
        prop_assert!((log_partition(&z, &trans) - total.ln()).abs() < 1e-9);
        prop_assert_eq!(viterbi(&z, &trans), best.1.clone());
        prop_assert!(crf_nll(&z, &best.1, &trans).unwrap() >= 0.0);
    }

    #[test]
    fn triplet_f1_dominates_and_order_is_irrelevant(
        gold in prop::collection::vec((0usize..6, 0usize..3, 0usize..6, 0usize..3), 0..8),
        pred in prop::collection::vec((0usize..6, 0usize..3, 0usize..6, 0usize..3), 0..8),
    ) {
        let q = |&(h, ty, t, r): &(usize, usize, usize, usize)| Quadruplet {
            head: Span::new(h, h + 1), head_type: ty, tail: Some(Span::new(t, t + 1)), relation: Some(r),
        };
        // the head type of a gold span is a property of the span
        let gold_typed: Vec<_> = gold.iter().map(|&(h, _, t, r)| (h, h % 3, t, r)).collect();
        let split = |items: &[(usize, usize, usize, usize)]| {
            let mut m: BTreeMap<String, BTreeSet<Quadruplet>> = BTreeMap::new();
            m.insert("a".into(), BTreeSet::new());
            m.insert("b".into(), BTreeSet::new());
            for (i, x) in items.iter().enumerate() {
                m.get_mut(if i % 2 == 0 { "a" } else { "b" }).unwrap().insert(q(x));
            }
            m
        };
        let (g, p) = (split(&gold_typed), split(&pred));
        let quad = score(&p, &g, MatchMode::Quadruplet).unwrap();
        let trip = score(&p, &g, MatchMode::Triplet).unwrap();
        prop_assert!(trip.f1 + 1e-12 >= quad.f1);
        let mut rev_pred = pred.clone();
        rev_pred.reverse();
        let all_in_a = |items: &[(usize, usize, usize, usize)]| {
            let mut m: BTreeMap<String, BTreeSet<Quadruplet>> = BTreeMap::new();
            m.insert("a".into(), items.iter().map(q).collect());
            m
        };
        let one = score(&all_in_a(&pred), &all_in_a(&gold_typed), MatchMode::Quadruplet).unwrap();
        let two = score(&all_in_a(&rev_pred), &all_in_a(&gold_typed), MatchMode::Quadruplet).unwrap();
        prop_assert_eq!(one, two);
        prop_assert!((0.0..=1.0).contains(&quad.f1));
    }

    #[test]
    fn pattern_set_grows_by_at_most_k(
        pats in prop::collection::vec((0usize..4, 0usize..2), 1..30),
        k in 0usize..4,
    ) {
        let corpus: Vec<Sentence> = pats.iter().enumerate().map(|(i, &(p, r))| {
            let mut s = common::sentence(&format!("a p{p} b"), &[(0, 1, 0), (2, 3, 1)], &[(0, 1, r)]);
            s.id = i.to_string();
            s
        }).collect();
        let selected: Vec<InstanceRef> = (0..corpus.len()).map(|i| InstanceRef { sentence: i, start: 0 }).collect();
        let mut set = PatternSet::new(2);
        for round in 1..4 {
            let before = set.clone();
            mine_patterns(&corpus, &selected, &mut set, k, round);
            for r in 0..2 {
                prop_assert!(set.patterns(r).len() <= before.patterns(r).len() + k);
                for e in before.patterns(r) {
                    prop_assert!(set.contains(r, &e.pattern));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_rows_are_distributions(s in arb_sentence(), start in 0usize..14, seed in 0u64..1000) {
        let m = common::tiny_model(std::slice::from_ref(&s), ENTITIES, RELATIONS, DecoderKind::Crf, seed);
        let p = start % s.tokens.len();
        let a = m.analyze(&s.tokens, p).unwrap();
        for t in 0..a.bundle.rows.rows {
            let row = a.bundle.rows.row(t);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert!((a.summary.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
