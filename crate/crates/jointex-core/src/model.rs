//! The full tagger: encoder, position attention, emissions and decoder, with
//! the combined training loss and its gradient for one sentence at a time.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    decode_quadruplets, encode_tag_sequences, Polarity, Quadruplet, Sentence, TagSet,
};
use crate::crf::{self, CrfError};
use crate::encoder::{
    AttentionBundle, Encoder, EncoderConfig, EncoderError, SelfMatch, TransformerEncoder,
};
use crate::math::{axpy, linear, linear_backward, softmax, Mat};
use crate::params::{ParamId, ParamStore};
use crate::regularizers::{
    br_grad_rows, br_loss, guidance_for_instance, model_attention_summary, olf_loss, BowTable,
    OntologyRules,
};
use crate::rng::{apply_mask, Dropout, SeededRng};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error("parameter layout does not match the model configuration")]
    Layout,
    #[error("vocabulary has {got} entries but the encoder expects {want}")]
    VocabSize { got: usize, want: usize },
}

pub const UNKNOWN: &str = "<unk>";

/// Lowercased surface forms; id 0 is the unknown token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }

    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Self {
        let mut words = vec![UNKNOWN.to_string()];
        let mut seen = BTreeSet::new();
        for s in sentences {
            for t in &s.tokens {
                let w = t.to_lowercase();
                if seen.insert(w.clone()) {
                    words.push(w);
                }
            }
        }
        Self::from_words(words)
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(&token.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Crf,
    Fc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub tags: TagSet,
    pub decoder: DecoderKind,
}

/// What the loss needs beyond the sentence itself.
#[derive(Clone, Copy)]
pub struct LossContext<'a> {
    pub bow: &'a BowTable,
    pub rules: &'a OntologyRules,
    pub alpha: f64,
    pub beta: f64,
    pub use_br: bool,
    pub use_olf: bool,
}

/// Summed loss components over the instances of one call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub tagging: f64,
    pub br: f64,
    pub olf: f64,
    pub instances: usize,
    pub positives: usize,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.tagging += o.tagging;
        self.br += o.br;
        self.olf += o.olf;
        self.instances += o.instances;
        self.positives += o.positives;
    }

    pub fn total(&self, alpha: f64, beta: f64) -> f64 {
        crate::regularizers::total_loss(self.tagging, self.br, self.olf, alpha, beta)
    }
}

/// Eval-mode view of one start position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub bundle: AttentionBundle,
    pub emissions: Mat,
    pub summary: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Model<E: Encoder = TransformerEncoder> {
    config: ModelConfig,
    vocab: Vocab,
    params: ParamStore,
    encoder: E,
    matcher: SelfMatch,
    emission: ParamId,
    transitions: ParamId,
}

impl Model<TransformerEncoder> {
    /// Fresh model with seeded uniform init; `config.encoder.vocab_size` is set from `vocab`.
    pub fn new(
        mut config: ModelConfig,
        vocab: Vocab,
        rng: &mut SeededRng,
    ) -> Result<Self, ModelError> {
        config.encoder.vocab_size = vocab.len();
        let mut store = ParamStore::new();
        let encoder = TransformerEncoder::register(&config.encoder, &mut store)?;
        let mut model = Self::assemble(config, vocab, store, encoder);
        model.encoder.init(&mut model.params, rng);
        model.matcher.init(&mut model.params, rng);
        let b = 1.0 / libm::sqrt(2.0 * model.config.encoder.d_model as f64);
        model.params.init_uniform(model.emission, b, rng);
        Ok(model)
    }

    /// Rebuilds a model around stored parameters, checking the layout.
    pub fn from_parts(
        config: ModelConfig,
        mut vocab: Vocab,
        params: ParamStore,
    ) -> Result<Self, ModelError> {
        vocab.reindex();
        if vocab.len() != config.encoder.vocab_size {
            return Err(ModelError::VocabSize {
                got: vocab.len(),
                want: config.encoder.vocab_size,
            });
        }
        let mut store = ParamStore::new();
        let encoder = TransformerEncoder::register(&config.encoder, &mut store)?;
        let mut model = Self::assemble(config, vocab, store, encoder);
        if !model.params.same_layout(&params) {
            return Err(ModelError::Layout);
        }
        model.params = params;
        Ok(model)
    }
}

impl<E: Encoder> Model<E> {
    /// Adds the attention, emission and transition tensors after the encoder's own.
    pub fn assemble(config: ModelConfig, vocab: Vocab, mut store: ParamStore, encoder: E) -> Self {
        let d = encoder.width();
        let v = config.tags.size();
        let matcher = SelfMatch::register(d, &mut store);
        let emission = store.add("emission.weight", &[v, 2 * d]);
        let transitions = store.add("crf.transitions", &[v, v]);
        Model {
            config,
            vocab,
            params: store,
            encoder,
            matcher,
            emission,
            transitions,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tags(&self) -> TagSet {
        self.config.tags
    }

    pub fn transitions_id(&self) -> ParamId {
        self.transitions
    }

    pub fn score_vector_id(&self) -> ParamId {
        self.matcher.score_vector()
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Mat, ModelError> {
        Ok(self
            .encoder
            .encode(&self.params, &self.vocab.ids(tokens), None)?
            .0)
    }

    fn emissions(&self, features: &Mat) -> Mat {
        let v = self.config.tags.size();
        let data = linear(
            &features.data,
            features.rows,
            features.cols,
            self.params.get(self.emission),
            v,
            None,
        );
        Mat::from_vec(features.rows, v, data)
    }

    fn decode_path(&self, z: &Mat) -> Vec<usize> {
        match self.config.decoder {
            DecoderKind::Crf => crf::viterbi(z, self.params.get(self.transitions)),
            DecoderKind::Fc => crf::argmax_path(z),
        }
    }

    /// Attention and emissions for every requested start position (eval mode).
    pub fn analyze_many(
        &self,
        tokens: &[String],
        starts: &[usize],
    ) -> Result<Vec<Analysis>, ModelError> {
        let ids = self.vocab.ids(tokens);
        let (h, _) = self.encoder.encode(&self.params, &ids, None)?;
        let cache = self.matcher.prepare(&self.params, &h);
        starts
            .iter()
            .map(|&p| {
                let bundle = self.matcher.attend(&self.params, &h, &cache, p)?;
                let emissions = self.emissions(&bundle.features);
                let summary = model_attention_summary(&bundle.rows);
                Ok(Analysis {
                    bundle,
                    emissions,
                    summary,
                })
            })
            .collect()
    }

    pub fn analyze(&self, tokens: &[String], start: usize) -> Result<Analysis, ModelError> {
        Ok(self.analyze_many(tokens, &[start])?.remove(0))
    }

    /// Decoded tag sequence for every start position.
    pub fn predict_sequences(&self, tokens: &[String]) -> Result<Vec<Vec<usize>>, ModelError> {
        let starts: Vec<usize> = (0..tokens.len()).collect();
        Ok(self
            .analyze_many(tokens, &starts)?
            .iter()
            .map(|a| self.decode_path(&a.emissions))
            .collect())
    }

    pub fn extract(&self, tokens: &[String]) -> Result<BTreeSet<Quadruplet>, ModelError> {
        Ok(decode_quadruplets(
            &self.predict_sequences(tokens)?,
            &self.config.tags,
        ))
    }

    /// Loss over the instances of `sentence` starting at `starts`, using the
    /// sentence's own labels as gold. With `grad`, adds the gradient of
    /// `tagging + α·br + β·olf`. With `dropout`, runs in training mode.
    pub fn sentence_loss(
        &self,
        sentence: &Sentence,
        starts: &[usize],
        ctx: &LossContext<'_>,
        mut grad: Option<&mut [f64]>,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<LossParts, ModelError> {
        let tags = self.config.tags;
        let ids = self.vocab.ids(&sentence.tokens);
        let (h, enc_cache) = self
            .encoder
            .encode(&self.params, &ids, dropout.as_deref_mut())?;
        let mut sm_cache = self.matcher.prepare(&self.params, &h);
        let gold = encode_tag_sequences(sentence, &tags);
        let mut dh = Mat::zeros(h.rows, h.cols);
        let mut parts = LossParts::default();
        let trans = self.params.get(self.transitions);
        let v = tags.size();
        for &p in starts {
            let inst = gold
                .get(p)
                .ok_or(EncoderError::StartPosition { p, len: gold.len() })?;
            let bundle = self.matcher.attend(&self.params, &h, &sm_cache, p)?;
            let mut feats = bundle.features.clone();
            let mask = dropout
                .as_deref_mut()
                .and_then(|d| d.mask(feats.data.len()));
            apply_mask(&mut feats.data, &mask);
            let z = self.emissions(&feats);
            let (loss, mut dz, dtrans) = match self.config.decoder {
                DecoderKind::Crf => {
                    let g = crf::crf_nll_grad(&z, &inst.tags, trans)?;
                    (g.loss, g.d_emissions, Some(g.d_transitions))
                }
                DecoderKind::Fc => {
                    let (l, dz) = crf::softmax_nll_grad(&z, &inst.tags)?;
                    (l, dz, None)
                }
            };
            parts.tagging += loss;
            parts.instances += 1;
            let head = sentence.mention_starting_at(p);
            let mut d_rows = None;
            if inst.polarity == Polarity::Positive {
                parts.positives += 1;
                if let (true, Some(hm)) = (ctx.use_br, head) {
                    if let Some(guide) = guidance_for_instance(sentence, hm, ctx.bow) {
                        let summary = model_attention_summary(&bundle.rows);
                        parts.br += br_loss(&guide, &summary).expect("equal lengths");
                        let mut g = br_grad_rows(&guide, &summary, bundle.rows.rows);
                        for x in &mut g.data {
                            *x *= ctx.alpha;
                        }
                        d_rows = Some(g);
                    }
                }
            }
            if let (true, Some(hm)) = (ctx.use_olf, head) {
                let tails: Vec<usize> = sentence
                    .relations_of(hm)
                    .map(|r| sentence.mentions[r.tail].span.start)
                    .collect();
                let g = if grad.is_some() {
                    Some((&mut dz, ctx.beta))
                } else {
                    None
                };
                parts.olf += olf_loss(&z, p, &tails, ctx.rules, &tags, g);
            }
            if let Some(g) = grad.as_deref_mut() {
                if let Some(dt) = dtrans {
                    axpy(1.0, &dt, &mut g[self.transitions.range()]);
                }
                let width = feats.cols;
                let mut dw = vec![0.0; v * width];
                let mut dfeat = linear_backward(
                    &feats.data,
                    feats.rows,
                    width,
                    self.params.get(self.emission),
                    v,
                    &dz.data,
                    &mut dw,
                    None,
                );
                axpy(1.0, &dw, &mut g[self.emission.range()]);
                apply_mask(&mut dfeat, &mask);
                let dfeat = Mat::from_vec(feats.rows, width, dfeat);
                self.matcher.backward(
                    &self.params,
                    &h,
                    &mut sm_cache,
                    &bundle,
                    &dfeat,
                    d_rows.as_ref(),
                    &mut dh,
                    g,
                );
            }
        }
        if let Some(g) = grad {
            self.matcher.finish(&self.params, &h, &sm_cache, &mut dh, g);
            self.encoder.backward(&self.params, &enc_cache, &dh, g);
        }
        Ok(parts)
    }

    /// Per-token tag distributions for one start position (eval mode).
    pub fn tag_probabilities(&self, tokens: &[String], start: usize) -> Result<Mat, ModelError> {
        let a = self.analyze(tokens, start)?;
        let mut out = a.emissions.clone();
        for t in 0..out.rows {
            let p = softmax(a.emissions.row(t));
            out.row_mut(t).copy_from_slice(&p);
        }
        Ok(out)
    }
}
