//! Mini-batch AdamW training over instance subsets, plus a finite-difference
//! gradient checker.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sentence;
use crate::model::{DecoderKind, LossContext, LossParts, Model, ModelError};
use crate::rng::{derived, Dropout, SeededRng};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no instances to train on")]
    EmptySubset,
    #[error("non-finite loss in batch {batch}: tagging {tagging}, br {br}, olf {olf}")]
    NonFinite {
        batch: usize,
        tagging: f64,
        br: f64,
        olf: f64,
    },
    #[error("instance ({sentence}, {start}) is outside the corpus")]
    UnknownInstance { sentence: usize, start: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub k_new_patterns: usize,
    pub top_percent: f64,
    pub first_loop_epochs: usize,
    pub later_loop_epochs: usize,
    pub patience: usize,
    pub min_gain: f64,
    pub max_loops: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub use_br: bool,
    pub use_olf: bool,
    pub use_sal: bool,
    pub use_idr: bool,
    pub use_es: bool,
    pub decoder: DecoderKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.5,
            learning_rate: 5e-4,
            weight_decay: 0.01,
            dropout: 0.2,
            batch_size: 8,
            tau: 0.5,
            k_new_patterns: 5,
            top_percent: 0.10,
            first_loop_epochs: 5,
            later_loop_epochs: 1,
            patience: 2,
            min_gain: 0.1,
            max_loops: 20,
            clip_norm: None,
            seed: 0,
            use_br: true,
            use_olf: true,
            use_sal: true,
            use_idr: true,
            use_es: true,
            decoder: DecoderKind::Crf,
        }
    }
}

/// One instance: a sentence index and a start position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceRef {
    pub sentence: usize,
    pub start: usize,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamW {
    pub fn new(len: usize, learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first_moment: alloc::vec![0.0; len],
            second_moment: alloc::vec![0.0; len],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let lr = self.learning_rate;
        let c1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for i in 0..params.len() {
            let g = grad[i];
            params[i] -= lr * self.weight_decay * params[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            params[i] -= lr * (m / c1) / (libm::sqrt(v / c2) + self.eps);
        }
    }
}

/// Per-instance mean losses of one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub tagging: f64,
    pub br: f64,
    pub olf: f64,
    pub total: f64,
    pub instances: usize,
    pub positives: usize,
    pub batches: usize,
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    rng: SeededRng,
    epochs: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Self {
        let optimizer = AdamW::new(
            model.params().len(),
            config.learning_rate,
            config.weight_decay,
        );
        let rng = derived(config.seed, 0x0074_7261_696e);
        Trainer {
            model,
            optimizer,
            config,
            rng,
            epochs: 0,
        }
    }

    pub fn epochs_run(&self) -> u64 {
        self.epochs
    }

    /// Shuffles sentences, lays their instances out contiguously, and updates
    /// once per `batch_size` instances. The encoder runs once per
    /// (sentence, batch) pair.
    pub fn train_epoch(
        &mut self,
        corpus: &[Sentence],
        subset: &[InstanceRef],
        ctx: &LossContext<'_>,
    ) -> Result<EpochStats, TrainError> {
        if subset.is_empty() {
            return Err(TrainError::EmptySubset);
        }
        let mut by_sentence: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for r in subset {
            let s = corpus.get(r.sentence).ok_or(TrainError::UnknownInstance {
                sentence: r.sentence,
                start: r.start,
            })?;
            if r.start >= s.tokens.len() {
                return Err(TrainError::UnknownInstance {
                    sentence: r.sentence,
                    start: r.start,
                });
            }
            by_sentence.entry(r.sentence).or_default().push(r.start);
        }
        let mut order: Vec<usize> = by_sentence.keys().copied().collect();
        order.shuffle(&mut self.rng);
        let stream: Vec<InstanceRef> = order
            .iter()
            .flat_map(|&s| {
                by_sentence[&s].iter().map(move |&p| InstanceRef {
                    sentence: s,
                    start: p,
                })
            })
            .collect();
        let mut grad = self.model.params().zeros_like();
        let mut totals = LossParts::default();
        let mut batches = 0;
        for (b, batch) in stream.chunks(self.config.batch_size.max(1)).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut parts = LossParts::default();
            let mut i = 0;
            while i < batch.len() {
                let s = batch[i].sentence;
                let mut j = i;
                while j < batch.len() && batch[j].sentence == s {
                    j += 1;
                }
                let starts: Vec<usize> = batch[i..j].iter().map(|r| r.start).collect();
                let mut drop = Dropout::new(self.config.dropout, &mut self.rng);
                let p = self.model.sentence_loss(
                    &corpus[s],
                    &starts,
                    ctx,
                    Some(&mut grad),
                    Some(&mut drop),
                )?;
                parts.add(&p);
                i = j;
            }
            if !(parts.tagging.is_finite() && parts.br.is_finite() && parts.olf.is_finite()) {
                return Err(TrainError::NonFinite {
                    batch: b,
                    tagging: parts.tagging,
                    br: parts.br,
                    olf: parts.olf,
                });
            }
            if let Some(max) = self.config.clip_norm {
                let norm = libm::sqrt(grad.iter().map(|g| g * g).sum::<f64>());
                if norm > max {
                    grad.iter_mut().for_each(|g| *g *= max / norm);
                }
            }
            self.optimizer
                .update(self.model.params_mut().data_mut(), &grad);
            totals.add(&parts);
            batches += 1;
        }
        self.epochs += 1;
        let n = totals.instances.max(1) as f64;
        Ok(EpochStats {
            tagging: totals.tagging / n,
            br: totals.br / n,
            olf: totals.olf / n,
            total: totals.total(ctx.alpha, ctx.beta) / n,
            instances: totals.instances,
            positives: totals.positives,
            batches,
        })
    }
}

/// Result of comparing analytic and numerical gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-tensor `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, 1e-6·max(|L|, 1))`.
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub per_tensor: Vec<(String, f64)>,
}

/// Absolute floor per unit of loss. Central differences carry rounding noise
/// of roughly `ε·|L| / h` per entry, so a tensor whose true gradient is zero
/// (key biases, which softmax cancels) would otherwise score a relative error
/// near 1.
const GRAD_FLOOR: f64 = 1e-6;

/// Central differences with step `h` over every parameter of `model`, for the
/// combined loss of the given instances (eval mode, no dropout).
pub fn gradient_check(
    model: &Model,
    sentence: &Sentence,
    starts: &[usize],
    ctx: &LossContext<'_>,
    h: f64,
) -> Result<GradCheckReport, TrainError> {
    gradient_check_with(model, sentence, starts, ctx, h, |_, _| {})
}

/// As [`gradient_check`], letting `tamper` edit the analytic gradient first
/// (used to confirm the checker catches wrong gradients).
pub fn gradient_check_with(
    model: &Model,
    sentence: &Sentence,
    starts: &[usize],
    ctx: &LossContext<'_>,
    h: f64,
    tamper: impl Fn(&Model, &mut [f64]),
) -> Result<GradCheckReport, TrainError> {
    let mut analytic = model.params().zeros_like();
    model.sentence_loss(sentence, starts, ctx, Some(&mut analytic), None)?;
    tamper(model, &mut analytic);
    let mut probe = model.clone();
    let loss = |m: &Model| -> Result<f64, TrainError> {
        Ok(m.sentence_loss(sentence, starts, ctx, None, None)?
            .total(ctx.alpha, ctx.beta))
    };
    let floor = GRAD_FLOOR * loss(model)?.abs().max(1.0);
    let mut per_tensor = Vec::new();
    let mut worst = (0.0, String::new());
    for entry in model.params().entries().to_vec() {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in entry.range() {
            let orig = probe.params().data()[i];
            probe.params_mut().data_mut()[i] = orig + h;
            let up = loss(&probe)?;
            probe.params_mut().data_mut()[i] = orig - h;
            let down = loss(&probe)?;
            probe.params_mut().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            diff += (a - numeric) * (a - numeric);
            na += a * a;
            nn += numeric * numeric;
        }
        let denom = (libm::sqrt(na) + libm::sqrt(nn)).max(floor);
        let rel = libm::sqrt(diff) / denom;
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, entry.name.clone());
        }
        per_tensor.push((entry.name.clone(), rel));
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_tensor: worst.1,
        per_tensor,
    })
}
