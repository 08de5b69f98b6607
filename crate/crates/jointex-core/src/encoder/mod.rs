//! Contextual encoder and position attention.

mod self_match;
mod transformer;

pub use self_match::{AttentionBundle, SelfMatch, SelfMatchCache};
pub use transformer::{TransformerCache, TransformerEncoder};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::Mat;
use crate::params::ParamStore;
use crate::rng::Dropout;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncoderError {
    #[error("sequence of length {len} exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty sequence")]
    Empty,
    #[error("token id {0} is outside the vocabulary")]
    TokenId(usize),
    #[error("start position {p} is outside a sequence of length {len}")]
    StartPosition { p: usize, len: usize },
    #[error("model width {d} is not divisible by {heads} heads")]
    Heads { d: usize, heads: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 1,
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn: 128,
            max_len: 128,
            dropout: 0.2,
        }
    }
}

/// Anything that maps token ids to a `T × d` matrix and can push gradients back.
pub trait Encoder {
    type Cache;

    fn width(&self) -> usize;

    fn encode(
        &self,
        params: &ParamStore,
        ids: &[usize],
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(Mat, Self::Cache), EncoderError>;

    /// Accumulates parameter gradients for `d_hidden = ∂L/∂h` into `grad`.
    fn backward(&self, params: &ParamStore, cache: &Self::Cache, d_hidden: &Mat, grad: &mut [f64]);
}
