//! Position attention: for start position `p` and target `t`, score every token
//! `j` with `wᵀ tanh(W_p h_p + W_t h_t + W_j h_j)`, normalize over `j`, and
//! concatenate the attended vector to `h_t`.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::EncoderError;
use crate::math::{axpy, dot, linear, linear_backward, softmax_in_place, Mat};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;

#[derive(Clone, Debug)]
pub struct SelfMatch {
    d: usize,
    start_proj: ParamId,
    target_proj: ParamId,
    token_proj: ParamId,
    score: ParamId,
}

/// Per-sentence projections shared by all start positions.
pub struct SelfMatchCache {
    start: Vec<f64>,
    target: Vec<f64>,
    token: Vec<f64>,
    /// Gradients collected across start positions, applied in [`SelfMatch::finish`].
    d_start: Vec<f64>,
    d_target: Vec<f64>,
    d_token: Vec<f64>,
}

/// Everything the position attention produces for one start position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBundle {
    pub start: usize,
    /// Row `t` is the distribution over tokens for target position `t`.
    pub rows: Mat,
    pub attended: Mat,
    /// `[h_t ; m_t]`, `T × 2d`.
    pub features: Mat,
    #[serde(skip)]
    activations: Vec<f64>,
}

impl SelfMatch {
    pub fn register(d: usize, store: &mut ParamStore) -> Self {
        SelfMatch {
            d,
            start_proj: store.add("self_match.start_proj", &[d, d]),
            target_proj: store.add("self_match.target_proj", &[d, d]),
            token_proj: store.add("self_match.token_proj", &[d, d]),
            score: store.add("self_match.score", &[d]),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        let b = 1.0 / libm::sqrt(self.d as f64);
        for id in [
            self.start_proj,
            self.target_proj,
            self.token_proj,
            self.score,
        ] {
            store.init_uniform(id, b, rng);
        }
    }

    pub fn score_vector(&self) -> ParamId {
        self.score
    }

    pub fn prepare(&self, p: &ParamStore, h: &Mat) -> SelfMatchCache {
        let (t, d) = (h.rows, self.d);
        SelfMatchCache {
            start: linear(&h.data, t, d, p.get(self.start_proj), d, None),
            target: linear(&h.data, t, d, p.get(self.target_proj), d, None),
            token: linear(&h.data, t, d, p.get(self.token_proj), d, None),
            d_start: vec![0.0; t * d],
            d_target: vec![0.0; t * d],
            d_token: vec![0.0; t * d],
        }
    }

    pub fn attend(
        &self,
        p: &ParamStore,
        h: &Mat,
        cache: &SelfMatchCache,
        start: usize,
    ) -> Result<AttentionBundle, EncoderError> {
        let (n, d) = (h.rows, self.d);
        if start >= n {
            return Err(EncoderError::StartPosition { p: start, len: n });
        }
        let w = p.get(self.score);
        let hp = &cache.start[start * d..(start + 1) * d];
        let mut act = vec![0.0; n * n * d];
        let mut rows = Mat::zeros(n, n);
        let mut base = vec![0.0; d];
        for t in 0..n {
            let ht = &cache.target[t * d..(t + 1) * d];
            for k in 0..d {
                base[k] = hp[k] + ht[k];
            }
            for j in 0..n {
                let hj = &cache.token[j * d..(j + 1) * d];
                let a = &mut act[(t * n + j) * d..(t * n + j + 1) * d];
                for k in 0..d {
                    a[k] = libm::tanh(base[k] + hj[k]);
                }
                rows.data[t * n + j] = dot(w, a);
            }
            softmax_in_place(rows.row_mut(t));
        }
        let mut attended = Mat::zeros(n, d);
        let mut features = Mat::zeros(n, 2 * d);
        for t in 0..n {
            let m = attended.row_mut(t);
            for j in 0..n {
                axpy(rows.data[t * n + j], h.row(j), m);
            }
            let f = features.row_mut(t);
            f[..d].copy_from_slice(h.row(t));
            f[d..].copy_from_slice(attended.row(t));
        }
        Ok(AttentionBundle {
            start,
            rows,
            attended,
            features,
            activations: act,
        })
    }

    /// Pushes `∂L/∂features` (and optionally `∂L/∂rows`) back into `dh`, the
    /// score vector gradient, and the per-sentence projection accumulators.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        p: &ParamStore,
        h: &Mat,
        cache: &mut SelfMatchCache,
        bundle: &AttentionBundle,
        d_features: &Mat,
        d_rows: Option<&Mat>,
        dh: &mut Mat,
        grad: &mut [f64],
    ) {
        let (n, d) = (h.rows, self.d);
        let w = p.get(self.score);
        let mut d_score = vec![0.0; d];
        let mut d_pre = vec![0.0; d];
        let mut da = vec![0.0; n];
        let ds = &mut cache.d_start[bundle.start * d..(bundle.start + 1) * d];
        for t in 0..n {
            let df = d_features.row(t);
            axpy(1.0, &df[..d], dh.row_mut(t));
            let dm = &df[d..];
            let row = bundle.rows.row(t);
            let mut s = 0.0;
            for j in 0..n {
                da[j] = dot(dm, h.row(j)) + d_rows.map_or(0.0, |g| g.at(t, j));
                axpy(row[j], dm, dh.row_mut(j));
                s += row[j] * da[j];
            }
            for j in 0..n {
                let g = row[j] * (da[j] - s);
                if g == 0.0 {
                    continue;
                }
                let a = &bundle.activations[(t * n + j) * d..(t * n + j + 1) * d];
                for k in 0..d {
                    d_score[k] += g * a[k];
                    d_pre[k] = g * w[k] * (1.0 - a[k] * a[k]);
                }
                axpy(1.0, &d_pre, ds);
                axpy(1.0, &d_pre, &mut cache.d_target[t * d..(t + 1) * d]);
                axpy(1.0, &d_pre, &mut cache.d_token[j * d..(j + 1) * d]);
            }
        }
        axpy(1.0, &d_score, &mut grad[self.score.range()]);
    }

    /// Applies the accumulated projection gradients once per sentence.
    pub fn finish(
        &self,
        p: &ParamStore,
        h: &Mat,
        cache: &SelfMatchCache,
        dh: &mut Mat,
        grad: &mut [f64],
    ) {
        let (n, d) = (h.rows, self.d);
        for (id, dz) in [
            (self.start_proj, &cache.d_start),
            (self.target_proj, &cache.d_target),
            (self.token_proj, &cache.d_token),
        ] {
            let mut dw = vec![0.0; d * d];
            let dx = linear_backward(&h.data, n, d, p.get(id), d, dz, &mut dw, None);
            axpy(1.0, &dw, &mut grad[id.range()]);
            axpy(1.0, &dx, &mut dh.data);
        }
    }
}
