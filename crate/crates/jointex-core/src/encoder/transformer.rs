//! Post-norm transformer encoder with learned absolute positions and GELU.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Encoder, EncoderConfig, EncoderError};
use crate::math::{
    axpy, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, Mat,
};
use crate::params::{ParamId, ParamStore};
use crate::rng::{apply_mask, Dropout, SeededRng};

#[derive(Clone, Debug)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    config: EncoderConfig,
    tok: ParamId,
    pos: ParamId,
    ln0_g: ParamId,
    ln0_b: ParamId,
    layers: Vec<LayerParams>,
}

struct LayerCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    attn_mask: Option<Vec<f64>>,
    xhat1: Vec<f64>,
    inv1: Vec<f64>,
    y1: Vec<f64>,
    f1: Vec<f64>,
    g: Vec<f64>,
    mid_mask: Option<Vec<f64>>,
    out_mask: Option<Vec<f64>>,
    xhat2: Vec<f64>,
    inv2: Vec<f64>,
}

pub struct TransformerCache {
    ids: Vec<usize>,
    xhat0: Vec<f64>,
    inv0: Vec<f64>,
    emb_mask: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
}

impl TransformerEncoder {
    /// Registers every tensor in `store` (order is part of the checkpoint layout).
    pub fn register(config: &EncoderConfig, store: &mut ParamStore) -> Result<Self, EncoderError> {
        let d = config.d_model;
        if config.heads == 0 || !d.is_multiple_of(config.heads) {
            return Err(EncoderError::Heads {
                d,
                heads: config.heads,
            });
        }
        let tok = store.add("encoder.token_embedding", &[config.vocab_size, d]);
        let pos = store.add("encoder.position_embedding", &[config.max_len, d]);
        let ln0_g = store.add("encoder.embedding_norm.gain", &[d]);
        let ln0_b = store.add("encoder.embedding_norm.bias", &[d]);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = |s: &str| format!("encoder.layer{l}.{s}");
            layers.push(LayerParams {
                wq: store.add(&n("query.weight"), &[d, d]),
                bq: store.add(&n("query.bias"), &[d]),
                wk: store.add(&n("key.weight"), &[d, d]),
                bk: store.add(&n("key.bias"), &[d]),
                wv: store.add(&n("value.weight"), &[d, d]),
                bv: store.add(&n("value.bias"), &[d]),
                wo: store.add(&n("output.weight"), &[d, d]),
                bo: store.add(&n("output.bias"), &[d]),
                ln1_g: store.add(&n("attention_norm.gain"), &[d]),
                ln1_b: store.add(&n("attention_norm.bias"), &[d]),
                w1: store.add(&n("ffn_in.weight"), &[config.ffn, d]),
                b1: store.add(&n("ffn_in.bias"), &[config.ffn]),
                w2: store.add(&n("ffn_out.weight"), &[d, config.ffn]),
                b2: store.add(&n("ffn_out.bias"), &[d]),
                ln2_g: store.add(&n("ffn_norm.gain"), &[d]),
                ln2_b: store.add(&n("ffn_norm.bias"), &[d]),
            });
        }
        Ok(TransformerEncoder {
            config: config.clone(),
            tok,
            pos,
            ln0_g,
            ln0_b,
            layers,
        })
    }

    /// Uniform init with bound `1/sqrt(fan_in)`; norms start at identity.
    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        let d = self.config.d_model as f64;
        let f = self.config.ffn as f64;
        store.init_uniform(self.tok, 1.0, rng);
        store.init_uniform(self.pos, 1.0, rng);
        store.fill(self.ln0_g, 1.0);
        for l in &self.layers {
            for (w, b) in [
                (l.wq, l.bq),
                (l.wk, l.bk),
                (l.wv, l.bv),
                (l.wo, l.bo),
                (l.w1, l.b1),
            ] {
                store.init_uniform(w, 1.0 / libm::sqrt(d), rng);
                store.init_uniform(b, 1.0 / libm::sqrt(d), rng);
            }
            store.init_uniform(l.w2, 1.0 / libm::sqrt(f), rng);
            store.init_uniform(l.b2, 1.0 / libm::sqrt(f), rng);
            store.fill(l.ln1_g, 1.0);
            store.fill(l.ln2_g, 1.0);
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn mask(dropout: &mut Option<&mut Dropout<'_>>, n: usize) -> Option<Vec<f64>> {
        dropout.as_mut().and_then(|d| d.mask(n))
    }

    fn layer_forward(
        &self,
        p: &ParamStore,
        l: &LayerParams,
        x: Vec<f64>,
        t: usize,
        dropout: &mut Option<&mut Dropout<'_>>,
    ) -> (Vec<f64>, LayerCache) {
        let d = self.config.d_model;
        let h = self.config.heads;
        let dk = d / h;
        let scale = 1.0 / libm::sqrt(dk as f64);
        let q = linear(&x, t, d, p.get(l.wq), d, Some(p.get(l.bq)));
        let k = linear(&x, t, d, p.get(l.wk), d, Some(p.get(l.bk)));
        let v = linear(&x, t, d, p.get(l.wv), d, Some(p.get(l.bv)));
        let mut probs = vec![0.0; h * t * t];
        let mut o = vec![0.0; t * d];
        for hh in 0..h {
            let off = hh * dk;
            for i in 0..t {
                let row = &mut probs[(hh * t + i) * t..(hh * t + i + 1) * t];
                let qi = &q[i * d + off..i * d + off + dk];
                for j in 0..t {
                    row[j] = dot(qi, &k[j * d + off..j * d + off + dk]) * scale;
                }
                crate::math::softmax_in_place(row);
                let oi = &mut o[i * d + off..i * d + off + dk];
                for j in 0..t {
                    axpy(row[j], &v[j * d + off..j * d + off + dk], oi);
                }
            }
        }
        let mut a = linear(&o, t, d, p.get(l.wo), d, Some(p.get(l.bo)));
        let attn_mask = Self::mask(dropout, t * d);
        apply_mask(&mut a, &attn_mask);
        for (ai, xi) in a.iter_mut().zip(&x) {
            *ai += xi;
        }
        let (y1, xhat1, inv1) = layer_norm(&a, t, d, p.get(l.ln1_g), p.get(l.ln1_b));
        let ff = self.config.ffn;
        let f1 = linear(&y1, t, d, p.get(l.w1), ff, Some(p.get(l.b1)));
        let mut g: Vec<f64> = f1.iter().map(|&z| gelu(z)).collect();
        let mid_mask = Self::mask(dropout, t * ff);
        apply_mask(&mut g, &mid_mask);
        let mut f2 = linear(&g, t, ff, p.get(l.w2), d, Some(p.get(l.b2)));
        let out_mask = Self::mask(dropout, t * d);
        apply_mask(&mut f2, &out_mask);
        for (fi, yi) in f2.iter_mut().zip(&y1) {
            *fi += yi;
        }
        let (y2, xhat2, inv2) = layer_norm(&f2, t, d, p.get(l.ln2_g), p.get(l.ln2_b));
        let cache = LayerCache {
            x,
            q,
            k,
            v,
            probs,
            o,
            attn_mask,
            xhat1,
            inv1,
            y1,
            f1,
            g,
            mid_mask,
            out_mask,
            xhat2,
            inv2,
        };
        (y2, cache)
    }

    fn layer_backward(
        &self,
        p: &ParamStore,
        l: &LayerParams,
        c: &LayerCache,
        dy: &[f64],
        t: usize,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let d = self.config.d_model;
        let ff = self.config.ffn;
        let h = self.config.heads;
        let dk = d / h;
        let scale = 1.0 / libm::sqrt(dk as f64);
        let (mut dg2, mut db2) = (vec![0.0; d], vec![0.0; d]);
        let mut dr2 = layer_norm_backward(
            dy,
            &c.xhat2,
            &c.inv2,
            t,
            d,
            p.get(l.ln2_g),
            &mut dg2,
            &mut db2,
        );
        axpy(1.0, &dg2, &mut grad[l.ln2_g.range()]);
        axpy(1.0, &db2, &mut grad[l.ln2_b.range()]);
        // residual: dr2 flows to y1 directly and through the FFN
        let mut df2 = dr2.clone();
        apply_mask(&mut df2, &c.out_mask);
        let (mut dw2, mut dbb2) = (vec![0.0; d * ff], vec![0.0; d]);
        let mut dgv = linear_backward(&c.g, t, ff, p.get(l.w2), d, &df2, &mut dw2, Some(&mut dbb2));
        axpy(1.0, &dw2, &mut grad[l.w2.range()]);
        axpy(1.0, &dbb2, &mut grad[l.b2.range()]);
        apply_mask(&mut dgv, &c.mid_mask);
        for (gv, &z) in dgv.iter_mut().zip(&c.f1) {
            *gv *= gelu_grad(z);
        }
        let (mut dw1, mut db1) = (vec![0.0; ff * d], vec![0.0; ff]);
        let dy1_ffn = linear_backward(&c.y1, t, d, p.get(l.w1), ff, &dgv, &mut dw1, Some(&mut db1));
        axpy(1.0, &dw1, &mut grad[l.w1.range()]);
        axpy(1.0, &db1, &mut grad[l.b1.range()]);
        axpy(1.0, &dy1_ffn, &mut dr2);
        let dy1 = dr2;
        let (mut dg1, mut db1n) = (vec![0.0; d], vec![0.0; d]);
        let dr1 = layer_norm_backward(
            &dy1,
            &c.xhat1,
            &c.inv1,
            t,
            d,
            p.get(l.ln1_g),
            &mut dg1,
            &mut db1n,
        );
        axpy(1.0, &dg1, &mut grad[l.ln1_g.range()]);
        axpy(1.0, &db1n, &mut grad[l.ln1_b.range()]);
        let mut da = dr1.clone();
        apply_mask(&mut da, &c.attn_mask);
        let (mut dwo, mut dbo) = (vec![0.0; d * d], vec![0.0; d]);
        let do_ = linear_backward(&c.o, t, d, p.get(l.wo), d, &da, &mut dwo, Some(&mut dbo));
        axpy(1.0, &dwo, &mut grad[l.wo.range()]);
        axpy(1.0, &dbo, &mut grad[l.bo.range()]);
        let mut dq = vec![0.0; t * d];
        let mut dk_ = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for hh in 0..h {
            let off = hh * dk;
            for i in 0..t {
                let row = &c.probs[(hh * t + i) * t..(hh * t + i + 1) * t];
                let doi = &do_[i * d + off..i * d + off + dk];
                let mut s = 0.0;
                for j in 0..t {
                    dp[j] = dot(doi, &c.v[j * d + off..j * d + off + dk]);
                    s += row[j] * dp[j];
                    axpy(row[j], doi, &mut dv[j * d + off..j * d + off + dk]);
                }
                for j in 0..t {
                    let ds = row[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    axpy(
                        ds,
                        &c.k[j * d + off..j * d + off + dk],
                        &mut dq[i * d + off..i * d + off + dk],
                    );
                    axpy(
                        ds,
                        &c.q[i * d + off..i * d + off + dk],
                        &mut dk_[j * d + off..j * d + off + dk],
                    );
                }
            }
        }
        let mut dx = dr1;
        for (w, b, dz) in [(l.wq, l.bq, &dq), (l.wk, l.bk, &dk_), (l.wv, l.bv, &dv)] {
            let (mut dw, mut db) = (vec![0.0; d * d], vec![0.0; d]);
            let part = linear_backward(&c.x, t, d, p.get(w), d, dz, &mut dw, Some(&mut db));
            axpy(1.0, &dw, &mut grad[w.range()]);
            axpy(1.0, &db, &mut grad[b.range()]);
            axpy(1.0, &part, &mut dx);
        }
        dx
    }
}

impl Encoder for TransformerEncoder {
    type Cache = TransformerCache;

    fn width(&self) -> usize {
        self.config.d_model
    }

    fn encode(
        &self,
        p: &ParamStore,
        ids: &[usize],
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(Mat, TransformerCache), EncoderError> {
        let t = ids.len();
        let d = self.config.d_model;
        if t == 0 {
            return Err(EncoderError::Empty);
        }
        if t > self.config.max_len {
            return Err(EncoderError::TooLong {
                len: t,
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(EncoderError::TokenId(bad));
        }
        let tok = p.get(self.tok);
        let pos = p.get(self.pos);
        let mut e = vec![0.0; t * d];
        for (i, &id) in ids.iter().enumerate() {
            for j in 0..d {
                e[i * d + j] = tok[id * d + j] + pos[i * d + j];
            }
        }
        let (mut x, xhat0, inv0) = layer_norm(&e, t, d, p.get(self.ln0_g), p.get(self.ln0_b));
        let emb_mask = Self::mask(&mut dropout, t * d);
        apply_mask(&mut x, &emb_mask);
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (y, c) = self.layer_forward(p, l, x, t, &mut dropout);
            layers.push(c);
            x = y;
        }
        let cache = TransformerCache {
            ids: ids.to_vec(),
            xhat0,
            inv0,
            emb_mask,
            layers,
        };
        Ok((Mat::from_vec(t, d, x), cache))
    }

    fn backward(&self, p: &ParamStore, cache: &TransformerCache, d_hidden: &Mat, grad: &mut [f64]) {
        let t = cache.ids.len();
        let d = self.config.d_model;
        let mut dx = d_hidden.data.clone();
        for (l, c) in self.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(p, l, c, &dx, t, grad);
        }
        apply_mask(&mut dx, &cache.emb_mask);
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        let de = layer_norm_backward(
            &dx,
            &cache.xhat0,
            &cache.inv0,
            t,
            d,
            p.get(self.ln0_g),
            &mut dg,
            &mut db,
        );
        axpy(1.0, &dg, &mut grad[self.ln0_g.range()]);
        axpy(1.0, &db, &mut grad[self.ln0_b.range()]);
        let tok = self.tok.range().start;
        let pos = self.pos.range().start;
        for (i, &id) in cache.ids.iter().enumerate() {
            let row = &de[i * d..(i + 1) * d];
            axpy(1.0, row, &mut grad[tok + id * d..tok + (id + 1) * d]);
            axpy(1.0, row, &mut grad[pos + i * d..pos + (i + 1) * d]);
        }
    }
}
