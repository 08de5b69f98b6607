//! Dense row-major helpers shared by the encoder, CRF and regularizers.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m×n] = x[m×k] · wᵀ (+ bias)`, with `w` stored `n×k`.
pub fn linear(
    x: &[f64],
    m: usize,
    k: usize,
    w: &[f64],
    n: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let xi = &x[i * k..(i + 1) * k];
        let oi = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            oi[j] = dot(xi, &w[j * k..(j + 1) * k]);
        }
        if let Some(b) = bias {
            for j in 0..n {
                oi[j] += b[j];
            }
        }
    }
    out
}

/// Backward of [`linear`]: accumulates `dw += dyᵀ x`, `db += Σ dy` and returns `dx = dy w`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    m: usize,
    k: usize,
    w: &[f64],
    n: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Vec<f64> {
    let mut dx = vec![0.0; m * k];
    for i in 0..m {
        let xi = &x[i * k..(i + 1) * k];
        let dyi = &dy[i * n..(i + 1) * n];
        let dxi = &mut dx[i * k..(i + 1) * k];
        for j in 0..n {
            let g = dyi[j];
            if g == 0.0 {
                continue;
            }
            axpy(g, xi, &mut dw[j * k..(j + 1) * k]);
            axpy(g, &w[j * k..(j + 1) * k], dxi);
        }
    }
    if let Some(db) = db {
        for i in 0..m {
            axpy(1.0, &dy[i * n..(i + 1) * n], db);
        }
    }
    dx
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = v.iter().map(|x| libm::exp(x - max)).sum();
    max + libm::log(s)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

const INV_SQRT2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm. Returns the output plus the normalized rows and
/// inverse standard deviations needed for the backward pass.
pub fn layer_norm(
    x: &[f64],
    rows: usize,
    d: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut inv = vec![0.0; rows];
    for i in 0..rows {
        let r = &x[i * d..(i + 1) * d];
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / libm::sqrt(var + LN_EPS);
        inv[i] = is;
        for j in 0..d {
            let h = (r[j] - mean) * is;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gamma[j] + beta[j];
        }
    }
    (out, xhat, inv)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv: &[f64],
    rows: usize,
    d: usize,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    let mut dxh = vec![0.0; d];
    for i in 0..rows {
        let dyi = &dy[i * d..(i + 1) * d];
        let xh = &xhat[i * d..(i + 1) * d];
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for j in 0..d {
            dgamma[j] += dyi[j] * xh[j];
            dbeta[j] += dyi[j];
            dxh[j] = dyi[j] * gamma[j];
            s1 += dxh[j];
            s2 += dxh[j] * xh[j];
        }
        let scale = inv[i] / d as f64;
        for j in 0..d {
            dx[i * d + j] = scale * (d as f64 * dxh[j] - s1 - xh[j] * s2);
        }
    }
    dx
}
