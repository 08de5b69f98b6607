//! Linear-chain CRF over emission scores, without start/stop transitions.

use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

use crate::math::{log_sum_exp, Mat};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CrfError {
    #[error("feature width {got} does not match emission input width {want}")]
    FeatureWidth { got: usize, want: usize },
    #[error("gold path has length {got}, expected {want}")]
    PathLength { got: usize, want: usize },
    #[error("transition matrix must be {0}x{0}")]
    Transitions(usize),
    #[error("tag {0} is outside the tag vocabulary")]
    TagRange(usize),
}

/// `Z = X Wᵀ` with `w` stored `V × width`.
pub fn emission_scores(x: &Mat, w: &[f64], tags: usize) -> Result<Mat, CrfError> {
    if tags == 0 || w.len() != tags * x.cols {
        return Err(CrfError::FeatureWidth {
            got: x.cols,
            want: w.len() / tags.max(1),
        });
    }
    let data = crate::math::linear(&x.data, x.rows, x.cols, w, tags, None);
    Ok(Mat::from_vec(x.rows, tags, data))
}

fn check(z: &Mat, trans: &[f64]) -> Result<(), CrfError> {
    if trans.len() != z.cols * z.cols {
        return Err(CrfError::Transitions(z.cols));
    }
    Ok(())
}

/// Unnormalized log score of one path.
pub fn path_score(z: &Mat, y: &[usize], trans: &[f64]) -> f64 {
    let v = z.cols;
    let mut s = 0.0;
    for (t, &tag) in y.iter().enumerate() {
        s += z.at(t, tag);
        if t > 0 {
            s += trans[y[t - 1] * v + tag];
        }
    }
    s
}

/// Forward log-messages, `alpha[t][j]`.
fn forward(z: &Mat, trans: &[f64]) -> Vec<f64> {
    let (n, v) = (z.rows, z.cols);
    let mut alpha = vec![0.0; n * v];
    alpha[..v].copy_from_slice(z.row(0));
    let mut buf = vec![0.0; v];
    for t in 1..n {
        for j in 0..v {
            for i in 0..v {
                buf[i] = alpha[(t - 1) * v + i] + trans[i * v + j];
            }
            alpha[t * v + j] = log_sum_exp(&buf) + z.at(t, j);
        }
    }
    alpha
}

fn backward(z: &Mat, trans: &[f64]) -> Vec<f64> {
    let (n, v) = (z.rows, z.cols);
    let mut beta = vec![0.0; n * v];
    let mut buf = vec![0.0; v];
    for t in (0..n.saturating_sub(1)).rev() {
        for i in 0..v {
            for j in 0..v {
                buf[j] = trans[i * v + j] + z.at(t + 1, j) + beta[(t + 1) * v + j];
            }
            beta[t * v + i] = log_sum_exp(&buf);
        }
    }
    beta
}

pub fn log_partition(z: &Mat, trans: &[f64]) -> f64 {
    let alpha = forward(z, trans);
    log_sum_exp(&alpha[(z.rows - 1) * z.cols..])
}

fn check_path(z: &Mat, gold: &[usize]) -> Result<(), CrfError> {
    if gold.len() != z.rows {
        return Err(CrfError::PathLength {
            got: gold.len(),
            want: z.rows,
        });
    }
    if let Some(&bad) = gold.iter().find(|&&g| g >= z.cols) {
        return Err(CrfError::TagRange(bad));
    }
    Ok(())
}

/// `-log p(gold | Z)`.
pub fn crf_nll(z: &Mat, gold: &[usize], trans: &[f64]) -> Result<f64, CrfError> {
    check(z, trans)?;
    check_path(z, gold)?;
    Ok((log_partition(z, trans) - path_score(z, gold, trans)).max(0.0))
}

/// Loss with gradients with respect to the emissions and the transitions.
pub struct CrfGrad {
    pub loss: f64,
    pub d_emissions: Mat,
    pub d_transitions: Vec<f64>,
}

pub fn crf_nll_grad(z: &Mat, gold: &[usize], trans: &[f64]) -> Result<CrfGrad, CrfError> {
    check(z, trans)?;
    check_path(z, gold)?;
    let (n, v) = (z.rows, z.cols);
    let alpha = forward(z, trans);
    let beta = backward(z, trans);
    let log_z = log_sum_exp(&alpha[(n - 1) * v..]);
    let mut dz = Mat::zeros(n, v);
    let mut dt = vec![0.0; v * v];
    for t in 0..n {
        for j in 0..v {
            dz.data[t * v + j] = libm::exp(alpha[t * v + j] + beta[t * v + j] - log_z);
        }
        dz.data[t * v + gold[t]] -= 1.0;
    }
    for t in 0..n.saturating_sub(1) {
        for i in 0..v {
            let a = alpha[t * v + i];
            for j in 0..v {
                let e = a + trans[i * v + j] + z.at(t + 1, j) + beta[(t + 1) * v + j] - log_z;
                dt[i * v + j] += libm::exp(e);
            }
        }
        dt[gold[t] * v + gold[t + 1]] -= 1.0;
    }
    let loss = (log_z - path_score(z, gold, trans)).max(0.0);
    Ok(CrfGrad {
        loss,
        d_emissions: dz,
        d_transitions: dt,
    })
}

/// Best path; among equal scores the lowest tag index wins at every step.
pub fn viterbi(z: &Mat, trans: &[f64]) -> Vec<usize> {
    let (n, v) = (z.rows, z.cols);
    if n == 0 {
        return Vec::new();
    }
    let mut score = z.row(0).to_vec();
    let mut back = vec![0usize; n * v];
    let mut next = vec![0.0; v];
    for t in 1..n {
        for j in 0..v {
            let mut best = 0;
            let mut best_s = score[0] + trans[j];
            for i in 1..v {
                let s = score[i] + trans[i * v + j];
                if s > best_s {
                    best_s = s;
                    best = i;
                }
            }
            back[t * v + j] = best;
            next[j] = best_s + z.at(t, j);
        }
        core::mem::swap(&mut score, &mut next);
    }
    let mut last = crate::math::argmax(&score);
    let mut path = vec![0; n];
    for t in (0..n).rev() {
        path[t] = last;
        if t > 0 {
            last = back[t * v + last];
        }
    }
    path
}

/// Token-wise softmax cross-entropy, the CRF-free decoder.
pub fn softmax_nll_grad(z: &Mat, gold: &[usize]) -> Result<(f64, Mat), CrfError> {
    check_path(z, gold)?;
    let mut dz = Mat::zeros(z.rows, z.cols);
    let mut loss = 0.0;
    for t in 0..z.rows {
        let p = crate::math::softmax(z.row(t));
        loss -= libm::log(p[gold[t]].max(f64::MIN_POSITIVE));
        dz.row_mut(t).copy_from_slice(&p);
        dz.data[t * z.cols + gold[t]] -= 1.0;
    }
    Ok((loss, dz))
}

pub fn argmax_path(z: &Mat) -> Vec<usize> {
    (0..z.rows).map(|t| crate::math::argmax(z.row(t))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Every tag path of length `n` over `v` tags, in lexicographic order.
    pub(crate) fn all_paths(n: usize, v: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for _ in 0..n {
            let mut next = Vec::new();
            for p in &out {
                for t in 0..v {
                    let mut q = p.clone();
                    q.push(t);
                    next.push(q);
                }
            }
            out = next;
        }
        out
    }

    fn random_problem(rng: &mut crate::rng::SeededRng, n: usize, v: usize) -> (Mat, Vec<f64>) {
        let z = Mat::from_vec(n, v, (0..n * v).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let t = (0..v * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        (z, t)
    }

    #[test]
    fn uniform_scores_give_t_log_v() {
        let z = Mat::zeros(4, 3);
        let t = vec![0.0; 9];
        let l = crf_nll(&z, &[0, 2, 1, 1], &t).unwrap();
        assert!((l - 4.0 * libm::log(3.0)).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_matches_enumeration() {
        let z = Mat::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.25]);
        let t = vec![0.1, -0.7, 1.2, 0.3];
        let scores: Vec<f64> = all_paths(2, 2)
            .iter()
            .map(|p| path_score(&z, p, &t))
            .collect();
        let log_z = log_sum_exp(&scores);
        let gold = [1, 0];
        let want = log_z - path_score(&z, &gold, &t);
        assert!((crf_nll(&z, &gold, &t).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn per_position_shift_is_invariant() {
        let mut rng = crate::rng::seeded(3);
        let (mut z, t) = random_problem(&mut rng, 4, 3);
        let gold = [0, 1, 2, 1];
        let before = crf_nll(&z, &gold, &t).unwrap();
        for r in 0..4 {
            for v in z.row_mut(r) {
                *v += 1.7 * r as f64;
            }
        }
        assert!((crf_nll(&z, &gold, &t).unwrap() - before).abs() < 1e-10);
    }

    #[test]
    fn dominant_tags_decode_per_position() {
        let z = Mat::from_vec(3, 3, vec![5.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 5.0, 0.0]);
        assert_eq!(viterbi(&z, &[0.0; 9]), vec![0, 2, 1]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(viterbi(&Mat::zeros(4, 5), &[0.0; 25]), vec![0; 4]);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = crate::rng::seeded(5);
        for n in 1..=5 {
            for v in 1..=4 {
                let (z, t) = random_problem(&mut rng, n, v);
                let total: f64 = all_paths(n, v)
                    .iter()
                    .map(|p| libm::exp(-crf_nll(&z, p, &t).unwrap()))
                    .sum();
                assert!((total - 1.0).abs() < 1e-9, "n={n} v={v} total={total}");
            }
        }
    }

    #[test]
    fn gradient_matches_differences() {
        let mut rng = crate::rng::seeded(11);
        let (z, t) = random_problem(&mut rng, 4, 3);
        let gold = [2, 0, 1, 1];
        let g = crf_nll_grad(&z, &gold, &t).unwrap();
        let h = 1e-6;
        for k in 0..z.data.len() {
            let mut zp = z.clone();
            zp.data[k] += h;
            let mut zm = z.clone();
            zm.data[k] -= h;
            let fd =
                (crf_nll(&zp, &gold, &t).unwrap() - crf_nll(&zm, &gold, &t).unwrap()) / (2.0 * h);
            assert!((fd - g.d_emissions.data[k]).abs() < 1e-7);
        }
        for k in 0..t.len() {
            let mut tp = t.clone();
            tp[k] += h;
            let mut tm = t.clone();
            tm[k] -= h;
            let fd =
                (crf_nll(&z, &gold, &tp).unwrap() - crf_nll(&z, &gold, &tm).unwrap()) / (2.0 * h);
            assert!((fd - g.d_transitions[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_weights_give_zero_emissions() {
        let x = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let z = emission_scores(&x, &[0.0; 12], 4).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        assert!(emission_scores(&x, &[0.0; 8], 4).is_err());
    }

    #[test]
    fn wrong_path_length_is_rejected() {
        assert_eq!(
            crf_nll(&Mat::zeros(3, 2), &[0, 1], &[0.0; 4]),
            Err(CrfError::PathLength { got: 2, want: 3 })
        );
    }
}
