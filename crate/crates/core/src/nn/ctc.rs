//! Connectionist temporal classification loss.
//!
//! The blank symbol is the last logit column. Forward and backward variables
//! are kept in log space so long sequences never underflow.

use crate::error::{Error, Result};
use crate::nn::tensor::Mat;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for t in 0..out.rows() {
        let row = out.row_mut(t);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Minimum frame count that can emit `targets`: one frame per token plus a
/// separating blank between equal neighbours.
pub fn required_frames(targets: &[usize]) -> usize {
    targets.len() + targets.windows(2).filter(|w| w[0] == w[1]).count()
}

fn validate(logits: &Mat, targets: &[usize]) -> Result<usize> {
    let classes = logits.cols();
    if classes == 0 {
        return Err(Error::shape("ctc logits need at least the blank column"));
    }
    let blank = classes - 1;
    if let Some(&bad) = targets.iter().find(|&&t| t >= blank) {
        return Err(Error::invalid(format!(
            "ctc target token {bad} collides with or exceeds blank index {blank}"
        )));
    }
    let required = required_frames(targets);
    if logits.rows() < required || logits.rows() == 0 {
        return Err(Error::CtcInadmissible {
            target_len: targets.len(),
            frames: logits.rows(),
            required: required.max(1),
        });
    }
    Ok(blank)
}

/// Negative log-likelihood of `targets` under `logits` (`T x (vocab + 1)`).
pub fn ctc_loss(logits: &Mat, targets: &[usize]) -> Result<f64> {
    ctc_loss_and_grad(logits, targets).map(|(l, _)| l)
}

/// Loss together with its gradient with respect to the raw logits.
pub fn ctc_loss_and_grad(logits: &Mat, targets: &[usize]) -> Result<(f64, Mat)> {
    let blank = validate(logits, targets)?;
    let lp = log_softmax_rows(logits);
    let t_len = lp.rows();
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(targets.iter().flat_map(|&t| [t, blank]))
        .collect();
    let s_len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp.get(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp.get(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp.get(t, ext[s]) };
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p == ninf {
        return Err(Error::CtcInadmissible {
            target_len: targets.len(),
            frames: t_len,
            required: required_frames(targets),
        });
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = lp.get(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp.get(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp.get(t, ext[s]) };
        }
    }

    let classes = lp.cols();
    let mut grad = Mat::zeros(t_len, classes);
    let mut occ = vec![ninf; classes];
    for t in 0..t_len {
        occ.fill(ninf);
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let k = ext[s];
            occ[k] = log_add(occ[k], a + b - lp.get(t, k));
        }
        let row = grad.row_mut(t);
        for k in 0..classes {
            let p = lp.get(t, k).exp();
            let o = if occ[k] == ninf { 0.0 } else { (occ[k] - log_p).exp() };
            row[k] = p - o;
        }
    }
    Ok((-log_p, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Sums path probabilities over every label path of length T, keeping
    /// those that collapse to `targets`.
    fn brute_force(logits: &Mat, targets: &[usize]) -> f64 {
        let lp = log_softmax_rows(logits);
        let (t_len, c) = lp.shape();
        let blank = c - 1;
        let mut total = 0.0;
        let mut path = vec![0usize; t_len];
        loop {
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &p in &path {
                if Some(p) != prev && p != blank {
                    collapsed.push(p);
                }
                prev = Some(p);
            }
            if collapsed == targets {
                total += path
                    .iter()
                    .enumerate()
                    .map(|(t, &p)| lp.get(t, p))
                    .sum::<f64>()
                    .exp();
            }
            let mut i = 0;
            loop {
                if i == t_len {
                    return -total.ln();
                }
                path[i] += 1;
                if path[i] < c {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    fn one_hot_logits(labels: &[usize], classes: usize) -> Mat {
        let mut m = Mat::filled(labels.len(), classes, -60.0);
        for (t, &l) in labels.iter().enumerate() {
            m.set(t, l, 60.0);
        }
        m
    }

    #[test]
    fn single_frame_one_hot_is_certain() {
        let logits = one_hot_logits(&[1], 3);
        assert!(ctc_loss(&logits, &[1]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn empty_target_all_blank_is_certain() {
        let logits = one_hot_logits(&[2, 2, 2, 2], 3);
        assert!(ctc_loss(&logits, &[]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        // T = 3, vocab 2 (+ blank): all 27 paths.
        let logits = Mat::from_vec(
            3,
            3,
            vec![0.3, -1.2, 0.8, 1.1, 0.2, -0.4, -0.7, 0.5, 0.1],
        )
        .unwrap();
        for target in [vec![0], vec![1], vec![0, 1], vec![1, 1], vec![]] {
            let fast = ctc_loss(&logits, &target).unwrap();
            let slow = brute_force(&logits, &target);
            assert!((fast - slow).abs() < 1e-12, "{target:?}: {fast} vs {slow}");
        }
    }

    #[test]
    fn longer_random_case_matches_enumeration() {
        let data: Vec<f64> = (0..15).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let logits = Mat::from_vec(5, 3, data).unwrap();
        let target = [0, 0, 1];
        let fast = ctc_loss(&logits, &target).unwrap();
        let slow = brute_force(&logits, &target);
        assert!((fast - slow).abs() < 1e-10);
    }

    #[test]
    fn inadmissible_targets_error() {
        let logits = Mat::zeros(2, 3);
        assert!(matches!(
            ctc_loss(&logits, &[0, 0]),
            Err(Error::CtcInadmissible { required: 3, .. })
        ));
        assert!(ctc_loss(&logits, &[2]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data: Vec<f64> = (0..20).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.4).collect();
        let logits = Mat::from_vec(5, 4, data).unwrap();
        let target = [1, 0, 0];
        let (_, grad) = ctc_loss_and_grad(&logits, &target).unwrap();
        let eps = 1e-5;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[i] += eps;
            let mut m = logits.clone();
            m.data_mut()[i] -= eps;
            let fd = (ctc_loss(&p, &target).unwrap() - ctc_loss(&m, &target).unwrap()) / (2.0 * eps);
            assert!((fd - grad.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn loss_is_non_negative() {
        let logits = Mat::from_vec(4, 3, vec![0.1; 12]).unwrap();
        assert!(ctc_loss(&logits, &[0, 1]).unwrap() >= 0.0);
    }
}
