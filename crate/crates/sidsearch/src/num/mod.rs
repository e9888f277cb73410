//! Dense linear-algebra substrate and the parameter store.
//!
//! All training math in this crate is f64. Vectors are plain `&[f64]`
//! slices with free-function helpers; matrices are row-major slices with
//! explicit (rows, cols). Parameters live in a [`ParamStore`], which pairs
//! every tensor with a same-shaped gradient accumulator so hand-derived
//! backward passes have one place to write and the finite-difference
//! harness one place to read.

mod gradcheck;
mod store;

pub use gradcheck::{grad_check, GradCheckReport};
pub use store::{Init, Optimizer, OptimizerKind, ParamId, ParamStore};

use crate::{Error, Result};

/// Dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared L2 distance `||a - b||^2`.
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `out += scale * x`.
pub fn axpy(out: &mut [f64], scale: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += scale * v;
    }
}

/// `out[r] = sum_c w[r*cols + c] * x[c]` for a row-major `rows x cols` matrix.
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        out[r] = dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// Transpose-apply: `out[c] += sum_r w[r*cols + c] * dy[r]`.
pub fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, dy: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(dy.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for r in 0..rows {
        axpy(out, dy[r], &w[r * cols..(r + 1) * cols]);
    }
}

/// Numerically stabilized softmax of `logits` in place.
pub fn softmax_inplace(p: &mut [f64]) {
    let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in p.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in p.iter_mut() {
        *v /= z;
    }
}

/// log(sum(exp(a))) with max-subtraction.
pub fn logsumexp(a: &[f64]) -> f64 {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy of a softmax over `logits` against `target_index`.
///
/// Returns `(loss, grad)` where `loss = -log softmax(logits)[target]` and
/// `grad = softmax(logits) - onehot(target)`.
pub fn softmax_xent(logits: &[f64], target_index: usize) -> Result<(f64, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax_xent: empty logits".into()));
    }
    if target_index >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "softmax_xent: target {} out of range {}",
            target_index,
            logits.len()
        )));
    }
    let mut p = logits.to_vec();
    softmax_inplace(&mut p);
    let loss = -p[target_index].max(f64::MIN_POSITIVE).ln();
    let mut grad = p;
    grad[target_index] -= 1.0;
    Ok((loss, grad))
}

/// Fails if any entry of `v` is NaN or infinite.
pub fn ensure_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_xent_uniform_logits_is_ln_w() {
        let (loss, _) = softmax_xent(&[0.3; 4], 2).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_xent_dominant_logit_is_near_zero() {
        let (loss, _) = softmax_xent(&[100.0, 0.0, 0.0], 0).unwrap();
        assert!(loss < 1e-9, "loss = {loss}");
    }

    #[test]
    fn softmax_xent_two_way_gradient_by_hand() {
        let (loss, grad) = softmax_xent(&[0.0, 0.0], 1).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
        assert!((grad[0] - 0.5).abs() < 1e-12);
        assert!((grad[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_xent_empty_logits_errors() {
        assert!(softmax_xent(&[], 0).is_err());
    }

    #[test]
    fn matvec_matches_hand_example() {
        // [[1,2],[3,4],[5,6]] * [1,-1] = [-1,-1,-1]
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0; 3];
        matvec(&w, 3, 2, &[1.0, -1.0], &mut out);
        assert_eq!(out, [-1.0, -1.0, -1.0]);
    }

    proptest! {
        #[test]
        fn softmax_xent_shift_invariant(
            logits in proptest::collection::vec(-5.0f64..5.0, 1..8),
            shift in -10.0f64..10.0,
            target_frac in 0.0f64..1.0,
        ) {
            let target = ((logits.len() as f64 - 1.0) * target_frac).round() as usize;
            let (l0, _) = softmax_xent(&logits, target).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let (l1, _) = softmax_xent(&shifted, target).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-9);
        }

        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-30.0f64..30.0, 1..16)) {
            let mut p = logits.clone();
            softmax_inplace(&mut p);
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| *v > 0.0));
        }
    }
}
