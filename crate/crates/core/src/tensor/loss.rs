//! Activations and loss primitives. Each loss returns its value together with
//! the gradient with respect to its prediction argument.

use super::{Grad2, Scalar};

pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax_rows<F: Scalar>(x: &Grad2<F>) -> Grad2<F> {
    let mut out = Grad2::zeros(x.t(), x.c());
    for t in 0..x.t() {
        out.row_mut(t).copy_from_slice(&softmax(x.row(t)));
    }
    out
}

/// Summed Smooth-L1: `0.5u²` for `|u| < 1`, else `|u| − 0.5`, with `u = pred − target`.
pub fn smooth_l1<F: Scalar>(pred: &[F], target: &[F]) -> (F, Vec<F>) {
    let half = F::of(0.5);
    let mut value = F::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let u = p - t;
            if u.abs() < F::one() {
                value = value + half * u * u;
                u
            } else {
                value = value + u.abs() - half;
                u.signum()
            }
        })
        .collect();
    (value, grad)
}

/// Softmax cross-entropy of one row of logits against a class index.
pub fn cross_entropy_row<F: Scalar>(logits: &[F], target: usize) -> (F, Vec<F>) {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
    let mut grad = softmax(logits);
    grad[target] = grad[target] - F::one();
    (lse - logits[target], grad)
}

/// Binary cross-entropy on a logit, in the overflow-free form
/// `max(z, 0) − z·y + ln(1 + e^{−|z|})`.
pub fn binary_cross_entropy<F: Scalar>(logit: F, target: F) -> (F, F) {
    let value = logit.max(F::zero()) - logit * target + (-logit.abs()).exp().ln_1p();
    (value, sigmoid(logit) - target)
}
