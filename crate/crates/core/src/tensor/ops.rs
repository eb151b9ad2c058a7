use super::{Grad2, Scalar};
use crate::error::{Error, Result};

/// Concatenate along channels. All inputs must share the time length.
pub fn concat_channels<F: Scalar>(xs: &[&Grad2<F>]) -> Result<Grad2<F>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Shape("concatenation of zero arrays".into()))?;
    let t = first.t();
    if let Some(bad) = xs.iter().find(|x| x.t() != t) {
        return Err(Error::Shape(format!(
            "cannot concatenate time lengths {t} and {}",
            bad.t()
        )));
    }
    let c: usize = xs.iter().map(|x| x.c()).sum();
    let mut out = Grad2::zeros(t, c);
    for ti in 0..t {
        let row = out.row_mut(ti);
        let mut off = 0;
        for x in xs {
            row[off..off + x.c()].copy_from_slice(x.row(ti));
            off += x.c();
        }
    }
    Ok(out)
}

/// Add the gradient of channels `[offset, offset + x.c())` of `out` into `x`.
/// The backward of [`concat_channels`], one part at a time.
pub fn accumulate_channel_slice<F: Scalar>(out: &Grad2<F>, offset: usize, x: &mut Grad2<F>) {
    debug_assert_eq!(out.t(), x.t());
    debug_assert!(offset + x.c() <= out.c());
    let w = x.c();
    for ti in 0..x.t() {
        let src = &out.grad_row(ti)[offset..offset + w];
        for (g, &s) in x.grad_row_mut(ti).iter_mut().zip(src) {
            *g = *g + s;
        }
    }
}

pub fn relu<F: Scalar>(x: &Grad2<F>) -> Grad2<F> {
    let mut y = x.clone();
    y.zero_grad();
    relu_inplace(&mut y);
    y
}

pub fn relu_inplace<F: Scalar>(x: &mut Grad2<F>) {
    for v in x.values_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Mask `y.grad` in place by the ReLU derivative, read from the
/// post-activation values held in `y`.
pub fn relu_backward<F: Scalar>(y: &mut Grad2<F>) {
    let (t, c) = y.shape();
    for i in 0..t * c {
        if y.values()[i] <= F::zero() {
            y.grad_mut()[i] = F::zero();
        }
    }
}

/// Nearest-neighbour upsampling in time by an integer factor: cell `j` of `x`
/// fills cells `j·r .. (j+1)·r` of the output. Covers both duplicating each
/// cell twice and tiling a single cell across a whole level.
pub fn upsample_time<F: Scalar>(x: &Grad2<F>, target_t: usize) -> Result<Grad2<F>> {
    if x.t() == 0 || !target_t.is_multiple_of(x.t()) {
        return Err(Error::Shape(format!(
            "cannot upsample {} steps to {target_t}",
            x.t()
        )));
    }
    let r = target_t / x.t();
    let mut out = Grad2::zeros(target_t, x.c());
    for ti in 0..target_t {
        out.row_mut(ti).copy_from_slice(x.row(ti / r));
    }
    Ok(out)
}

/// Backward of [`upsample_time`]: sum output gradients of each source cell.
pub fn upsample_backward<F: Scalar>(x: &mut Grad2<F>, out: &Grad2<F>) {
    let r = out.t() / x.t();
    for ti in 0..out.t() {
        let src = out.grad_row(ti);
        for (g, &s) in x.grad_row_mut(ti / r).iter_mut().zip(src) {
            *g = *g + s;
        }
    }
}
