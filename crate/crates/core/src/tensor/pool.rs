use super::{Grad2, Scalar};

/// Temporal max pooling, applied per channel. A trailing partial window is
/// pooled over whatever steps remain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool {
    pub window: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct PoolOutput<F: Scalar> {
    pub out: Grad2<F>,
    /// For every output element, the input time step that produced the max.
    pub argmax: Vec<usize>,
}

impl MaxPool {
    pub fn new(window: usize, stride: usize) -> Self {
        assert!(window >= 1 && stride >= 1, "window and stride must be positive");
        Self { window, stride }
    }

    pub fn non_overlapping(window: usize) -> Self {
        Self::new(window, window)
    }

    pub fn output_len(&self, t: usize) -> usize {
        if t <= self.window {
            1
        } else {
            (t - self.window).div_ceil(self.stride) + 1
        }
    }

    pub fn forward<F: Scalar>(&self, x: &Grad2<F>) -> PoolOutput<F> {
        let (t, c) = x.shape();
        let out_len = self.output_len(t);
        let mut out = Grad2::zeros(out_len, c);
        let mut argmax = vec![0; out_len * c];
        for o in 0..out_len {
            let lo = o * self.stride;
            let hi = (lo + self.window).min(t);
            for ch in 0..c {
                let mut best = lo;
                let mut best_v = x.at(lo, ch);
                // strict comparison keeps the earliest index on ties
                for ti in lo + 1..hi {
                    let v = x.at(ti, ch);
                    if v > best_v {
                        best = ti;
                        best_v = v;
                    }
                }
                out.row_mut(o)[ch] = best_v;
                argmax[o * c + ch] = best;
            }
        }
        PoolOutput { out, argmax }
    }

    /// Route `out.grad` back to the argmax positions of `x`.
    pub fn backward<F: Scalar>(x: &mut Grad2<F>, pooled: &PoolOutput<F>) {
        let c = x.c();
        for (idx, &g) in pooled.out.grad().iter().enumerate() {
            let ch = idx % c;
            let src = pooled.argmax[idx];
            let slot = &mut x.grad_row_mut(src)[ch];
            *slot = *slot + g;
        }
    }
}
