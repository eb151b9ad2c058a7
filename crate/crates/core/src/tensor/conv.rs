use rand::Rng;

use super::{Grad2, Param, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output length `ceil(T / stride)`; zero padding split evenly with the
    /// odd pad on the right.
    Same,
    /// No padding; output length `floor((T - k) / stride) + 1`.
    Valid,
}

/// Temporal convolution (cross-correlation) with weights laid out `k × in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<F: Scalar = f32> {
    kernel: usize,
    stride: usize,
    in_channels: usize,
    out_channels: usize,
    padding: Padding,
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Scalar> Conv1d<F> {
    /// Zero-initialized layer.
    pub fn new(
        name: &str,
        kernel: usize,
        stride: usize,
        in_channels: usize,
        out_channels: usize,
        padding: Padding,
    ) -> Self {
        assert!(kernel >= 1 && stride >= 1, "kernel and stride must be positive");
        Self {
            kernel,
            stride,
            in_channels,
            out_channels,
            padding,
            weight: Param::zeros(
                format!("{name}.weight"),
                vec![kernel, in_channels, out_channels],
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![out_channels]),
        }
    }

    /// Weights from `U(-1/sqrt(k·in), 1/sqrt(k·in))`, biases zero.
    pub fn init_fan_in<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let bound = 1.0 / ((self.kernel * self.in_channels) as f64).sqrt();
        for w in &mut self.weight.value {
            *w = F::of(rng.random_range(-bound..bound));
        }
        self.bias.value.iter_mut().for_each(|b| *b = F::zero());
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn output_len(&self, t: usize) -> Result<usize> {
        match self.padding {
            Padding::Same => Ok(t.div_ceil(self.stride)),
            Padding::Valid => {
                if t < self.kernel {
                    return Err(Error::Shape(format!(
                        "valid convolution with kernel {} needs at least {} steps, got {t}",
                        self.kernel, self.kernel
                    )));
                }
                Ok((t - self.kernel) / self.stride + 1)
            }
        }
    }

    fn left_pad(&self, t: usize, out_len: usize) -> usize {
        match self.padding {
            Padding::Same => {
                let total = ((out_len - 1) * self.stride + self.kernel).saturating_sub(t);
                total / 2
            }
            Padding::Valid => 0,
        }
    }

    fn check_input(&self, x: &Grad2<F>) -> Result<usize> {
        if x.c() != self.in_channels {
            return Err(Error::Shape(format!(
                "{}: expected {} input channels, got {}",
                self.weight.name,
                self.in_channels,
                x.c()
            )));
        }
        if x.t() == 0 {
            return Err(Error::Shape(format!("{}: empty input", self.weight.name)));
        }
        self.output_len(x.t())
    }

    pub fn forward(&self, x: &Grad2<F>) -> Result<Grad2<F>> {
        let out_len = self.check_input(x)?;
        let pad = self.left_pad(x.t(), out_len);
        let (cin, cout) = (self.in_channels, self.out_channels);
        let mut out = Grad2::zeros(out_len, cout);
        for to in 0..out_len {
            let acc = out.row_mut(to);
            acc.copy_from_slice(&self.bias.value);
            let origin = (to * self.stride) as isize - pad as isize;
            for k in 0..self.kernel {
                let ti = origin + k as isize;
                if ti < 0 || ti >= x.t() as isize {
                    continue;
                }
                let xrow = x.row(ti as usize);
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == F::zero() {
                        continue;
                    }
                    let w = &self.weight.value[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
                    for (a, &wv) in acc.iter_mut().zip(w) {
                        *a = *a + xv * wv;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulate gradients from `out.grad` into `x.grad`, the weight and the bias.
    pub fn backward(&mut self, x: &mut Grad2<F>, out: &Grad2<F>) {
        let out_len = out.t();
        let pad = self.left_pad(x.t(), out_len);
        let (cin, cout) = (self.in_channels, self.out_channels);
        for to in 0..out_len {
            let gout = out.grad_row(to);
            for (b, &g) in self.bias.grad.iter_mut().zip(gout) {
                *b = *b + g;
            }
            let origin = (to * self.stride) as isize - pad as isize;
            for k in 0..self.kernel {
                let ti = origin + k as isize;
                if ti < 0 || ti >= x.t() as isize {
                    continue;
                }
                let ti = ti as usize;
                for ci in 0..cin {
                    let base = (k * cin + ci) * cout;
                    let xv = x.at(ti, ci);
                    let w = &self.weight.value[base..base + cout];
                    let gw = &mut self.weight.grad[base..base + cout];
                    let mut gx = F::zero();
                    for o in 0..cout {
                        gw[o] = gw[o] + xv * gout[o];
                        gx = gx + w[o] * gout[o];
                    }
                    let slot = &mut x.grad_row_mut(ti)[ci];
                    *slot = *slot + gx;
                }
            }
        }
    }

    pub fn params(&self) -> [&Param<F>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<F>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn cast<G: Scalar>(&self) -> Conv1d<G> {
        Conv1d {
            kernel: self.kernel,
            stride: self.stride,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            padding: self.padding,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(c: usize) -> Conv1d<f64> {
        let mut conv = Conv1d::new("id", 1, 1, c, c, Padding::Same);
        for i in 0..c {
            conv.weight.value[i * c + i] = 1.0;
        }
        conv
    }

    #[test]
    fn pointwise_identity_reproduces_input() {
        let x = Grad2::from_values(4, 2, vec![1.0, -2.0, 3.0, 0.5, -1.0, 4.0, 2.0, 7.0]).unwrap();
        let y = identity(2).forward(&x).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn same_padding_stride_two_halves_length() {
        let conv: Conv1d<f32> = Conv1d::new("c", 3, 2, 1, 1, Padding::Same);
        assert_eq!(conv.output_len(16).unwrap(), 8);
    }

    #[test]
    fn ones_kernel_three_with_zero_pads() {
        let mut conv: Conv1d<f64> = Conv1d::new("c", 3, 1, 1, 1, Padding::Same);
        conv.weight.value.iter_mut().for_each(|w| *w = 1.0);
        let x = Grad2::from_values(3, 1, vec![1.0; 3]).unwrap();
        assert_eq!(conv.forward(&x).unwrap().values(), &[2.0, 3.0, 2.0]);
    }

    #[test]
    fn even_kernel_pads_right() {
        // k=2, stride 1, T=3: one pad, placed on the right.
        let mut conv: Conv1d<f64> = Conv1d::new("c", 2, 1, 1, 1, Padding::Same);
        conv.weight.value = vec![1.0, 10.0];
        let x = Grad2::from_values(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(conv.forward(&x).unwrap().values(), &[21.0, 32.0, 3.0]);
    }

    #[test]
    fn pyramid_scale_kernel_seventeen_stride_sixteen() {
        let conv: Conv1d<f32> = Conv1d::new("c", 17, 16, 4, 2, Padding::Same);
        let x = Grad2::zeros(256, 4);
        assert_eq!(conv.forward(&x).unwrap().t(), 16);
    }

    #[test]
    fn valid_padding_length() {
        let conv: Conv1d<f32> = Conv1d::new("c", 3, 2, 1, 1, Padding::Valid);
        assert_eq!(conv.output_len(10).unwrap(), 4);
        assert!(conv.output_len(2).is_err());
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let conv: Conv1d<f32> = Conv1d::new("c", 3, 1, 4, 2, Padding::Same);
        let x = Grad2::zeros(5, 3);
        assert!(matches!(conv.forward(&x), Err(Error::Shape(_))));
    }
}
