//! Rank-2 (time × channel) arrays with paired gradient buffers, and the
//! handful of kernels the network is built from.
//!
//! Every kernel is generic over [`Scalar`] so the same code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod conv;
pub mod gradcheck;
mod loss;
mod ops;
mod pool;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use conv::{Conv1d, Padding};
pub use loss::{binary_cross_entropy, cross_entropy_row, sigmoid, smooth_l1, softmax, softmax_rows};
pub use ops::{
    accumulate_channel_slice, concat_channels, relu, relu_backward, relu_inplace, upsample_backward,
    upsample_time,
};
pub use pool::{MaxPool, PoolOutput};

pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + 'static {
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// A `T × C` row-major (time-major) array with a same-shape gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Grad2<F: Scalar = f32> {
    t: usize,
    c: usize,
    values: Vec<F>,
    grad: Vec<F>,
}

impl<F: Scalar> Grad2<F> {
    pub fn zeros(t: usize, c: usize) -> Self {
        Self {
            t,
            c,
            values: vec![F::zero(); t * c],
            grad: vec![F::zero(); t * c],
        }
    }

    pub fn from_values(t: usize, c: usize, values: Vec<F>) -> Result<Self> {
        if values.len() != t * c {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {t}×{c} array",
                values.len()
            )));
        }
        Ok(Self {
            t,
            c,
            grad: vec![F::zero(); values.len()],
            values,
        })
    }

    /// Build from `f32` storage, converting into this array's scalar type.
    pub fn from_f32(t: usize, c: usize, values: &[f32]) -> Result<Self> {
        Self::from_values(t, c, values.iter().map(|&v| F::of(v as f64)).collect())
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.t, self.c)
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn grad(&self) -> &[F] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [F] {
        &mut self.grad
    }

    pub fn at(&self, t: usize, c: usize) -> F {
        self.values[t * self.c + c]
    }

    pub fn row(&self, t: usize) -> &[F] {
        &self.values[t * self.c..(t + 1) * self.c]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [F] {
        &mut self.values[t * self.c..(t + 1) * self.c]
    }

    pub fn grad_row(&self, t: usize) -> &[F] {
        &self.grad[t * self.c..(t + 1) * self.c]
    }

    pub fn grad_row_mut(&mut self, t: usize) -> &mut [F] {
        &mut self.grad[t * self.c..(t + 1) * self.c]
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().chain(&self.grad).all(|v| v.is_finite())
    }
}

/// A named trainable tensor: flat values plus accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F: Scalar = f32> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

impl<F: Scalar> Param<F> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            value: vec![F::zero(); n],
            grad: vec![F::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }

    pub fn cast<G: Scalar>(&self) -> Param<G> {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            value: self.value.iter().map(|v| G::of(v.as_f64())).collect(),
            grad: self.grad.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }
}
