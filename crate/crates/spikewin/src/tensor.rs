//! Dense row-major tensors and the scalar-precision abstraction.
//!
//! Everything numeric in the crate is generic over [`Real`], which is
//! implemented for `f32` (training default) and `f64` (gradient-check
//! precision). Finite differences are unreliable at 32 bits, so the check
//! suites instantiate the same code at `f64` instead of maintaining a
//! second path.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Scalar type the whole stack is generic over.
pub trait Real:
    Float
    + num_traits::NumAssignOps
    + Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Bit width, echoed into artifacts for provenance.
    const BITS: u8;

    fn of(v: f64) -> Self;
    fn to64(self) -> f64;
}

impl Real for f32 {
    const BITS: u8 = 32;
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const BITS: u8 = 64;
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn to64(self) -> f64 {
        self
    }
}

/// Dense row-major real array with shape metadata and an optional gradient
/// slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    data: Vec<R>,
    requires_grad: bool,
    grad: Option<Vec<R>>,
}

impl<R: Real> Tensor<R> {
    /// Build a tensor, validating that `data` fills `shape` exactly.
    pub fn new(shape: &[usize], data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero dimension in shape {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::shape(format!(
                "data length {} does not fill shape {:?} (needs {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![R::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], v: R) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: R) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Truncated-normal init: N(0, std) resampled until |x| <= 2*std.
    /// Samples are drawn in f64 and narrowed, so the stream of draws per
    /// seed is precision-independent.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0f64, std).expect("valid std");
        let numel = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let x = dist.sample(rng);
            if x.abs() <= 2.0 * std {
                data.push(R::of(x));
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[R]> {
        self.grad.as_deref()
    }

    /// Overwrite the gradient slot; shape is pinned to the tensor's own.
    pub fn set_grad(&mut self, g: Vec<R>) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(format!(
                "grad length {} vs tensor numel {}",
                g.len(),
                self.data.len()
            )));
        }
        self.grad = Some(g);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// True if every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Convert an f64 slice into `R` (used at the events/model boundary).
pub fn narrow<R: Real>(xs: &[f64]) -> Vec<R> {
    xs.iter().map(|&x| R::of(x)).collect()
}
