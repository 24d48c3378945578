//! Dense tensors, trainable parameters and the reverse-mode kernels that
//! back the keyword-spotting models.
//!
//! The scope is deliberately narrow: row-major `f32` (or `f64` for test
//! oracles) arrays plus forward/backward implementations of exactly the
//! layer set the models need. There is no dynamic graph; callers compose
//! layers explicitly and chain the returned gradients.

pub mod adam;
pub mod gradcheck;
pub mod ops;

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{KwsError, Result};

/// Element type of a tensor. The library trains in `f32`; `f64` exists so
/// gradient oracles can run the same kernels at higher precision.
pub trait Scalar:
    Float + FromPrimitive + Sum + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array, row-major, with an optional gradient buffer
/// of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
}

impl<E: Scalar> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); n],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(KwsError::Shape {
                op: "from_vec",
                detail: format!(
                    "data length {} does not match shape {:?} (= {} elements)",
                    data.len(),
                    shape,
                    n
                ),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    /// Standard-normal entries scaled by `std`, drawn in index order.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                E::from_f64_lossy(z * std)
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [E]> {
        self.grad.as_deref_mut()
    }

    /// Allocates (or re-zeroes) the gradient buffer.
    pub fn alloc_grad(&mut self) {
        match self.grad.as_mut() {
            Some(g) => g.iter_mut().for_each(|v| *v = E::zero()),
            None => self.grad = Some(vec![E::zero(); self.data.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-exact cast into another scalar type.
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| F::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
            grad: None,
        }
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(KwsError::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Flat offset of `[n, h, w, c]` in an NHWC tensor.
#[inline(always)]
pub fn nhwc(shape: &[usize], n: usize, h: usize, w: usize, c: usize) -> usize {
    ((n * shape[1] + h) * shape[2] + w) * shape[3] + c
}

/// A tensor paired with its gradient, trainability flag and optimizer slot.
#[derive(Debug, Clone)]
pub struct Parameter<E = f32> {
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    pub trainable: bool,
    /// Optimizer-state slot; populated by [`adam::init`].
    pub state: Option<adam::AdamState<E>>,
}

impl<E: Scalar> Parameter<E> {
    pub fn new(value: Tensor<E>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            trainable: true,
            state: None,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|v| *v = E::zero());
    }

    /// Accumulates `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &Tensor<E>) {
        debug_assert_eq!(self.grad.shape(), delta.shape());
        for (g, d) in self.grad.data_mut().iter_mut().zip(delta.data()) {
            *g = *g + *d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }

    #[test]
    fn grad_buffer_lifecycle() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        assert!(t.grad().is_none());
        t.alloc_grad();
        t.grad_mut().unwrap()[0] = 3.0;
        t.alloc_grad(); // re-zeroes
        assert_eq!(t.grad().unwrap(), &[0.0; 4]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn cast_roundtrip_is_exact_for_f32() {
        let t = Tensor::<f32>::from_vec(&[3], vec![1.5, -2.25, 0.1]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t.data(), back.data());
    }
}
