//! Dense row-major f32 tensors with an optional gradient buffer.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense N-dimensional float array. The universal numeric value of the crate:
/// network parameters, images, probability maps and confidence maps are all
/// `Tensor`s. The gradient buffer is allocated only for tensors that take part
/// in differentiation (parameters between optimizer steps).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor { shape, values, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel], grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![value; numel], grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], values: vec![value], grad: None }
    }

    /// Gaussian init with the given standard deviation, drawn in index order.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f32, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let values = (0..numel)
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor { shape, values, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f32]> {
        self.grad.as_deref_mut()
    }

    /// Allocates (zeroed) the gradient buffer if not present.
    pub fn ensure_grad(&mut self) -> &mut [f32] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.values.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it when needed.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient length {} does not match tensor numel {}",
                delta.len(),
                self.values.len()
            )));
        }
        let g = self.ensure_grad();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
            && self.grad.as_ref().map_or(true, |g| g.iter().all(|v| v.is_finite()))
    }

    /// Index into a rank-3 [C,H,W] tensor.
    pub fn at3(&self, c: usize, h: usize, w: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 3);
        let (hh, ww) = (self.shape[1], self.shape[2]);
        self.values[(c * hh + h) * ww + w]
    }
}

/// Flat offset of element (c, h, w) in a [C,H,W] layout.
#[inline]
pub fn idx3(c: usize, h: usize, w: usize, height: usize, width: usize) -> usize {
    (c * height + h) * width + w
}
