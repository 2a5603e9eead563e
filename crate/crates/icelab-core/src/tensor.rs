//! Dense row-major 64-bit float tensors.
//!
//! Everything in this crate is at most rank 2, so a tensor is a flat
//! buffer plus a `[rows, cols]` shape. Scalars are `[1, 1]`, vectors
//! `[1, n]`. The `grad` buffer belongs to the tensor (not to a graph):
//! a backward pass accumulates into the leaves it was built from, which
//! is what the optimizer and the finite-difference oracle read.

use alloc::vec;
use alloc::vec::Vec;

/// Dense 2-D tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    /// `[rows, cols]`, row-major storage.
    pub shape: [usize; 2],
    pub data: Vec<f64>,
    /// Whether backward passes should deposit a gradient here.
    pub requires_grad: bool,
    /// Accumulated gradient, same length as `data` when present.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build from explicit shape and data. Panics if the buffer length
    /// does not match the shape — every constructor funnels through here.
    pub fn new(shape: [usize; 2], data: Vec<f64>) -> Self {
        assert_eq!(
            shape[0] * shape[1],
            data.len(),
            "tensor shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: [usize; 2]) -> Self {
        Tensor::new(shape, vec![0.0; shape[0] * shape[1]])
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::new([1, 1], vec![x])
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor::new([1, data.len()], data)
    }

    /// Mark as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows() && c < self.cols());
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, x: f64) {
        debug_assert!(r < self.rows() && c < self.cols());
        let cols = self.cols();
        self.data[r * cols + c] = x;
    }

    /// Accumulate `delta` into the gradient buffer, allocating it on
    /// first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// True when every value (and every gradient entry, if present) is
    /// finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
            && self.grad.as_ref().map_or(true, |g| g.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new([2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(t.get(0, 2), 2.0);
        assert_eq!(t.get(1, 0), 3.0);
    }

    #[test]
    #[should_panic(expected = "does not match buffer length")]
    fn shape_mismatch_panics() {
        let _ = Tensor::new([2, 2], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let mut t = Tensor::zeros([1, 3]).with_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[0.5, 0.5, 0.5]);
        assert_eq!(t.grad.as_deref(), Some(&[1.5, 2.5, 3.5][..]));
        t.zero_grad();
        assert!(t.grad.is_none());
    }
}
