//! Dense 32-bit tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to tracked tensors; calling
//! [`Tape::backward`] on a scalar root walks the record in reverse and
//! accumulates gradients for every `requires_grad` leaf. All reductions run
//! in a fixed, shape-defined order, so results are bit-identical across
//! runs and thread counts.

mod adam;
mod check;
pub(crate) mod kernels;
mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};

pub use check::{finite_diff_check, finite_diff_check_masked, MaskedCheck};
pub use tape::{Gradients, NodeId, Tape};
pub(crate) use tape::bilinear_lookup as lookup_bilinear;

use crate::error::{Error, Result};

/// Dense row-major value. Scalars are `[1, 1]`, vectors `[n]` or `[n, 1]`,
/// matrices `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1, 1], data: vec![value] }
    }

    /// Row vector `[1, n]`.
    pub fn row(data: Vec<f32>) -> Self {
        Tensor { shape: vec![1, data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the first axis; 1 for scalars shaped `[1, 1]`.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Extent of the second axis; 1-D tensors count as a single column.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

pub(crate) fn ensure_finite(op: &'static str, data: &[f32]) -> Result<()> {
    // branchless exponent test so the scan vectorizes: a float is
    // non-finite exactly when all exponent bits are set
    let mut bad: u32 = 0;
    for &v in data {
        let bits = v.to_bits();
        bad |= ((bits & 0x7f80_0000).wrapping_add(0x0080_0000)) & 0x8000_0000;
    }
    if bad == 0 {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.numel(), 4);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 2);
    }

    #[test]
    fn one_dimensional_tensors_are_columns() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.rows(), 3);
        assert_eq!(t.cols(), 1);
    }
}
