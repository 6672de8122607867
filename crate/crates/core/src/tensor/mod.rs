//! Dense f32 tensors, the forward kernels, and a reverse-mode tape.

mod ops;
mod tape;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub use ops::{
    add, batch_norm, bmm, channel_axis, conv2d, cross_entropy, gelu, group_norm, layer_norm,
    linear, matmul, mean_axes, narrow, permute, relu, scale, silu, softmax, transpose_last2,
    Activation, Conv2dConfig, CrossEntropy,
};
pub use tape::{Tape, Var};

/// A dense row-major tensor of 32-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting shape mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        validate_shape(&shape, data.len())?;
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernel outputs. The shape must already agree
    /// with the data length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// 1-D tensor.
    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds for dim {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// `(min, max)` over all elements. Empty tensors yield `(+inf, -inf)`.
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Splits the shape around `axis` into `(outer, channels, inner)`.
    pub fn split_at_axis(&self, axis: usize) -> Result<(usize, usize, usize)> {
        split_dims(&self.shape, axis)
    }

    /// Per-channel `(min, max)` along `axis`.
    pub fn channel_min_max(&self, axis: usize) -> Result<Vec<(f32, f32)>> {
        let (outer, channels, inner) = self.split_at_axis(axis)?;
        let mut out = vec![(f32::INFINITY, f32::NEG_INFINITY); channels];
        for o in 0..outer {
            for (c, slot) in out.iter_mut().enumerate() {
                let base = (o * channels + c) * inner;
                for &v in &self.data[base..base + inner] {
                    slot.0 = slot.0.min(v);
                    slot.1 = slot.1.max(v);
                }
            }
        }
        Ok(out)
    }

    /// Row-wise argmax of a `[rows, cols]` tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "argmax_rows",
                reason: alloc::format!("expected rank 2, got {:?}", self.shape),
            });
        }
        let cols = self.shape[1];
        Ok(self
            .data
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Selects rows `[start, start + len)` of the leading dimension.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Self> {
        narrow(self, 0, start, len)
    }

    /// Stacks tensors of equal shape along the leading dimension.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyTensor)?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat_batch",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Ok(Self::from_parts(shape, data))
    }
}

pub(crate) fn validate_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            op: "tensor",
            reason: alloc::format!("dimensions must be positive, got {shape:?}"),
        });
    }
    if shape.iter().product::<usize>() != len {
        return Err(Error::InvalidShape {
            op: "tensor",
            reason: alloc::format!("shape {shape:?} does not match {len} values"),
        });
    }
    Ok(())
}

pub(crate) fn split_dims(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_shape() {
        assert_eq!(
            Tensor::new(vec![2], vec![1.0, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        );
        assert!(Tensor::new(vec![3], vec![1.0, 2.0]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn channel_min_max_on_nchw() {
        let t = Tensor::from_fn(&[2, 3, 2, 1], |i| i as f32);
        let r = t.channel_min_max(1).unwrap();
        assert_eq!(r, vec![(0.0, 7.0), (2.0, 9.0), (4.0, 11.0)]);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 3.0, 3.0, 0.0, -1.0, -2.0]).unwrap();
        assert_eq!(t.argmax_rows().unwrap(), vec![1, 0]);
    }
}
