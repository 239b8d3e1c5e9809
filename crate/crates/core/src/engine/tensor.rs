use num_traits::Float;

use crate::error::{Error, Result};
use crate::topology::TensorShape;

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {n}x{c}x{h}x{w} tensor",
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: T) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.n, other.c, other.h, other.w)
    }

    pub fn shape(&self) -> TensorShape {
        TensorShape::new(self.c, self.h, self.w)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize) -> usize {
        (n * self.c + c) * self.h * self.w
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let o = self.offset(n, c);
        &self.data[o..o + self.plane_len()]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let o = self.offset(n, c);
        let len = self.plane_len();
        &mut self.data[o..o + len]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_dims(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    /// Select a contiguous range of batch items.
    pub fn batch_slice(&self, start: usize, len: usize) -> Self {
        let per = self.c * self.h * self.w;
        Self {
            n: len,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data[start * per..(start + len) * per].to_vec(),
        }
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from(*v).unwrap()).collect(),
        }
    }
}
