//! Dense `[B, nh, T, D]` tensors in row-major order.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{} elements supplied for shape {:?} ({} expected)",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for b in 0..shape[0] {
            for h in 0..shape[1] {
                for t in 0..shape[2] {
                    for d in 0..shape[3] {
                        data.push(f(b, h, t, d));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn heads(&self) -> usize {
        self.shape[1]
    }

    pub fn tokens(&self) -> usize {
        self.shape[2]
    }

    pub fn head_dim(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, h: usize, t: usize, d: usize) -> usize {
        ((b * self.shape[1] + h) * self.shape[2] + t) * self.shape[3] + d
    }

    #[inline]
    pub fn get(&self, b: usize, h: usize, t: usize, d: usize) -> f32 {
        self.data[self.offset(b, h, t, d)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, h: usize, t: usize, d: usize, value: f32) {
        let i = self.offset(b, h, t, d);
        self.data[i] = value;
    }

    /// The contiguous last-axis row at `(b, h, t)`.
    pub fn row(&self, b: usize, h: usize, t: usize) -> &[f32] {
        let start = self.offset(b, h, t, 0);
        &self.data[start..start + self.shape[3]]
    }

    pub fn row_mut(&mut self, b: usize, h: usize, t: usize) -> &mut [f32] {
        let start = self.offset(b, h, t, 0);
        let d = self.shape[3];
        &mut self.data[start..start + d]
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
