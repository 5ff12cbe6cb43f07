use std::fmt;

use super::AdError;
use crate::rng::Stream;

/// Dense tensor with exactly five axes `(batch, channel, depth, height, width)`,
/// row-major with width fastest. Lower-rank data pads leading axes with 1.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 5],
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: [usize; 5], data: Vec<f64>) -> Result<Self, AdError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AdError::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 5], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1; 5],
            data: vec![value],
        }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn(shape: [usize; 5], std: f64, rng: &mut Stream) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(|_| std * rng.normal()).collect(),
        }
    }

    pub fn uniform(shape: [usize; 5], lo: f64, hi: f64, rng: &mut Stream) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(|_| rng.uniform_range(lo, hi)).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Number of voxels per (batch, channel) slab.
    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    /// Contiguous voxels of one (batch, channel) pair.
    pub fn slab(&self, n: usize, c: usize) -> &[f64] {
        let s = self.spatial_len();
        let start = (n * self.shape[1] + c) * s;
        &self.data[start..start + s]
    }

    pub fn slab_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let s = self.spatial_len();
        let start = (n * self.shape[1] + c) * s;
        &mut self.data[start..start + s]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies channels `start..start + count`.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Tensor, AdError> {
        let [n, c, d, h, w] = self.shape;
        if start + count > c {
            return Err(AdError::Shape(format!(
                "channel slice {start}..{} of {c} channels",
                start + count
            )));
        }
        let s = self.spatial_len();
        let mut data = Vec::with_capacity(n * count * s);
        for b in 0..n {
            for ch in start..start + count {
                data.extend_from_slice(self.slab(b, ch));
            }
        }
        Ok(Tensor {
            shape: [n, count, d, h, w],
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checked() {
        assert!(Tensor::new([1, 2, 2, 2, 2], vec![0.0; 16]).is_ok());
        assert!(Tensor::new([1, 2, 2, 2, 2], vec![0.0; 15]).is_err());
    }

    #[test]
    fn slabs_and_slices() {
        let t = Tensor::new([2, 3, 1, 1, 2], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(t.slab(1, 2), &[10.0, 11.0]);
        let s = t.channel_slice(1, 2).unwrap();
        assert_eq!(s.shape(), [2, 2, 1, 1, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
        assert!(t.channel_slice(2, 2).is_err());
    }
}
