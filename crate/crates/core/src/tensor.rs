//! Dense 4-D activation tensors (batch, channel, height, width).

use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("tensor dimensions must all be >= 1, got {0:?}")]
    ZeroDim([usize; 4]),
    #[error("shape {shape:?} needs {expected} values, got {got}")]
    Length {
        shape: [usize; 4],
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor(Array4<f32>);

impl ActivationTensor {
    pub fn new(data: Array4<f32>) -> Result<Self, ShapeError> {
        let s = data.dim();
        let shape = [s.0, s.1, s.2, s.3];
        if shape.contains(&0) {
            return Err(ShapeError::ZeroDim(shape));
        }
        // keep every tensor in standard layout so slices are always available
        Ok(Self(data.as_standard_layout().into_owned()))
    }

    pub fn zeros(shape: [usize; 4]) -> Result<Self, ShapeError> {
        Self::new(Array4::zeros(shape))
    }

    pub fn from_vec(shape: [usize; 4], values: Vec<f32>) -> Result<Self, ShapeError> {
        let expected = shape.iter().product();
        if values.len() != expected || shape.contains(&0) {
            if shape.contains(&0) {
                return Err(ShapeError::ZeroDim(shape));
            }
            return Err(ShapeError::Length {
                shape,
                expected,
                got: values.len(),
            });
        }
        Ok(Self(
            Array4::from_shape_vec(shape, values).expect("length checked above"),
        ))
    }

    /// A 2-D matrix viewed as a 1×1×rows×cols tensor.
    pub fn from_matrix(m: &Array2<f32>) -> Result<Self, ShapeError> {
        let (r, c) = m.dim();
        Self::from_vec([1, 1, r, c], m.iter().copied().collect())
    }

    pub fn to_matrix(&self) -> Array2<f32> {
        let [b, c, h, w] = self.shape();
        debug_assert!(b == 1 && c == 1);
        Array2::from_shape_vec((h, w), self.as_slice().to_vec()).expect("1x1xHxW tensor")
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.0.dim();
        [s.0, s.1, s.2, s.3]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn array(&self) -> &Array4<f32> {
        &self.0
    }

    pub fn into_array(self) -> Array4<f32> {
        self.0
    }

    pub fn as_slice(&self) -> &[f32] {
        self.0.as_slice().expect("standard layout")
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        self.0.as_slice_mut().expect("standard layout")
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self(self.0.mapv(f))
    }

    pub fn plane(&self, b: usize, c: usize) -> ArrayView2<'_, f32> {
        self.0.index_axis(Axis(0), b).index_axis_move(Axis(0), c)
    }

    /// Apply `f` to every (batch, channel) H×W plane, writing into a new tensor.
    pub fn map_planes(&self, mut f: impl FnMut(ArrayView2<'_, f32>, ArrayViewMut2<'_, f32>)) -> Self {
        let mut out = Array4::zeros(self.0.raw_dim());
        for (src_b, mut dst_b) in self.0.outer_iter().zip(out.outer_iter_mut()) {
            for (src, dst) in src_b.outer_iter().zip(dst_b.outer_iter_mut()) {
                f(src, dst);
            }
        }
        Self(out)
    }

    /// Elementwise equality including the sign of zero and NaN payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .as_slice()
                .iter()
                .zip(other.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl From<ActivationTensor> for Array4<f32> {
    fn from(t: ActivationTensor) -> Self {
        t.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims() {
        assert!(ActivationTensor::zeros([1, 0, 2, 2]).is_err());
        assert!(ActivationTensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn matrix_round_trip() {
        let m = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f32);
        let t = ActivationTensor::from_matrix(&m).unwrap();
        assert_eq!(t.shape(), [1, 1, 3, 5]);
        assert_eq!(t.to_matrix(), m);
    }

    #[test]
    fn non_standard_layout_is_normalized() {
        let a = Array4::from_shape_fn((1, 2, 3, 4), |(_, c, h, w)| (c * 100 + h * 10 + w) as f32);
        let t = ActivationTensor::new(a.permuted_axes([0, 1, 3, 2]).to_owned()).unwrap();
        assert_eq!(t.shape(), [1, 2, 4, 3]);
        assert_eq!(t.as_slice()[1], 10.0);
    }
}
