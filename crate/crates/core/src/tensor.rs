//! Dense rank-1..4 float tensors, the numeric carrier of the crate.
//!
//! Feature maps use height × width × channels layout with a row-major flat
//! buffer, so the channel index varies fastest.

use crate::{Error, Result};

/// Dense array of `f32` with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, validating that the shape is rank 1..=4 with all
    /// dimensions at least 1 and that the buffer length matches.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::Config(format!(
                "tensor rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::Config(format!(
                "tensor dimensions must be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor buffer",
                shape.clone(),
                vec![data.len()],
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Zero-filled tensor of the given shape.
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    /// Constant-filled tensor of the given shape.
    pub fn filled(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Consumes the tensor, returning its flat buffer.
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.data.iter()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_buffer_length() {
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new([2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn new_rejects_zero_dims_and_bad_rank() {
        assert!(Tensor::new([2, 0], vec![]).is_err());
        assert!(Tensor::new([1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(Vec::<usize>::new(), vec![]).is_err());
    }

    #[test]
    fn zeros_and_filled_match_shape() {
        let t = Tensor::zeros([3, 3, 2]);
        assert_eq!(t.len(), 18);
        assert!(t.iter().all(|&v| v == 0.0));
        let f = Tensor::filled([4], 2.5);
        assert!(f.iter().all(|&v| v == 2.5));
    }
}
