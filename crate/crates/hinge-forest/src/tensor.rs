use crate::error::{Error, Result};
use crate::real::Real;

/// Dense n-dimensional array in row-major order.
///
/// Every edge of the computation graph carries one of these. The invariant
/// `shape.iter().product() == data.len()` holds by construction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![R::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: R) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<R>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Config(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: R) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    /// First extent, i.e. the batch dimension for graph edges.
    pub fn extent0(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Resets the tensor to `shape` filled with zeros, reusing the
    /// allocation when possible.
    pub fn reset(&mut self, shape: &[usize]) {
        let len = shape.iter().product();
        if self.shape != shape {
            self.shape = shape.to_vec();
        }
        self.data.clear();
        self.data.resize(len, R::zero());
    }

    pub fn fill_zero(&mut self) {
        for v in &mut self.data {
            *v = R::zero();
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> R {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> R {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: R) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Casts element-wise into another precision.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| S::from_f64(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_invariant() {
        let t = Tensor::<f32>::zeros(&[2, 3, 4]);
        assert_eq!(t.len(), 24);
        assert_eq!(t.shape(), &[2, 3, 4]);
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn row_major_offsets() {
        let mut t = Tensor::<f64>::zeros(&[2, 3]);
        t.set(&[1, 2], 7.0);
        assert_eq!(t.data()[5], 7.0);
        assert_eq!(t.at(&[1, 2]), 7.0);
    }

    #[test]
    fn non_finite_detection() {
        let mut t = Tensor::<f32>::zeros(&[3]);
        assert!(t.first_non_finite().is_none());
        t.data_mut()[1] = f32::NAN;
        assert_eq!(t.first_non_finite(), Some(1));
    }
}
