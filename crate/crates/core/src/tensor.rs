//! Dense row-major arrays of `f64`.

use crate::error::{Error, Result};

/// A dense, row-major array of 64-bit floats.
///
/// Every dimension is positive and `data.len()` always equals the product of
/// the shape. Scalars are represented with shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zero-sized dimension")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut a = Self::zeros(shape);
        a.data.iter_mut().for_each(|v| *v = value);
        a
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds an `[rows.len(), d]` matrix; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::new(vec![rows.len(), d], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar array.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Size of the leading axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all axes after the first.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Stacks equally shaped arrays along a new leading axis.
    pub fn stack(items: &[&DenseArray]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero arrays".into()))?;
        if items.iter().any(|a| a.shape != first.shape) {
            return Err(Error::InvalidArgument("stack of differently shaped arrays".into()));
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let data = items.iter().flat_map(|a| a.data.iter().copied()).collect();
        Self::new(shape, data)
    }

    pub(crate) fn add_assign(&mut self, other: &DenseArray) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(DenseArray::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(DenseArray::new(vec![0], vec![]).is_err());
        assert!(DenseArray::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn rows_and_stack() {
        let a = DenseArray::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(a.shape(), &[2, 2]);
        assert_eq!(a.row(1), &[3.0, 4.0]);
        let s = DenseArray::stack(&[&a, &a]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.row_len(), 4);
    }
}
