//! Dense row-major f64 tensors. Shapes are explicit `Vec<usize>`; a scalar
//! is represented as shape `[1]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Invariant: `data.len() == shape.iter().product()` and every
    /// dimension is nonzero.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!("empty tensor shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} wants {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(!shape.is_empty() && !shape.contains(&0), "bad shape {shape:?}");
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty tensor");
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    /// Row-major 2-D tensor.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty() && !rows[0].is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            shape: vec![rows.len(), cols],
            data,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Builder-style flag set, used when binding leaves into a graph.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn value(&self) -> f64 {
        assert!(self.is_scalar(), "value() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0usize;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} (dim {dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Reshape without copying semantics beyond the clone itself.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.is_empty() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        let mut t = self.clone();
        t.shape = shape;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|x| x as f64).collect()).unwrap();
        assert_eq!(t.get(&[0, 0]), 0.0);
        assert_eq!(t.get(&[0, 2]), 2.0);
        assert_eq!(t.get(&[1, 0]), 3.0);
        assert_eq!(t.get(&[1, 2]), 5.0);
    }

    #[test]
    fn scalar_roundtrip() {
        let s = Tensor::scalar(2.5);
        assert!(s.is_scalar());
        assert_eq!(s.value(), 2.5);
        assert_eq!(s.shape(), &[1]);
    }
}
