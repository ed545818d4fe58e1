use crate::kernels::{self, MatRef};
use crate::{Result, Scalar, TensorError};

/// Dense row-major n-dimensional array.
///
/// Gradient bookkeeping lives on graph nodes, not here: a `Tensor` is the
/// value buffer that a [`Var`](crate::Var) points at.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) || numel(&shape) != data.len() {
            return Err(TensorError::InvalidShape { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        assert!(n > 0 && !shape.is_empty(), "tensor shape must be non-empty: {shape:?}");
        Tensor { shape, data: vec![value; n] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::ZERO)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::ONE)
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Builds a tensor from a function of the flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> F) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        assert!(n > 0 && !shape.is_empty(), "tensor shape must be non-empty: {shape:?}");
        Tensor { shape, data: (0..n).map(&mut f).collect() }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { F::ONE } else { F::ZERO })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor<F>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Row `i` of a tensor viewed as `shape[0] × rest`.
    pub fn row(&self, i: usize) -> &[F] {
        let w = self.numel() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    /// Plain (non-recorded) 2-D matrix product.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, p) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![F::ZERO; m * p];
        kernels::gemm(MatRef::new(&self.data, m, k), MatRef::new(&other.data, k, p), &mut out, false);
        Tensor::new([m, p], out)
    }

    /// Plain 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor<F>> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidArgument(format!(
                "transpose expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Tensor::from_fn([c, r], |i| self.data[(i % r) * c + i / r]))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(Vec::<usize>::new(), vec![]).is_err());
        assert!(Tensor::<f32>::new([0], vec![]).is_err());
    }

    #[test]
    fn identity_times_matrix() {
        let m = Tensor::<f32>::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_evaluated_product() {
        let a = Tensor::<f32>::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::new([2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_names_both_shapes_on_mismatch() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::<f64>::from_fn([2, 3], |i| i as f64);
        let t = a.transpose().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(t.transpose().unwrap(), a);
    }
}
