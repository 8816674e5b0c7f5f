//! Dense row-major float64 tensors. Rank 1 and rank 2 cover everything the
//! network needs; no broadcasting beyond per-row bias addition.

use serde::{Deserialize, Serialize};

use super::NumError;

/// Dense tensor of 64-bit floats, row-major.
///
/// Construction rejects non-finite entries and shape/length mismatches, so a
/// `Tensor` obtained through the public constructors always holds finite data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating the shape product and entry finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(NumError::BadShape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumError::BadShape(format!(
                "shape {shape:?} holds {numel} entries, got {}",
                data.len()
            )));
        }
        if let Some(x) = data.iter().find(|x| !x.is_finite()) {
            return Err(NumError::NonFinite(*x));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for op outputs. Skips the finiteness scan; loss
    /// values are checked at the training boundary instead.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(x: f64) -> Result<Self, NumError> {
        Self::new(vec![1], vec![x])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, NumError> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// A rank-2 tensor from `rows * cols` row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self, NumError> {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { shape: vec![n, n], data }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single entry of a scalar tensor.
    pub fn item(&self) -> Result<f64, NumError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(NumError::Contract(format!("expected scalar, got shape {:?}", self.shape)))
        }
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => unreachable!("rank > 2 is never constructed"),
        }
    }

    /// Row width: the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Entry of a rank-2 tensor.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// Largest absolute difference between two same-shaped tensors.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert!(self.same_shape(other), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bit-level equality, distinguishing 0.0 from -0.0 and any NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_length_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn rejects_non_finite_entries() {
        assert!(Tensor::vector(vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::vector(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn rejects_zero_dimension() {
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn row_access_is_row_major() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(t.at(0, 2), 3.0);
    }

    #[test]
    fn eye_is_identity() {
        let i = Tensor::eye(3);
        assert_eq!(i.at(0, 0), 1.0);
        assert_eq!(i.at(0, 1), 0.0);
        assert_eq!(i.numel(), 9);
    }
}
