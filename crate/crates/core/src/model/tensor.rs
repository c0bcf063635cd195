use crate::error::{LabError, Result};
use crate::linalg::Matrix;

/// Activations of shape `batch x tokens x dim`, stored as a
/// `(batch * tokens) x dim` row-major matrix so that every token is a row.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTensor {
    batch: usize,
    tokens: usize,
    mat: Matrix,
}

impl ActivationTensor {
    pub fn zeros(batch: usize, tokens: usize, dim: usize) -> Self {
        Self { batch, tokens, mat: Matrix::zeros(batch * tokens, dim) }
    }

    pub fn from_matrix(batch: usize, tokens: usize, mat: Matrix) -> Result<Self> {
        if mat.rows() != batch * tokens {
            return Err(LabError::Dimension(format!(
                "{} rows cannot hold {batch} x {tokens} tokens",
                mat.rows()
            )));
        }
        Ok(Self { batch, tokens, mat })
    }

    pub fn from_vec(batch: usize, tokens: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_matrix(batch, tokens, Matrix::from_vec(batch * tokens, dim, data)?)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.mat.cols()
    }

    pub fn len(&self) -> usize {
        self.mat.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        self.mat.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.mat.data_mut()
    }

    pub fn token(&self, b: usize, t: usize) -> &[f64] {
        self.mat.row(b * self.tokens + t)
    }

    pub fn token_mut(&mut self, b: usize, t: usize) -> &mut [f64] {
        let r = b * self.tokens + t;
        self.mat.row_mut(r)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.mat
    }

    pub fn as_matrix_mut(&mut self) -> &mut Matrix {
        &mut self.mat
    }

    pub fn into_matrix(self) -> Matrix {
        self.mat
    }

    /// Rows `b*T .. (b+1)*T` as a `T x dim` matrix.
    pub fn sequence(&self, b: usize) -> Matrix {
        let d = self.dim();
        let start = b * self.tokens * d;
        Matrix::from_vec(self.tokens, d, self.mat.data()[start..start + self.tokens * d].to_vec())
            .expect("sequence slice has T*d entries")
    }

    pub fn is_finite(&self) -> bool {
        self.mat.is_finite()
    }
}
