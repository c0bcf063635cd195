use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::rng::RngStream;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let row: Vec<String> = self.row(r).iter().take(8).map(|v| format!("{v:.6}")).collect();
            writeln!(f, "  {}", row.join(", "))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(LabError::Dimension("ragged rows".into()));
        }
        Ok(Self {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn gaussian(rng: &mut RngStream, rows: usize, cols: usize, std: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        rng.fill_gaussian(&mut m.data, std);
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        matmul(self, b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    fn check_same(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LabError::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// `self - c * I` for a square matrix.
    pub fn sub_scaled_identity(&self, c: f64) -> Result<Matrix> {
        if !self.is_square() {
            return Err(LabError::Dimension(format!(
                "identity shift needs a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        let mut m = self.clone();
        for i in 0..self.rows {
            m.data[i * self.cols + i] -= c;
        }
        Ok(m)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Columns `c0..c1` as a new matrix.
    pub fn columns(&self, c0: usize, c1: usize) -> Matrix {
        assert!(c0 <= c1 && c1 <= self.cols);
        let w = c1 - c0;
        let mut out = Matrix::zeros(self.rows, w);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[c0..c1]);
        }
        out
    }

    /// Writes `block` into columns starting at `c0`.
    pub fn set_columns(&mut self, c0: usize, block: &Matrix) {
        assert_eq!(block.rows, self.rows);
        assert!(c0 + block.cols <= self.cols);
        for r in 0..self.rows {
            let w = block.cols;
            self.row_mut(r)[c0..c0 + w].copy_from_slice(block.row(r));
        }
    }

    /// Horizontal concatenation.
    pub fn hcat(blocks: &[Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(LabError::Dimension("hcat row mismatch".into()));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut c0 = 0;
        for b in blocks {
            out.set_columns(c0, b);
            c0 += b.cols;
        }
        Ok(out)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Whether an operand enters a product as stored or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

fn op_shape(m: &Matrix, op: Op) -> (usize, usize) {
    match op {
        Op::N => (m.rows, m.cols),
        Op::T => (m.cols, m.rows),
    }
}

fn op_strides(m: &Matrix, op: Op) -> (isize, isize) {
    match op {
        Op::N => (m.cols as isize, 1),
        Op::T => (1, m.cols as isize),
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`.
pub fn gemm(alpha: f64, a: &Matrix, ta: Op, b: &Matrix, tb: Op, beta: f64, c: &mut Matrix) -> Result<()> {
    let (m, k) = op_shape(a, ta);
    let (k2, n) = op_shape(b, tb);
    if k != k2 || c.rows != m || c.cols != n {
        return Err(LabError::Dimension(format!(
            "gemm: ({m}x{k}) * ({k2}x{n}) into {}x{}",
            c.rows, c.cols
        )));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        c.scale_in_place(beta);
        return Ok(());
    }
    let (rsa, csa) = op_strides(a, ta);
    let (rsb, csb) = op_strides(b, tb);
    // SAFETY: strides and extents describe the owned buffers exactly; `c`
    // does not alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
    Ok(())
}

/// A rectangular window of a matrix, entering a product as stored or transposed.
#[derive(Clone, Copy, Debug)]
pub struct Block<'a> {
    m: &'a Matrix,
    r0: usize,
    c0: usize,
    rows: usize,
    cols: usize,
    op: Op,
}

impl<'a> Block<'a> {
    pub fn t(self) -> Block<'a> {
        let op = match self.op {
            Op::N => Op::T,
            Op::T => Op::N,
        };
        Block { op, ..self }
    }

    fn shape(&self) -> (usize, usize) {
        match self.op {
            Op::N => (self.rows, self.cols),
            Op::T => (self.cols, self.rows),
        }
    }
}

impl Matrix {
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Block<'_> {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "block out of range");
        Block { m: self, r0, c0, rows, cols, op: Op::N }
    }
}

/// `c[r0.., c0..] = alpha * a * b + beta * c[r0.., c0..]` on matrix windows.
pub fn gemm_block(alpha: f64, a: Block<'_>, b: Block<'_>, beta: f64, c: &mut Matrix, r0: usize, c0: usize) -> Result<()> {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    if k != k2 || r0 + m > c.rows || c0 + n > c.cols {
        return Err(LabError::Dimension(format!(
            "gemm_block: ({m}x{k}) * ({k2}x{n}) into {}x{} at ({r0},{c0})",
            c.rows, c.cols
        )));
    }
    if m == 0 || n == 0 || k == 0 {
        for i in r0..r0 + m {
            for v in &mut c.data[i * c.cols + c0..i * c.cols + c0 + n] {
                *v *= beta;
            }
        }
        return Ok(());
    }
    let (rsa, csa) = op_strides(a.m, a.op);
    let (rsb, csb) = op_strides(b.m, b.op);
    let ldc = c.cols;
    // SAFETY: each window lies inside its buffer (checked at construction and
    // above); `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.m.data.as_ptr().add(a.r0 * a.m.cols + a.c0),
            rsa,
            csa,
            b.m.data.as_ptr().add(b.r0 * b.m.cols + b.c0),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr().add(r0 * ldc + c0),
            ldc as isize,
            1,
        );
    }
    Ok(())
}

/// `op(a) * op(b)` into a fresh matrix.
pub fn product(a: &Matrix, ta: Op, b: &Matrix, tb: Op) -> Result<Matrix> {
    let (m, _) = op_shape(a, ta);
    let (_, n) = op_shape(b, tb);
    let mut c = Matrix::zeros(m, n);
    gemm(1.0, a, ta, b, tb, 0.0, &mut c)?;
    Ok(c)
}

/// Standard product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LabError::Dimension(format!(
            "matmul: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    product(a, Op::N, b, Op::N)
}

/// `a^T * b`
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    product(a, Op::T, b, Op::N)
}

/// `a * b^T`
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    product(a, Op::N, b, Op::T)
}

/// `a * a^T`
pub fn gram_rows(a: &Matrix) -> Matrix {
    product(a, Op::N, a, Op::T).expect("shapes agree by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a[(i, p)] * b[(p, j)];
                }
                c[(i, j)] = s;
            }
        }
        c
    }

    #[test]
    fn block_products_match_copies() {
        let mut rng = RngStream::new(31, 0);
        let a = Matrix::gaussian(&mut rng, 9, 7, 1.0);
        let b = Matrix::gaussian(&mut rng, 8, 6, 1.0);
        let mut c = Matrix::gaussian(&mut rng, 10, 10, 1.0);
        let before = c.clone();
        // a[2..6, 1..4] * b[3..6, 0..5]^T... shapes: (4x3) * (3x5)
        gemm_block(2.0, a.block(2, 1, 4, 3), b.block(3, 0, 3, 5), 0.5, &mut c, 5, 4).unwrap();
        let sa = Matrix::from_fn(4, 3, |i, j| a[(2 + i, 1 + j)]);
        let sb = Matrix::from_fn(3, 5, |i, j| b[(3 + i, j)]);
        let want = naive(&sa, &sb);
        for i in 0..10 {
            for j in 0..10 {
                let inside = (5..9).contains(&i) && (4..9).contains(&j);
                let expect = if inside { 2.0 * want[(i - 5, j - 4)] + 0.5 * before[(i, j)] } else { before[(i, j)] };
                assert!((c[(i, j)] - expect).abs() < 1e-12);
            }
        }
        // transposed window
        let mut d = Matrix::zeros(3, 3);
        gemm_block(1.0, a.block(0, 0, 4, 3).t(), a.block(0, 0, 4, 3), 0.0, &mut d, 0, 0).unwrap();
        let sa = Matrix::from_fn(4, 3, |i, j| a[(i, j)]);
        assert!(d.sub(&naive(&sa.transpose(), &sa)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn identity_times_m() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.5]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn column_permutation() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let p = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let want = Matrix::from_rows(&[vec![2.0, 1.0], vec![4.0, 3.0]]).unwrap();
        assert_eq!(matmul(&a, &p).unwrap(), want);
    }

    #[test]
    fn against_triple_loop() {
        let mut rng = RngStream::new(11, 0);
        let a = Matrix::gaussian(&mut rng, 7, 5, 1.0);
        let b = Matrix::gaussian(&mut rng, 5, 3, 1.0);
        let c = matmul(&a, &b).unwrap();
        let d = naive(&a, &b);
        assert!(c.sub(&d).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn transposed_operands() {
        let mut rng = RngStream::new(12, 0);
        let a = Matrix::gaussian(&mut rng, 6, 4, 1.0);
        let b = Matrix::gaussian(&mut rng, 6, 9, 1.0);
        let c = matmul_tn(&a, &b).unwrap();
        let d = naive(&a.transpose(), &b);
        assert!(c.sub(&d).unwrap().max_abs() <= 1e-12);
        let e = Matrix::gaussian(&mut rng, 9, 4, 1.0);
        let f = matmul_nt(&a, &e).unwrap();
        assert!(f.sub(&naive(&a, &e.transpose())).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(LabError::Dimension(_))));
    }

    #[test]
    fn hcat_and_columns_roundtrip() {
        let mut rng = RngStream::new(13, 0);
        let a = Matrix::gaussian(&mut rng, 4, 6, 1.0);
        let parts = vec![a.columns(0, 2), a.columns(2, 5), a.columns(5, 6)];
        assert_eq!(Matrix::hcat(&parts).unwrap(), a);
    }
}
