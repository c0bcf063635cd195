//! Orthogonal sampling and decompositions: Householder QR, Haar and SUO
//! samplers, one-sided Jacobi SVD, the polar factor and the spectral norm.

use crate::error::{LabError, Result};
use crate::linalg::matrix::{gram_rows, matmul, product, Matrix, Op};
use crate::linalg::rng::RngStream;

pub const SVD_MAX_SWEEPS: usize = 60;
pub const SVD_TOL: f64 = 1e-12;
pub const POLAR_TOL: f64 = 1e-7;
pub const POLAR_MAX_ITER: usize = 30;

/// Thin SVD `a = u * diag(s) * v^T` with `s` descending.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.s.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        product(&us, Op::N, &self.v, Op::T).expect("consistent factors")
    }

    /// `u * v^T`, the orthogonal polar factor.
    pub fn polar(&self) -> Matrix {
        product(&self.u, Op::N, &self.v, Op::T).expect("consistent factors")
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four lanes keep the reduction order fixed while letting it vectorize
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Thin Householder QR of an `m x n` matrix with `m >= n`.
/// Returns `(q, r)` with `q` of size `m x n` and upper-triangular `r` (`n x n`).
pub fn householder_qr(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = a.shape();
    if m < n {
        return Err(LabError::Dimension(format!("thin QR needs rows >= cols, got {m}x{n}")));
    }
    let mut work = a.clone();
    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n);
    let mut w = vec![0.0; n];

    for k in 0..n {
        let mut v: Vec<f64> = (k..m).map(|i| work[(i, k)]).collect();
        let norm = dot(&v, &v).sqrt();
        // a single remaining entry needs no reflection
        if norm == 0.0 || v.len() == 1 {
            reflectors.push((v, 0.0));
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        let tau = if vnorm2 > 0.0 { 2.0 / vnorm2 } else { 0.0 };
        if tau != 0.0 {
            let wk = &mut w[..n - k];
            wk.iter_mut().for_each(|x| *x = 0.0);
            for (i, vi) in v.iter().enumerate() {
                axpy(wk, *vi, &work.row(k + i)[k..]);
            }
            for (i, vi) in v.iter().enumerate() {
                axpy(&mut work.row_mut(k + i)[k..], -tau * vi, wk);
            }
        }
        reflectors.push((v, tau));
    }

    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            r[(i, j)] = work[(i, j)];
        }
    }

    let mut q = Matrix::zeros(m, n);
    for i in 0..n {
        q[(i, i)] = 1.0;
    }
    for k in (0..n).rev() {
        let (v, tau) = &reflectors[k];
        if *tau == 0.0 {
            continue;
        }
        let wk = &mut w[..n - k];
        wk.iter_mut().for_each(|x| *x = 0.0);
        for (i, vi) in v.iter().enumerate() {
            axpy(wk, *vi, &q.row(k + i)[k..]);
        }
        for (i, vi) in v.iter().enumerate() {
            axpy(&mut q.row_mut(k + i)[k..], -tau * vi, wk);
        }
    }
    Ok((q, r))
}

/// Haar-distributed `m x n` matrix with orthonormal columns (`m >= n`).
pub fn haar_orthogonal(rng: &mut RngStream, m: usize, n: usize) -> Result<Matrix> {
    if m < n {
        return Err(LabError::Dimension(format!("haar_orthogonal needs m >= n, got {m}x{n}")));
    }
    if n == 0 {
        return Ok(Matrix::zeros(m, 0));
    }
    let g = Matrix::gaussian(rng, m, n, 1.0);
    let (mut q, r) = householder_qr(&g)?;
    // fixing the sign of diag(R) makes the distribution exactly Haar
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..m {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(q)
}

/// Scaled semi-orthogonal sample: `W W^T = scale * I_m` when `m <= n`,
/// `W^T W = scale * I_n` when `m >= n`.
pub fn suo_sample(rng: &mut RngStream, m: usize, n: usize, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(LabError::Parameter(format!("SUO scale must be positive, got {scale}")));
    }
    let q = if m >= n {
        haar_orthogonal(rng, m, n)?
    } else {
        haar_orthogonal(rng, n, m)?.transpose()
    };
    Ok(q.scale(scale.sqrt()))
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd_jacobi(a: &Matrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(LabError::Numerical("svd_jacobi input has non-finite entries".into()));
    }
    let (m, n) = a.shape();
    if m < n {
        let t = svd_jacobi(&a.transpose())?;
        return Ok(SvdResult { u: t.v, s: t.s, v: t.u });
    }
    // columns of `a` are rows of `cols`; V^T is accumulated the same way
    let mut cols = a.transpose();
    let mut vt = Matrix::identity(n);
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let ap = cols.row(p);
                    let aq = cols.row(q);
                    (dot(ap, ap), dot(aq, aq), dot(ap, aq))
                };
                if gamma == 0.0 || gamma.abs() <= SVD_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut cols, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LabError::Numerical(format!(
            "one-sided Jacobi did not converge after {sweeps} sweeps"
        )));
    }

    let mut order: Vec<(f64, usize)> = (0..n).map(|j| (dot(cols.row(j), cols.row(j)).sqrt(), j)).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let smax = order.first().map_or(0.0, |x| x.0);
    let cutoff = smax * (m as f64) * f64::EPSILON;

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &(sigma, j)) in order.iter().enumerate() {
        if sigma > cutoff && sigma > 0.0 {
            for i in 0..m {
                u[(i, k)] = cols[(j, i)] / sigma;
            }
            s.push(sigma);
        } else {
            deficient.push(k);
            s.push(if sigma.is_finite() { sigma } else { 0.0 });
        }
        for i in 0..n {
            v[(i, k)] = vt[(j, i)];
        }
    }
    if !deficient.is_empty() {
        complete_orthonormal(&mut u, &deficient);
    }
    Ok(SvdResult { u, s, v })
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.cols();
    let data = m.data_mut();
    let (lo, hi) = data.split_at_mut(q * n);
    let rp = &mut lo[p * n..p * n + n];
    let rq = &mut hi[..n];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to all other
/// columns (Gram–Schmidt against the standard basis, applied twice).
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    let (m, n) = u.shape();
    let mut filled: Vec<usize> = (0..n).filter(|c| !missing.contains(c)).collect();
    let mut candidate = 0;
    for &k in missing {
        loop {
            let mut x = vec![0.0; m];
            x[candidate % m] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &c in &filled {
                    let proj: f64 = (0..m).map(|i| u[(i, c)] * x[i]).sum();
                    for (i, xi) in x.iter_mut().enumerate() {
                        *xi -= proj * u[(i, c)];
                    }
                }
            }
            let nrm = dot(&x, &x).sqrt();
            if nrm > 1e-6 {
                for (i, xi) in x.iter().enumerate() {
                    u[(i, k)] = xi / nrm;
                }
                filled.push(k);
                break;
            }
            if candidate > 4 * m + n {
                return;
            }
        }
    }
}

/// Orthogonal polar factor `U V^T` of `a`.
///
/// The input is divided by an upper bound on its spectral norm and iterated on
/// the short side with quintic Newton–Schulz maps `X <- p(A) X`, `A = X X^T`.
/// While some singular value lies between `tol / 32` and ~0.55 a lifting
/// polynomial is used (checked by inertia counts of `A - 0.3 I` and
/// `A - (tol/32)^2 I`); then the convergent map `(15 I - 10 A + 3 A^2) / 8`
/// runs until the step is below `tol`. Directions with numerically zero
/// singular value stay near zero.
/// Falls back to [`svd_jacobi`] if the iteration has not settled within
/// `max_iter` iterations.
pub fn polar_factor(a: &Matrix, tol: f64, max_iter: usize) -> Result<Matrix> {
    if !(tol > 0.0) {
        return Err(LabError::Parameter(format!("polar tolerance must be positive, got {tol}")));
    }
    if a.max_abs() == 0.0 {
        return Err(LabError::DegenerateGradient);
    }
    if !a.is_finite() {
        return Err(LabError::Numerical("polar_factor input has non-finite entries".into()));
    }
    if a.rows() > a.cols() {
        return polar_factor(&a.transpose(), tol, max_iter).map(|p| p.transpose());
    }
    match newton_schulz(a, tol, max_iter) {
        Some(p) => Ok(p),
        None => Ok(svd_jacobi(a)?.polar()),
    }
}

// Lifting phase: fast growth of small singular values, maps [0, 1.2] into
// itself without converging. Coefficients as used by practical spectral
// optimizers.
const LIFT: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);
// Convergent phase: f(s) = (15 s - 10 s^3 + 3 s^5) / 8, fixed point 1 of
// order three, attracting on (0, 1.52).
const CONVERGE: (f64, f64, f64) = (15.0 / 8.0, -10.0 / 8.0, 3.0 / 8.0);
// Switch to the convergent phase once every squared singular value is either
// above LIFT_EXIT or small enough (below (tol / 32)^2) that the few remaining
// iterations cannot grow it past the tolerance.
const LIFT_EXIT: f64 = 0.3;

fn newton_schulz(a: &Matrix, tol: f64, max_iter: usize) -> Option<Matrix> {
    let m = a.rows();
    let mut gram = gram_rows(a);
    // lambda_max(A A^T) <= min(||.||_F, ||.||_inf) for a PSD matrix
    let frob = gram.frobenius_norm();
    let inf = (0..m)
        .map(|i| gram.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let bound2 = frob.min(inf);
    if !(bound2 > 0.0) {
        return None;
    }
    let mut x = a.scale(1.0 / bound2.sqrt());
    gram.scale_in_place(1.0 / bound2);

    let null2 = (tol / 32.0).powi(2);
    let mut lifting = !lifted(&gram, null2);
    let mut poly = Matrix::zeros(m, m);
    for it in 0..max_iter {
        if it > 0 {
            gram = gram_rows(&x);
            if lifting && lifted(&gram, null2) {
                lifting = false;
            }
        }
        let (c1, c3, c5) = if lifting { LIFT } else { CONVERGE };
        // poly = c1 I + c3 A + c5 A^2
        crate::linalg::matrix::gemm(c5, &gram, Op::N, &gram, Op::N, 0.0, &mut poly).ok()?;
        poly.axpy(c3, &gram).ok()?;
        for i in 0..m {
            poly[(i, i)] += c1;
        }
        let next = matmul(&poly, &x).ok()?;
        let step = next.sub(&x).ok()?.frobenius_norm();
        x = next;
        if !step.is_finite() {
            return None;
        }
        if !lifting && step <= tol {
            return Some(x);
        }
    }
    None
}

fn lifted(gram: &Matrix, null2: f64) -> bool {
    count_below(gram, LIFT_EXIT) == count_below(gram, null2)
}

/// Number of eigenvalues of the symmetric matrix `a` below `shift`, from the
/// signs of the pivots of an unpivoted `L D L^T` factorization of `a - shift I`
/// (Sylvester's law of inertia).
fn count_below(a: &Matrix, shift: f64) -> usize {
    let n = a.rows();
    let mut l = vec![0.0; n * n];
    let mut dg = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut negative = 0;
    for j in 0..n {
        for k in 0..j {
            w[k] = l[j * n + k] * dg[k];
        }
        let mut dj = a[(j, j)] - shift - dot(&l[j * n..j * n + j], &w[..j]);
        if dj == 0.0 {
            dj = -f64::EPSILON * (1.0 + a[(j, j)].abs());
        }
        dg[j] = dj;
        if dj < 0.0 {
            negative += 1;
        }
        for i in j + 1..n {
            l[i * n + j] = (a[(i, j)] - dot(&l[i * n..i * n + j], &w[..j])) / dj;
        }
    }
    negative
}

/// Orthogonalization with a fixed iteration budget: `lift` lifting steps
/// followed by `converge` steps of the convergent quintic, no stopping test
/// and no fallback. Singular values above roughly `0.55 / 3.44^lift` of the
/// spectral-norm bound end within `1e-6` of one after three convergent steps;
/// smaller ones end in `[0, 1)`. The result always has spectral norm at most
/// one up to rounding.
pub fn polar_fixed_schedule(a: &Matrix, lift: usize, converge: usize) -> Result<Matrix> {
    if a.max_abs() == 0.0 {
        return Err(LabError::DegenerateGradient);
    }
    if !a.is_finite() {
        return Err(LabError::Numerical("orthogonalization input has non-finite entries".into()));
    }
    if a.rows() > a.cols() {
        return polar_fixed_schedule(&a.transpose(), lift, converge).map(|p| p.transpose());
    }
    let m = a.rows();
    let mut gram = gram_rows(a);
    let frob = gram.frobenius_norm();
    let inf = (0..m)
        .map(|i| gram.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let bound2 = frob.min(inf);
    gram.scale_in_place(1.0 / bound2);
    let x0 = a.scale(1.0 / bound2.sqrt());
    let schedule = std::iter::repeat_n(LIFT, lift).chain(std::iter::repeat_n(CONVERGE, converge));

    let mut poly = Matrix::zeros(m, m);
    if a.cols() >= 2 * m {
        // all iterates are q(A0) X0 with A_k = q_k(A0)^2 A0, so the work stays m x m
        let mut q = Matrix::identity(m);
        let mut sq = Matrix::zeros(m, m);
        for (c1, c3, c5) in schedule {
            crate::linalg::matrix::gemm(c5, &gram, Op::N, &gram, Op::N, 0.0, &mut poly)?;
            poly.axpy(c3, &gram)?;
            for i in 0..m {
                poly[(i, i)] += c1;
            }
            q = matmul(&poly, &q)?;
            crate::linalg::matrix::gemm(1.0, &poly, Op::N, &poly, Op::N, 0.0, &mut sq)?;
            gram = matmul(&sq, &gram)?;
            symmetrize(&mut gram);
        }
        return matmul(&q, &x0);
    }
    let mut x = x0;
    for (k, (c1, c3, c5)) in schedule.enumerate() {
        if k > 0 {
            gram = gram_rows(&x);
        }
        crate::linalg::matrix::gemm(c5, &gram, Op::N, &gram, Op::N, 0.0, &mut poly)?;
        poly.axpy(c3, &gram)?;
        for i in 0..m {
            poly[(i, i)] += c1;
        }
        x = matmul(&poly, &x)?;
    }
    Ok(x)
}

fn symmetrize(a: &mut Matrix) {
    let n = a.rows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Largest singular value by power iteration on `a^T a`. The iteration stops
/// once the Rayleigh quotient moves by less than `tol / 100` relative.
pub fn spectral_norm(a: &Matrix, tol: f64) -> f64 {
    spectral_norm_with_limit(a, tol, 20_000)
}

pub fn spectral_norm_with_limit(a: &Matrix, tol: f64, max_iter: usize) -> f64 {
    let (m, n) = a.shape();
    if m == 0 || n == 0 || a.max_abs() == 0.0 {
        return 0.0;
    }
    let mut start = RngStream::new(0x5EC7_0A11, 0);
    let mut v: Vec<f64> = (0..n).map(|_| start.gaussian()).collect();
    normalize(&mut v);
    let mut av = vec![0.0; m];
    let mut lambda_prev = 0.0;
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        for (i, out) in av.iter_mut().enumerate() {
            *out = dot(a.row(i), &v);
        }
        lambda = dot(&av, &av);
        if lambda == 0.0 {
            return 0.0;
        }
        // v <- a^T (a v), normalized
        v.iter_mut().for_each(|x| *x = 0.0);
        for (i, ai) in av.iter().enumerate() {
            axpy(&mut v, *ai, a.row(i));
        }
        normalize(&mut v);
        if (lambda - lambda_prev).abs() <= 0.01 * tol * lambda {
            break;
        }
        lambda_prev = lambda;
    }
    lambda.sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matrix::matmul_tn;

    fn orth_err_cols(q: &Matrix) -> f64 {
        matmul_tn(q, q).unwrap().sub_scaled_identity(1.0).unwrap().max_abs()
    }

    #[test]
    fn qr_reconstructs() {
        let mut rng = RngStream::new(5, 0);
        let a = Matrix::gaussian(&mut rng, 12, 7, 1.0);
        let (q, r) = householder_qr(&a).unwrap();
        assert!(orth_err_cols(&q) < 1e-13);
        assert!(matmul(&q, &r).unwrap().sub(&a).unwrap().max_abs() < 1e-12);
        for i in 0..7 {
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn haar_one_by_one_is_sign() {
        let mut rng = RngStream::new(1, 0);
        let mut plus: i32 = 0;
        for _ in 0..2000 {
            let q = haar_orthogonal(&mut rng, 1, 1).unwrap();
            assert_eq!(q[(0, 0)].abs(), 1.0);
            if q[(0, 0)] > 0.0 {
                plus += 1;
            }
        }
        // Binomial(2000, 1/2): sd ~ 22
        assert!((plus - 1000).abs() < 100, "{plus}");
    }

    #[test]
    fn haar_square_is_orthogonal() {
        let mut rng = RngStream::new(2, 0);
        let q = haar_orthogonal(&mut rng, 64, 64).unwrap();
        let e = gram_rows(&q).sub_scaled_identity(1.0).unwrap();
        assert!(spectral_norm(&e, 1e-6) <= 1e-10);
    }

    #[test]
    fn haar_rejects_wide() {
        let mut rng = RngStream::new(2, 0);
        assert!(matches!(haar_orthogonal(&mut rng, 3, 5), Err(LabError::Dimension(_))));
    }

    #[test]
    fn suo_scales() {
        let mut rng = RngStream::new(3, 0);
        let w = suo_sample(&mut rng, 64, 256, 1.5).unwrap();
        let e = gram_rows(&w).sub_scaled_identity(1.5).unwrap();
        assert!(spectral_norm(&e, 1e-6) <= 1e-8);

        let w = suo_sample(&mut rng, 32, 32, 3.0).unwrap();
        let svd = svd_jacobi(&w).unwrap();
        for s in svd.s {
            assert!((s - 3f64.sqrt()).abs() <= 1e-8);
        }
        assert!(matches!(suo_sample(&mut rng, 4, 4, 0.0), Err(LabError::Parameter(_))));
        assert!(matches!(suo_sample(&mut rng, 4, 4, -1.0), Err(LabError::Parameter(_))));
    }

    #[test]
    fn svd_diagonal_cases() {
        let a = Matrix::from_diag(&[3.0, 2.0]);
        let r = svd_jacobi(&a).unwrap();
        assert_eq!(r.s, vec![3.0, 2.0]);
        assert!(r.u.sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-15);
        assert!(r.v.sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-15);

        let b = Matrix::from_diag(&[3.0, -2.0]);
        let r = svd_jacobi(&b).unwrap();
        assert_eq!(r.s, vec![3.0, 2.0]);
        assert!(r.reconstruct().sub(&b).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn svd_random_rectangular() {
        let mut rng = RngStream::new(4, 0);
        for &(m, n) in &[(10usize, 6usize), (6, 10)] {
            let a = Matrix::gaussian(&mut rng, m, n, 1.0);
            let r = svd_jacobi(&a).unwrap();
            assert!(orth_err_cols(&r.u) <= 1e-10);
            assert!(orth_err_cols(&r.v) <= 1e-10);
            let rel = r.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
            assert!(rel <= 1e-8);
            assert!(r.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_rank_deficient_keeps_orthonormal_u() {
        let mut rng = RngStream::new(6, 0);
        let x = Matrix::gaussian(&mut rng, 8, 2, 1.0);
        let y = Matrix::gaussian(&mut rng, 2, 5, 1.0);
        let a = matmul(&x, &y).unwrap();
        let r = svd_jacobi(&a).unwrap();
        assert!(orth_err_cols(&r.u) <= 1e-10);
        assert!(r.reconstruct().sub(&a).unwrap().max_abs() < 1e-10);
        assert!(r.s[2] < 1e-12);
    }

    #[test]
    fn polar_of_scaled_identity_and_orthogonal() {
        let a = Matrix::identity(5).scale(4.2);
        let p = polar_factor(&a, POLAR_TOL, POLAR_MAX_ITER).unwrap();
        assert!(p.sub(&Matrix::identity(5)).unwrap().max_abs() < 1e-12);

        let mut rng = RngStream::new(7, 0);
        let q = haar_orthogonal(&mut rng, 16, 16).unwrap();
        let p = polar_factor(&q, POLAR_TOL, POLAR_MAX_ITER).unwrap();
        assert!(p.sub(&q).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn polar_matches_svd_oracle() {
        let mut rng = RngStream::new(8, 0);
        for &(m, n) in &[(64usize, 64usize), (40, 17), (17, 40)] {
            let a = Matrix::gaussian(&mut rng, m, n, 1.0);
            let p = polar_factor(&a, POLAR_TOL, POLAR_MAX_ITER).unwrap();
            let oracle = svd_jacobi(&a).unwrap().polar();
            assert!(p.sub(&oracle).unwrap().frobenius_norm() <= 1e-6, "{m}x{n}");
        }
    }

    #[test]
    fn polar_zero_is_degenerate() {
        assert_eq!(
            polar_factor(&Matrix::zeros(3, 3), POLAR_TOL, POLAR_MAX_ITER),
            Err(LabError::DegenerateGradient)
        );
    }

    #[test]
    fn polar_falls_back_when_iteration_budget_is_tiny() {
        let mut rng = RngStream::new(9, 0);
        let a = Matrix::gaussian(&mut rng, 12, 12, 1.0);
        let p = polar_factor(&a, POLAR_TOL, 1).unwrap();
        let oracle = svd_jacobi(&a).unwrap().polar();
        assert!(p.sub(&oracle).unwrap().frobenius_norm() <= 1e-9);
    }

    #[test]
    fn fixed_schedule_orthogonalizes_significant_directions() {
        let mut rng = RngStream::new(11, 0);
        for &(m, n) in &[(24usize, 24usize), (16, 64), (64, 16), (20, 50)] {
            let a = Matrix::gaussian(&mut rng, m, n, 1.0);
            let p = polar_fixed_schedule(&a, 8, 4).unwrap();
            let oracle = svd_jacobi(&a).unwrap().polar();
            assert!(p.sub(&oracle).unwrap().frobenius_norm() <= 1e-6, "{m}x{n}");
        }
        // rank-deficient input: null directions stay at zero, norm stays at most one
        let x = Matrix::gaussian(&mut rng, 30, 3, 1.0);
        let y = Matrix::gaussian(&mut rng, 3, 80, 1.0);
        let a = matmul(&x, &y).unwrap();
        let p = polar_fixed_schedule(&a, 8, 4).unwrap();
        let s = svd_jacobi(&p).unwrap().s;
        assert!(s[0] <= 1.0 + 1e-9, "{:?}", &s[..4]);
        assert!((s[2] - 1.0).abs() < 1e-6 && s[3] < 1e-6);
        assert_eq!(polar_fixed_schedule(&Matrix::zeros(2, 2), 3, 3), Err(LabError::DegenerateGradient));
    }

    #[test]
    fn polar_handles_rank_deficient_gradients() {
        let mut rng = RngStream::new(12, 0);
        let x = Matrix::gaussian(&mut rng, 40, 5, 1.0);
        let y = Matrix::gaussian(&mut rng, 5, 40, 1.0);
        let a = matmul(&x, &y).unwrap();
        let p = polar_factor(&a, POLAR_TOL, POLAR_MAX_ITER).unwrap();
        assert!(p.is_finite());
        assert!(spectral_norm(&p, 1e-9) <= 1.0 + 1e-6);
        // on the range of a, p agrees with the SVD polar factor
        let svd = svd_jacobi(&a).unwrap();
        let u5 = svd.u.columns(0, 5);
        let diff = matmul_tn(&u5, &p.sub(&svd.polar()).unwrap()).unwrap();
        assert!(diff.frobenius_norm() < 1e-6);
    }

    #[test]
    fn spectral_norm_basics() {
        assert!((spectral_norm(&Matrix::identity(7), 1e-8) - 1.0).abs() < 1e-12);
        assert!((spectral_norm(&Matrix::identity(7).scale(2.0), 1e-8) - 2.0).abs() < 1e-12);
        assert_eq!(spectral_norm(&Matrix::zeros(3, 4), 1e-8), 0.0);
        let mut rng = RngStream::new(10, 0);
        let a = Matrix::gaussian(&mut rng, 50, 50, 1.0);
        let s = spectral_norm(&a, 1e-6);
        let oracle = svd_jacobi(&a).unwrap().s[0];
        assert!((s - oracle).abs() / oracle <= 1e-6);
    }
}
