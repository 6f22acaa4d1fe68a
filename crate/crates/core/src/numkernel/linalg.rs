use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use super::matrix::{dot, norm2, Matrix};
use crate::error::{PedError, Result};

pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 500;
const PIVOT_REL: f64 = 1e-12;

/// Largest eigenvalue of `MᵀM` (the squared spectral norm of `M`), by power
/// iteration. For a symmetric PSD argument pass it through `spectral_norm_sym`.
pub fn gram_spectral_norm(m: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    check_nonempty(m)?;
    let g = m.gram();
    power_iteration_sym(&g, tol, max_iter)
}

/// Largest singular value of `M`.
pub fn spectral_norm(m: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    Ok(gram_spectral_norm(m, tol, max_iter)?.sqrt())
}

/// Dominant eigenvalue magnitude of a symmetric matrix.
pub fn spectral_norm_sym(m: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    check_nonempty(m)?;
    if !m.is_square() {
        return Err(PedError::Validation("symmetric argument must be square".into()));
    }
    power_iteration_sym(m, tol, max_iter)
}

fn check_nonempty(m: &Matrix) -> Result<()> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(PedError::Validation("empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(PedError::Validation("non-finite matrix entry".into()));
    }
    Ok(())
}

fn power_iteration_sym(g: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    let n = g.rows();
    let ones = vec![1.0 / (n as f64).sqrt(); n];
    // second start breaks ties when the all-ones vector is orthogonal to the top eigenvector
    let mut alt: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7548776662).sin() + 0.1).collect();
    let an = norm2(&alt);
    alt.iter_mut().for_each(|v| *v /= an);
    let a = power_from(g, ones, tol, max_iter)?;
    let b = power_from(g, alt, tol, max_iter)?;
    Ok(a.max(b))
}

fn power_from(g: &Matrix, mut v: Vec<f64>, tol: f64, max_iter: usize) -> Result<f64> {
    let mut est = f64::NAN;
    let mut gv = g.matvec(&v);
    for _ in 0..max_iter {
        let rq = dot(&v, &gv);
        let residual = gv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - rq * b).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= tol * rq.abs() || (rq - est).abs() <= 1e-2 * tol * rq.abs() {
            return Ok(rq.abs());
        }
        est = rq;
        let nw = norm2(&gv);
        if nw == 0.0 {
            return Ok(0.0);
        }
        v = gv.iter().map(|x| x / nw).collect();
        gv = g.matvec(&v);
    }
    Err(PedError::PowerIteration {
        iterations: max_iter,
        estimate: est,
        last_iterate: v,
    })
}

/// Lower-triangular Cholesky factor, row-major.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn factor(h: &Matrix) -> Result<Self> {
        if !h.is_square() {
            return Err(PedError::Validation("Cholesky needs a square matrix".into()));
        }
        let n = h.rows();
        let scale = (0..n).fold(0.0_f64, |m, i| m.max(h[(i, i)].abs()));
        let threshold = PIVOT_REL * scale.max(1.0);
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = h[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > threshold) {
                return Err(PedError::NotPositiveDefinite { pivot: j, value: d });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in j + 1..n {
                let mut s = h[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.rows();
        assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[(i, k)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.l.rows();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            inv.set_column(j, &self.solve(&e));
        }
        // symmetrize against round-off
        Matrix::from_fn(n, n, |i, j| 0.5 * (inv[(i, j)] + inv[(j, i)]))
    }

    pub fn factor_l(&self) -> &Matrix {
        &self.l
    }
}

/// Solves `H x = b` for symmetric positive definite `H`.
pub fn solve_spd(h: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if h.rows() != b.len() {
        return Err(PedError::Validation("solve_spd dimension mismatch".into()));
    }
    Ok(Cholesky::factor(h)?.solve(b))
}

pub fn is_positive_definite(h: &Matrix) -> bool {
    Cholesky::factor(h).is_ok()
}

/// Solves a general square system by partial-pivot LU.
pub fn solve_general(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if !a.is_square() || a.rows() != b.len() {
        return Err(PedError::Validation("solve_general dimension mismatch".into()));
    }
    let lu = a.to_nalgebra().lu();
    let rhs = nalgebra::DVector::from_column_slice(b);
    lu.solve(&rhs)
        .map(|x| x.iter().copied().collect())
        .ok_or_else(|| PedError::IllPosed { min_singular: 0.0 })
}

/// Smallest singular value, via the eigenvalues of `AᵀA`.
pub fn min_singular_value(a: &Matrix) -> f64 {
    let svd = a.to_nalgebra().svd(false, false);
    svd.singular_values.iter().fold(f64::INFINITY, |m, &s| m.min(s))
}

/// Ascending eigenvalues and matching eigenvectors (as columns) of a real
/// symmetric matrix.
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if !m.is_square() {
        return Err(PedError::Validation("eigen decomposition needs a square matrix".into()));
    }
    let sym = Matrix::from_fn(m.rows(), m.cols(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let eig = SymmetricEigen::new(sym.to_nalgebra());
    let mut order: Vec<usize> = (0..m.rows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(m.rows(), m.rows(), |i, k| eig.eigenvectors[(i, order[k])]);
    Ok((values, Matrix::from_nalgebra(&vecs)))
}

pub fn min_eig_symmetric(m: &Matrix) -> Result<f64> {
    Ok(symmetric_eigen(m)?.0.first().copied().unwrap_or(f64::NAN))
}

/// Dense complex matrix stored as rows.
pub type ComplexMatrix = Vec<Vec<Complex64>>;

/// Smallest eigenvalue of a complex Hermitian matrix through its real
/// symmetric embedding `[[Re, -Im], [Im, Re]]`.
pub fn min_eig_hermitian(m: &ComplexMatrix) -> Result<f64> {
    min_eig_hermitian_tol(m, 1e-12)
}

pub fn min_eig_hermitian_tol(m: &ComplexMatrix, herm_tol: f64) -> Result<f64> {
    let n = m.len();
    if n == 0 || m.iter().any(|r| r.len() != n) {
        return Err(PedError::Validation("Hermitian input must be square and nonempty".into()));
    }
    let asym = hermitian_asymmetry(m);
    if asym > herm_tol {
        return Err(PedError::NotHermitian { max_asymmetry: asym });
    }
    let emb = Matrix::from_fn(2 * n, 2 * n, |i, j| {
        let (bi, ii) = (i / n, i % n);
        let (bj, jj) = (j / n, j % n);
        let z = m[ii][jj];
        match (bi, bj) {
            (0, 0) | (1, 1) => z.re,
            (0, 1) => -z.im,
            _ => z.im,
        }
    });
    min_eig_symmetric(&emb)
}

pub fn hermitian_asymmetry(m: &ComplexMatrix) -> f64 {
    let n = m.len();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((m[i][j] - m[j][i].conj()).norm());
        }
    }
    worst
}

/// Thin QR by modified Gram-Schmidt. Returns (Q: n×k, R: k×k) for an n×k input.
pub fn qr_mgs(a: &Matrix) -> (Matrix, Matrix) {
    let (n, k) = a.shape();
    let mut q = a.clone();
    let mut r = Matrix::zeros(k, k);
    for j in 0..k {
        let mut v = q.column(j);
        for i in 0..j {
            let qi = q.column(i);
            let rij = dot(&qi, &v);
            r[(i, j)] = rij;
            v.iter_mut().zip(&qi).for_each(|(x, y)| *x -= rij * y);
        }
        let nv = norm2(&v);
        r[(j, j)] = nv;
        if nv > 0.0 {
            v.iter_mut().for_each(|x| *x /= nv);
        }
        q.set_column(j, &v);
    }
    debug_assert_eq!(q.rows(), n);
    (q, r)
}
