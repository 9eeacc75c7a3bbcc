//! Dense LU factorization and solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Pivots smaller than this (relative to the largest entry, floored at one)
/// mark the matrix as singular.
pub const SINGULAR_PIVOT: f64 = 1e-14;

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: DMatrix<f64>,
    perm: Vec<usize>,
    /// max |pivot| / min |pivot|, a cheap conditioning indicator.
    pub pivot_ratio: f64,
}

impl Lu {
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "LU needs a square matrix, got {}x{}",
                n,
                a.ncols()
            )));
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.amax().max(1.0);
        let (mut pmax, mut pmin) = (0.0f64, f64::INFINITY);
        for k in 0..n {
            let (mut piv_row, mut piv_val) = (k, lu[(k, k)].abs());
            for i in k + 1..n {
                if lu[(i, k)].abs() > piv_val {
                    piv_row = i;
                    piv_val = lu[(i, k)].abs();
                }
            }
            if !(piv_val > SINGULAR_PIVOT * scale) {
                return Err(Error::Singular { pivot: piv_val });
            }
            if piv_row != k {
                lu.swap_rows(k, piv_row);
                perm.swap(k, piv_row);
            }
            pmax = pmax.max(piv_val);
            pmin = pmin.min(piv_val);
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let factor = lu[(i, k)] / pivot;
                lu[(i, k)] = factor;
                if factor != 0.0 {
                    for j in k + 1..n {
                        let v = lu[(k, j)];
                        lu[(i, j)] -= factor * v;
                    }
                }
            }
        }
        let pivot_ratio = if n == 0 { 1.0 } else { pmax / pmin };
        Ok(Lu {
            lu,
            perm,
            pivot_ratio,
        })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut x = DVector::from_iterator(n, self.perm.iter().map(|&p| b[p]));
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s / self.lu[(i, i)];
        }
        x
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let col = self.solve_vec(&b.column(j).into_owned());
            out.set_column(j, &col);
        }
        out
    }
}

/// Solves `A x = b` by LU with partial pivoting followed by one step of
/// iterative refinement.
pub fn linear_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} rows but right-hand side has {} entries",
            a.nrows(),
            b.len()
        )));
    }
    let lu = Lu::factor(a)?;
    log::debug!("linear_solve: n={} pivot ratio {:.3e}", lu.dim(), lu.pivot_ratio);
    let mut x = lu.solve_vec(b);
    let r = b - a * &x;
    x += lu.solve_vec(&r);
    Ok(x)
}

/// Solves `A X = B` column by column.
pub fn linear_solve_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} rows but right-hand side has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let lu = Lu::factor(a)?;
    let mut x = lu.solve_mat(b);
    let r = b - a * &x;
    x += lu.solve_mat(&r);
    Ok(x)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Induced infinity norm (max absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Spectral radius via the eigenvalues of the real Schur form.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    m.clone().symmetric_eigenvalues().min()
}
