//! Small dense helpers on top of `nalgebra`.
//!
//! `nalgebra`'s own Cholesky only reports success or failure; callers here
//! need the index of the failing pivot, so the factorization is done by hand.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factor `a`, reading only its lower triangle. On failure returns the
    /// index of the first non-positive pivot.
    pub fn new(a: &DMatrix<f64>) -> std::result::Result<Self, usize> {
        let n = a.nrows();
        debug_assert_eq!(n, a.ncols());
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(j);
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    /// Factor or fail with a `Decomposition` error labelled by `context`.
    pub fn try_new(a: &DMatrix<f64>, context: &str) -> Result<Self> {
        Self::new(a).map_err(|i| Error::decomposition(context, i))
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut x = b.clone();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[(i, k)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_upper(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut x = b.clone();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let col = self.solve(&b.column(j).into_owned());
            out.set_column(j, &col);
        }
        out
    }

    /// `L⁻¹ B`, column by column.
    pub fn solve_lower_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let col = self.solve_lower(&b.column(j).into_owned());
            out.set_column(j, &col);
        }
        out
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        symmetrize(&self.solve_matrix(&DMatrix::identity(n, n)))
    }
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Inverse of an SPD matrix, failing with the offending pivot.
pub fn spd_inverse(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    Ok(Cholesky::try_new(a, context)?.inverse())
}

/// Largest absolute asymmetry `|a_ij - a_ji|`.
pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Lower-triangle elements in row order: (0,0), (1,0), (1,1), (2,0), ...
pub fn vech(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            out.push(a[(i, j)]);
        }
    }
    out
}

/// Inverse of [`vech`]; fills both triangles.
pub fn unvech(v: &[f64], n: usize) -> DMatrix<f64> {
    debug_assert_eq!(v.len(), n * (n + 1) / 2);
    let mut a = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            a[(i, j)] = v[k];
            a[(j, i)] = v[k];
            k += 1;
        }
    }
    a
}

/// Row-major flattening.
pub fn row_major(a: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.push(a[(i, j)]);
        }
    }
    out
}

pub fn from_row_major(v: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "expected {rows}x{cols} = {} entries, got {}",
            rows * cols,
            v.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, v))
}
