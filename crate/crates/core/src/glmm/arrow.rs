//! Block-arrow symmetric matrices: the shape of the joint precision of
//! fixed effects `β` (dense `p×p` corner) and per-subject random effects
//! `b_i` (block-diagonal `u×u` tail), coupled by `p×u` border blocks.
//!
//! Factorization eliminates the tail first:
//!
//! ```text
//! D_i = L_i L_iᵀ,   W_i = B_i L_i⁻ᵀ,   S = A − Σ_i W_i W_iᵀ = L_S L_Sᵀ
//! ```
//!
//! which is the Cholesky factor of the matrix reordered as `(b, β)`. Work is
//! `O(m)` small factorizations plus one `p×p` factorization.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Cholesky};
use crate::rng::standard_normal_vec;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockArrowMatrix {
    u: usize,
    corner: DMatrix<f64>,
    border: Vec<DMatrix<f64>>,
    diag: Vec<DMatrix<f64>>,
}

impl BlockArrowMatrix {
    pub fn new(corner: DMatrix<f64>, border: Vec<DMatrix<f64>>, diag: Vec<DMatrix<f64>>) -> Result<Self> {
        let p = corner.nrows();
        if corner.ncols() != p {
            return Err(Error::Dimension("arrow corner must be square".into()));
        }
        if border.len() != diag.len() {
            return Err(Error::Dimension(format!(
                "{} border blocks but {} diagonal blocks",
                border.len(),
                diag.len()
            )));
        }
        let u = diag.first().map_or(0, |d| d.nrows());
        for (i, (b, d)) in border.iter().zip(&diag).enumerate() {
            if d.nrows() != u || d.ncols() != u {
                return Err(Error::Dimension(format!("diagonal block {i} is not {u}x{u}")));
            }
            if b.nrows() != p || b.ncols() != u {
                return Err(Error::Dimension(format!("border block {i} is not {p}x{u}")));
            }
        }
        Ok(Self { u, corner, border, diag })
    }

    pub fn zeros(p: usize, u: usize, m: usize) -> Self {
        Self {
            u,
            corner: DMatrix::zeros(p, p),
            border: vec![DMatrix::zeros(p, u); m],
            diag: vec![DMatrix::zeros(u, u); m],
        }
    }

    pub fn identity(p: usize, u: usize, m: usize) -> Self {
        Self {
            u,
            corner: DMatrix::identity(p, p),
            border: vec![DMatrix::zeros(p, u); m],
            diag: vec![DMatrix::identity(u, u); m],
        }
    }

    pub fn p(&self) -> usize {
        self.corner.nrows()
    }

    pub fn u(&self) -> usize {
        self.u
    }

    pub fn m(&self) -> usize {
        self.diag.len()
    }

    pub fn dim(&self) -> usize {
        self.p() + self.m() * self.u()
    }

    pub fn corner(&self) -> &DMatrix<f64> {
        &self.corner
    }

    pub fn border(&self) -> &[DMatrix<f64>] {
        &self.border
    }

    pub fn diag(&self) -> &[DMatrix<f64>] {
        &self.diag
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut DMatrix<f64>, &mut [DMatrix<f64>], &mut [DMatrix<f64>]) {
        (&mut self.corner, &mut self.border, &mut self.diag)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.p() == other.p() && self.u() == other.u() && self.m() == other.m()
    }

    /// `self ← a·self + b·other`.
    pub fn scale_add(&mut self, a: f64, other: &Self, b: f64) {
        debug_assert!(self.same_shape(other));
        self.corner *= a;
        self.corner += &other.corner * b;
        for (s, o) in self.border.iter_mut().zip(&other.border) {
            *s *= a;
            *s += o * b;
        }
        for (s, o) in self.diag.iter_mut().zip(&other.diag) {
            *s *= a;
            *s += o * b;
        }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let (p, u) = (self.p(), self.u());
        let xb = x.rows(0, p);
        let mut out = DVector::zeros(self.dim());
        let mut top = &self.corner * xb;
        for (i, (b, d)) in self.border.iter().zip(&self.diag).enumerate() {
            let xi = x.rows(p + i * u, u);
            top += b * xi;
            let bottom = b.transpose() * xb + d * xi;
            out.rows_mut(p + i * u, u).copy_from(&bottom);
        }
        out.rows_mut(0, p).copy_from(&top);
        out
    }

    /// Dense reconstruction. Meant for tests and diagnostics on small instances.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let (p, u) = (self.p(), self.u());
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        out.view_mut((0, 0), (p, p)).copy_from(&self.corner);
        for (i, (b, d)) in self.border.iter().zip(&self.diag).enumerate() {
            let o = p + i * u;
            out.view_mut((0, o), (p, u)).copy_from(b);
            out.view_mut((o, 0), (u, p)).copy_from(&b.transpose());
            out.view_mut((o, o), (u, u)).copy_from(d);
        }
        out
    }

    /// Block Cholesky factorization; the error index is the failing diagonal
    /// block, or `m` when the Schur complement on the corner fails.
    pub fn factor(&self) -> Result<ArrowCholesky> {
        let m = self.m();
        let mut diag_chol = Vec::with_capacity(m);
        let mut wt = Vec::with_capacity(m);
        let mut schur = self.corner.clone();
        for (i, (b, d)) in self.border.iter().zip(&self.diag).enumerate() {
            let c = Cholesky::new(d).map_err(|_| Error::decomposition("arrow diagonal block", i))?;
            // Wᵢᵀ = Lᵢ⁻¹ Bᵢᵀ  (u×p)
            let w_t = c.solve_lower_matrix(&b.transpose());
            schur -= w_t.transpose() * &w_t;
            diag_chol.push(c);
            wt.push(w_t);
        }
        let schur_chol = Cholesky::new(&symmetrize(&schur))
            .map_err(|_| Error::decomposition("arrow Schur complement", m))?;
        Ok(ArrowCholesky {
            p: self.p(),
            u: self.u(),
            diag_chol,
            wt,
            schur_chol,
        })
    }
}

/// Factorization produced by [`BlockArrowMatrix::factor`].
#[derive(Debug, Clone)]
pub struct ArrowCholesky {
    p: usize,
    u: usize,
    diag_chol: Vec<Cholesky>,
    wt: Vec<DMatrix<f64>>,
    schur_chol: Cholesky,
}

/// Solution and inverse blocks of a block-arrow precision.
#[derive(Debug, Clone)]
pub struct ArrowSolution {
    pub solution: DVector<f64>,
    /// `(H⁻¹)_ββ`.
    pub corner_cov: DMatrix<f64>,
    /// `(H⁻¹)_{β b_i}`, each `p×u`.
    pub border_cov: Vec<DMatrix<f64>>,
    /// `(H⁻¹)_{b_i b_i}`, each `u×u`.
    pub diag_cov: Vec<DMatrix<f64>>,
    pub logdet: f64,
}

impl ArrowCholesky {
    pub fn m(&self) -> usize {
        self.diag_chol.len()
    }

    pub fn dim(&self) -> usize {
        self.p + self.m() * self.u
    }

    pub fn log_det(&self) -> f64 {
        self.diag_chol.iter().map(Cholesky::log_det).sum::<f64>() + self.schur_chol.log_det()
    }

    /// Back-substitution with the transposed factor: returns `x` with `Lᵀ x = y`
    /// where `y` is ordered `(β, b_1, …, b_m)`.
    fn solve_upper(&self, y: &DVector<f64>) -> DVector<f64> {
        let (p, u) = (self.p, self.u);
        let mut x = DVector::zeros(self.dim());
        let x_beta = self.schur_chol.solve_upper(&y.rows(0, p).into_owned());
        for (i, (c, w_t)) in self.diag_chol.iter().zip(&self.wt).enumerate() {
            let rhs = y.rows(p + i * u, u) - w_t * &x_beta;
            x.rows_mut(p + i * u, u).copy_from(&c.solve_upper(&rhs));
        }
        x.rows_mut(0, p).copy_from(&x_beta);
        x
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let (p, u) = (self.p, self.u);
        let mut y = DVector::zeros(self.dim());
        let mut top = rhs.rows(0, p).into_owned();
        for (i, (c, w_t)) in self.diag_chol.iter().zip(&self.wt).enumerate() {
            let yi = c.solve_lower(&rhs.rows(p + i * u, u).into_owned());
            top -= w_t.transpose() * &yi;
            y.rows_mut(p + i * u, u).copy_from(&yi);
        }
        y.rows_mut(0, p).copy_from(&self.schur_chol.solve_lower(&top));
        self.solve_upper(&y)
    }

    /// `L⁻ᵀ z`: maps a standard normal vector to a draw with covariance `H⁻¹`.
    pub fn whiten_inverse(&self, z: &DVector<f64>) -> DVector<f64> {
        self.solve_upper(z)
    }

    /// Diagonal, border and corner blocks of `H⁻¹`.
    pub fn marginals(&self) -> (DMatrix<f64>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let corner_cov = self.schur_chol.inverse();
        let mut border_cov = Vec::with_capacity(self.m());
        let mut diag_cov = Vec::with_capacity(self.m());
        for (c, w_t) in self.diag_chol.iter().zip(&self.wt) {
            // Kᵢᵀ = Dᵢ⁻¹ Bᵢᵀ = Lᵢ⁻ᵀ Wᵢᵀ
            let mut k_t = DMatrix::zeros(w_t.nrows(), w_t.ncols());
            for j in 0..w_t.ncols() {
                k_t.set_column(j, &c.solve_upper(&w_t.column(j).into_owned()));
            }
            let sk = &corner_cov * k_t.transpose();
            let cross = -&sk;
            let d_inv = c.inverse();
            diag_cov.push(symmetrize(&(d_inv + &k_t * &sk)));
            border_cov.push(cross);
        }
        (corner_cov, border_cov, diag_cov)
    }
}

/// Solves `H x = rhs` and returns the inverse blocks and `log det H`.
pub fn arrow_solve_and_marginals(h: &BlockArrowMatrix, rhs: &DVector<f64>) -> Result<ArrowSolution> {
    if rhs.len() != h.dim() {
        return Err(Error::Dimension(format!(
            "rhs has length {}, matrix has dim {}",
            rhs.len(),
            h.dim()
        )));
    }
    let f = h.factor()?;
    let solution = f.solve(rhs);
    let (corner_cov, border_cov, diag_cov) = f.marginals();
    Ok(ArrowSolution {
        solution,
        corner_cov,
        border_cov,
        diag_cov,
        logdet: f.log_det(),
    })
}

/// Draws from `N(mu, H⁻¹)` as `mu + L⁻ᵀ z`.
pub fn sample_gaussian_arrow<R: Rng + ?Sized>(
    mu: &DVector<f64>,
    h: &BlockArrowMatrix,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if mu.len() != h.dim() {
        return Err(Error::Dimension(format!(
            "mean has length {}, precision has dim {}",
            mu.len(),
            h.dim()
        )));
    }
    let f = h.factor()?;
    let z = standard_normal_vec(rng, h.dim());
    Ok(mu + f.whiten_inverse(&z))
}
