//! Generalized linear mixed models with canonical links.
//!
//! For subject `i`, `η_i = X_i β + Z_i b_i + c_i` with `b_i ~ N(0, Q⁻¹)`,
//! `β ~ N(μ_β⁰, Σ_β⁰)` and `Q ~ W(ν₀, S₀)`. The joint vector
//! `α = (βᵀ, b_1ᵀ, …, b_mᵀ)ᵀ` has a block-arrow Hessian.

mod arrow;
mod data;
mod family;

pub use arrow::{arrow_solve_and_marginals, sample_gaussian_arrow, ArrowCholesky, ArrowSolution, BlockArrowMatrix};
pub use data::{Dataset, SubjectRecord};
pub use family::{family_links, sigmoid, softplus, Family};

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expfam::{GaussianFactor, WishartFactor};
use crate::linalg::{max_asymmetry, Cholesky};

/// Default prior scale `τ₀`.
pub const DEFAULT_TAU0: f64 = 1000.0;

/// Hyperparameters of the priors on `β` and `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub mu_beta0: DVector<f64>,
    pub sigma_beta0: DMatrix<f64>,
    pub nu0: f64,
    pub s0: DMatrix<f64>,
}

impl Prior {
    /// `μ_β⁰ = 0`, `Σ_β⁰ = τ₀ I_p`, `ν₀ = u + 1`, `S₀ = τ₀ I_u`.
    pub fn default_for(p: usize, u: usize, tau0: f64) -> Self {
        Self {
            mu_beta0: DVector::zeros(p),
            sigma_beta0: DMatrix::identity(p, p) * tau0,
            nu0: u as f64 + 1.0,
            s0: DMatrix::identity(u, u) * tau0,
        }
    }

    pub fn beta_factor(&self) -> Result<GaussianFactor> {
        GaussianFactor::new(self.mu_beta0.clone(), self.sigma_beta0.clone())
    }

    pub fn q_factor(&self) -> Result<WishartFactor> {
        WishartFactor::new(self.nu0, self.s0.clone())
    }
}

/// One subject's responses, designs and offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub y: DVector<f64>,
    /// `n_i × p`.
    pub x: DMatrix<f64>,
    /// `n_i × u`.
    pub z: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl Subject {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn linear_predictor(&self, beta: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        &self.x * beta + &self.z * b + &self.offset
    }

    /// `log f(y_i | β, b_i)` including `c(y, φ)`.
    pub fn log_likelihood(&self, family: Family, beta: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let eta = self.linear_predictor(beta, b);
        self.y.iter().zip(eta.iter()).map(|(&y, &e)| family.log_density(y, e)).sum()
    }
}

#[derive(Debug, Clone)]
pub struct GlmmModel {
    family: Family,
    p: usize,
    u: usize,
    subjects: Vec<Subject>,
    prior: Prior,
    prior_beta_precision: DMatrix<f64>,
}

impl GlmmModel {
    pub fn new(family: Family, p: usize, u: usize, subjects: Vec<Subject>, prior: Prior) -> Result<Self> {
        if p == 0 || u == 0 {
            return Err(Error::Dimension("p and u must both be at least 1".into()));
        }
        if prior.mu_beta0.len() != p || prior.sigma_beta0.shape() != (p, p) {
            return Err(Error::Dimension(format!("beta prior must have dimension {p}")));
        }
        if prior.s0.shape() != (u, u) {
            return Err(Error::Dimension(format!("S0 must be {u}x{u}")));
        }
        if max_asymmetry(&prior.sigma_beta0) > 1e-10 || max_asymmetry(&prior.s0) > 1e-10 {
            return Err(Error::InvalidInput("prior covariance matrices must be symmetric".into()));
        }
        if !(prior.nu0 > u as f64 - 1.0) {
            return Err(Error::InvalidInput(format!("nu0 = {} must exceed u - 1", prior.nu0)));
        }
        Cholesky::try_new(&prior.s0, "prior S0")?;
        let prior_beta_precision = Cholesky::try_new(&prior.sigma_beta0, "prior Sigma_beta0")?.inverse();
        let mut seen = std::collections::HashSet::new();
        for s in &subjects {
            let n = s.y.len();
            if s.x.shape() != (n, p) || s.z.shape() != (n, u) || s.offset.len() != n {
                return Err(Error::Dimension(format!(
                    "subject {}: y has {n} rows, X is {}x{}, Z is {}x{}, offsets {} (expected p={p}, u={u})",
                    s.id,
                    s.x.nrows(),
                    s.x.ncols(),
                    s.z.nrows(),
                    s.z.ncols(),
                    s.offset.len()
                )));
            }
            if let Some(y) = s.y.iter().find(|&&y| !family.is_valid_response(y)) {
                return Err(Error::InvalidInput(format!(
                    "subject {}: response {y} invalid for {family}",
                    s.id
                )));
            }
            if s.x.iter().chain(s.z.iter()).chain(s.offset.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("subject {}: non-finite covariate", s.id)));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate subject id {}", s.id)));
            }
        }
        Ok(Self {
            family,
            p,
            u,
            subjects,
            prior,
            prior_beta_precision,
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn u(&self) -> usize {
        self.u
    }

    pub fn m(&self) -> usize {
        self.subjects.len()
    }

    /// Length of `α`.
    pub fn alpha_dim(&self) -> usize {
        self.p + self.m() * self.u
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn prior_beta_precision(&self) -> &DMatrix<f64> {
        &self.prior_beta_precision
    }

    /// Model restricted to the given subjects (in the given order), same prior.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut subjects = Vec::with_capacity(indices.len());
        for &i in indices {
            subjects.push(
                self.subjects
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("subject index {i} out of range")))?,
            );
        }
        Ok(Self {
            subjects,
            ..self.clone()
        })
    }

    fn check_alpha(&self, alpha: &DVector<f64>, eq: &DMatrix<f64>) -> Result<()> {
        if alpha.len() != self.alpha_dim() {
            return Err(Error::Dimension(format!(
                "alpha has length {}, expected p + m u = {}",
                alpha.len(),
                self.alpha_dim()
            )));
        }
        if eq.shape() != (self.u, self.u) {
            return Err(Error::Dimension(format!("E(Q) must be {}x{}", self.u, self.u)));
        }
        Ok(())
    }

    /// `log p(y | β, b) + log p(b | Q̄) + log p(β)` with `Q̄ = eq`.
    pub fn log_joint(&self, alpha: &DVector<f64>, eq: &DMatrix<f64>) -> Result<f64> {
        self.check_alpha(alpha, eq)?;
        let (p, u) = (self.p, self.u);
        let beta = alpha.rows(0, p).into_owned();
        let eq_logdet = Cholesky::try_new(eq, "E(Q)")?.log_det();
        let mut total = 0.0;
        for (i, s) in self.subjects.iter().enumerate() {
            let b = alpha.rows(p + i * u, u).into_owned();
            total += s.log_likelihood(self.family, &beta, &b);
            total += -0.5 * (u as f64) * (2.0 * PI).ln() + 0.5 * eq_logdet - 0.5 * (b.transpose() * eq * &b)[(0, 0)];
        }
        total += self.prior.beta_factor()?.log_density(&beta)?;
        Ok(total)
    }
}

/// Gradient and block-arrow Hessian of `log p(θ) p(y | θ)` with respect to `α`,
/// with `E_q(Q)` standing in for `Q` in the random-effects prior.
pub fn grad_hessian(
    model: &GlmmModel,
    alpha_star: &DVector<f64>,
    eq: &DMatrix<f64>,
) -> Result<(DVector<f64>, BlockArrowMatrix)> {
    model.check_alpha(alpha_star, eq)?;
    let (p, u, m) = (model.p, model.u, model.m());
    let family = model.family;
    let inv_phi = 1.0 / family.phi();
    let beta = alpha_star.rows(0, p).into_owned();

    let mut grad = DVector::zeros(model.alpha_dim());
    let mut hess = BlockArrowMatrix::zeros(p, u, m);
    let (corner, border, diag) = hess.parts_mut();

    let mut g_beta = -(model.prior_beta_precision() * (&beta - &model.prior.mu_beta0));
    *corner -= model.prior_beta_precision();

    for (i, s) in model.subjects.iter().enumerate() {
        let b = alpha_star.rows(p + i * u, u).into_owned();
        let eta = s.linear_predictor(&beta, &b);
        let mut g_b = -(eq * &b);
        let d = &mut diag[i];
        *d -= eq;
        let bd = &mut border[i];
        for j in 0..s.n() {
            let e = eta[j];
            let r = (s.y[j] - family.mean(e)) * inv_phi;
            let w = family.variance(e) * inv_phi;
            for a in 0..p {
                let xa = s.x[(j, a)];
                g_beta[a] += xa * r;
                let wx = w * xa;
                for c in 0..p {
                    corner[(a, c)] -= wx * s.x[(j, c)];
                }
                for c in 0..u {
                    bd[(a, c)] -= wx * s.z[(j, c)];
                }
            }
            for a in 0..u {
                let za = s.z[(j, a)];
                g_b[a] += za * r;
                let wz = w * za;
                for c in 0..u {
                    d[(a, c)] -= wz * s.z[(j, c)];
                }
            }
        }
        grad.rows_mut(p + i * u, u).copy_from(&g_b);
    }
    grad.rows_mut(0, p).copy_from(&g_beta);
    Ok((grad, hess))
}
