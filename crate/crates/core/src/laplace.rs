//! Laplace approximation of one subject's marginal likelihood
//! `∫ f(y_i | β, b) N(b; 0, Q⁻¹) db`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::glmm::{Family, Subject};
use crate::linalg::Cholesky;

pub const NEWTON_MAX_ITERATIONS: usize = 100;
pub const NEWTON_TOLERANCE: f64 = 1e-8;
const MAX_HALVINGS: usize = 60;

/// Log-integrand `h(b) = log f(y_i | β, b) + log N(b; 0, Q⁻¹)` for one
/// subject, with `Q` factored once.
pub struct SubjectIntegrand<'a> {
    subject: &'a Subject,
    family: Family,
    fixed_part: DVector<f64>,
    q: &'a DMatrix<f64>,
    prior_const: f64,
}

impl<'a> SubjectIntegrand<'a> {
    pub fn new(subject: &'a Subject, family: Family, beta: &DVector<f64>, q: &'a DMatrix<f64>) -> Result<Self> {
        let u = subject.z.ncols();
        if beta.len() != subject.x.ncols() || q.shape() != (u, u) {
            return Err(Error::Dimension(format!(
                "subject '{}': beta or Q does not match the design",
                subject.id
            )));
        }
        let chol = Cholesky::try_new(q, "random-effects precision")?;
        Ok(Self {
            subject,
            family,
            fixed_part: &subject.x * beta + &subject.offset,
            q,
            prior_const: 0.5 * chol.log_det() - 0.5 * u as f64 * (2.0 * PI).ln(),
        })
    }

    pub fn u(&self) -> usize {
        self.q.nrows()
    }

    pub fn value(&self, b: &DVector<f64>) -> f64 {
        let eta = &self.fixed_part + &self.subject.z * b;
        let ll: f64 = self
            .subject
            .y
            .iter()
            .zip(eta.iter())
            .map(|(&y, &e)| self.family.log_density(y, e))
            .sum();
        ll + self.prior_const - 0.5 * b.dot(&(self.q * b))
    }

    /// Gradient and negative Hessian of `h` at `b`.
    pub fn grad_neg_hessian(&self, b: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let z = &self.subject.z;
        let eta = &self.fixed_part + z * b;
        let inv_phi = 1.0 / self.family.phi();
        let resid = DVector::from_fn(eta.len(), |j, _| (self.subject.y[j] - self.family.mean(eta[j])) * inv_phi);
        let w = DVector::from_fn(eta.len(), |j, _| self.family.variance(eta[j]) * inv_phi);
        let g = z.transpose() * resid - self.q * b;
        let wz = DMatrix::from_fn(z.nrows(), z.ncols(), |r, c| w[r] * z[(r, c)]);
        let neg_h = z.transpose() * wz + self.q;
        (g, neg_h)
    }
}

/// Mode of the log-integrand and the curvature there.
pub struct LaplaceMode {
    pub b_hat: DVector<f64>,
    pub log_integrand: f64,
    /// Cholesky factor of `−H_h(b̂)`.
    pub neg_hessian: Cholesky,
    pub iterations: usize,
}

impl LaplaceMode {
    /// `h(b̂) + (u/2) log 2π − ½ log det(−H_h(b̂))`.
    pub fn log_marginal(&self) -> f64 {
        let u = self.b_hat.len() as f64;
        self.log_integrand + 0.5 * u * (2.0 * PI).ln() - 0.5 * self.neg_hessian.log_det()
    }
}

/// Damped Newton ascent from `b = 0`: halve the step while `h` does not
/// increase; stop when the gradient max-norm is below `1e-8`.
pub fn find_mode(integrand: &SubjectIntegrand<'_>) -> Result<LaplaceMode> {
    let mut b = DVector::zeros(integrand.u());
    let mut h = integrand.value(&b);
    for it in 0..=NEWTON_MAX_ITERATIONS {
        let (g, neg_h) = integrand.grad_neg_hessian(&b);
        let chol = Cholesky::try_new(&neg_h, "Laplace negative Hessian")?;
        if g.amax() < NEWTON_TOLERANCE {
            return Ok(LaplaceMode {
                b_hat: b,
                log_integrand: h,
                neg_hessian: chol,
                iterations: it,
            });
        }
        if it == NEWTON_MAX_ITERATIONS {
            break;
        }
        let step = chol.solve(&g);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &b + &step * t;
            let hc = integrand.value(&cand);
            if hc >= h - 1e-12 * (1.0 + h.abs()) {
                b = cand;
                h = hc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(Error::Numerical {
        subject: integrand.subject.id.clone(),
        message: format!("Newton search for the random-effect mode did not converge in {NEWTON_MAX_ITERATIONS} iterations"),
    })
}

/// Laplace estimate of `log ∫ f(y_i | β, b) N(b; 0, Q⁻¹) db`, including the
/// exact `c(y, φ)` term.
pub fn laplace_log_marginal(subject: &Subject, family: Family, beta: &DVector<f64>, q: &DMatrix<f64>) -> Result<f64> {
    let integrand = SubjectIntegrand::new(subject, family, beta, q)?;
    Ok(find_mode(&integrand)?.log_marginal())
}
