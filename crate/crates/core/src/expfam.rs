//! Gaussian and Wishart factors and their divide-and-recombine products.
//!
//! Both families are stored in moment form. Recombining `M` piece posteriors
//! against a shared prior adds natural parameters: the result has natural
//! parameter `Σ_j λ_j − (M−1) λ_0`. Sums run over pieces in index order so the
//! result is bit-reproducible.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{max_asymmetry, symmetrize, Cholesky};

const SYMMETRY_TOL: f64 = 1e-10;

/// Multivariate normal `N(mu, sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFactor {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl GaussianFactor {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::Dimension("Gaussian factor must have dim >= 1".into()));
        }
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::Dimension(format!(
                "mean has length {d} but covariance is {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let asym = max_asymmetry(&sigma);
        if asym > SYMMETRY_TOL {
            return Err(Error::InvalidInput(format!(
                "covariance not symmetric (max asymmetry {asym:e})"
            )));
        }
        Cholesky::try_new(&sigma, "Gaussian covariance")?;
        Ok(Self { mu, sigma })
    }

    /// Builds the factor from `h = P μ` and precision `P`.
    pub fn from_natural(h: &DVector<f64>, precision: &DMatrix<f64>) -> Result<Self> {
        if precision.nrows() != h.len() || precision.ncols() != h.len() {
            return Err(Error::Dimension(format!(
                "natural vector has length {} but precision is {}x{}",
                h.len(),
                precision.nrows(),
                precision.ncols()
            )));
        }
        let chol = Cholesky::try_new(precision, "Gaussian precision")?;
        Self::new(chol.solve(h), chol.inverse())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Natural parameters `(h, P)` with `P = Σ⁻¹` and `h = P μ`.
    pub fn natural(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let chol = Cholesky::try_new(&self.sigma, "Gaussian covariance")?;
        let precision = chol.inverse();
        let h = &precision * &self.mu;
        Ok((h, precision))
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "point has length {}, factor has dim {}",
                x.len(),
                self.dim()
            )));
        }
        let chol = Cholesky::try_new(&self.sigma, "Gaussian covariance")?;
        let z = chol.solve_lower(&(x - &self.mu));
        let d = self.dim() as f64;
        Ok(-0.5 * (d * (2.0 * PI).ln() + chol.log_det() + z.norm_squared()))
    }

    /// Standard deviations of the marginals.
    pub fn marginal_sds(&self) -> DVector<f64> {
        self.sigma.diagonal().map(f64::sqrt)
    }
}

/// Wishart `W(nu, S)`: density ∝ |Q|^{(ν−d−1)/2} exp(−tr(S⁻¹Q)/2), mean `ν S`.
#[derive(Debug, Clone, PartialEq)]
pub struct WishartFactor {
    nu: f64,
    scale: DMatrix<f64>,
}

impl WishartFactor {
    pub fn new(nu: f64, scale: DMatrix<f64>) -> Result<Self> {
        let d = scale.nrows();
        if d == 0 || scale.ncols() != d {
            return Err(Error::Dimension(format!(
                "Wishart scale must be square and non-empty, got {}x{}",
                scale.nrows(),
                scale.ncols()
            )));
        }
        if !nu.is_finite() || nu <= (d as f64) - 1.0 {
            return Err(Error::InvalidInput(format!(
                "Wishart degrees of freedom {nu} must exceed dim - 1 = {}",
                d - 1
            )));
        }
        let asym = max_asymmetry(&scale);
        if asym > SYMMETRY_TOL {
            return Err(Error::InvalidInput(format!(
                "Wishart scale not symmetric (max asymmetry {asym:e})"
            )));
        }
        Cholesky::try_new(&scale, "Wishart scale")?;
        Ok(Self { nu, scale })
    }

    pub fn dim(&self) -> usize {
        self.scale.nrows()
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn scale(&self) -> &DMatrix<f64> {
        &self.scale
    }

    /// `E(Q) = ν S`.
    pub fn mean(&self) -> DMatrix<f64> {
        &self.scale * self.nu
    }

    /// `E(Q⁻¹) = S⁻¹ / (ν − d − 1)`, defined for `ν > d + 1`.
    pub fn mean_inverse(&self) -> Result<DMatrix<f64>> {
        let d = self.dim() as f64;
        if self.nu <= d + 1.0 {
            return Err(Error::InvalidInput(format!(
                "E(Q^-1) needs nu > dim + 1, got nu = {}",
                self.nu
            )));
        }
        let s_inv = Cholesky::try_new(&self.scale, "Wishart scale")?.inverse();
        Ok(s_inv / (self.nu - d - 1.0))
    }

    pub fn log_density(&self, q: &DMatrix<f64>) -> Result<f64> {
        let d = self.dim();
        if q.nrows() != d || q.ncols() != d {
            return Err(Error::Dimension(format!(
                "argument is {}x{}, Wishart has dim {d}",
                q.nrows(),
                q.ncols()
            )));
        }
        let q_chol = Cholesky::try_new(q, "Wishart argument")?;
        let s_chol = Cholesky::try_new(&self.scale, "Wishart scale")?;
        let trace = s_chol.solve_matrix(q).trace();
        let df = d as f64;
        Ok(0.5 * (self.nu - df - 1.0) * q_chol.log_det()
            - 0.5 * trace
            - 0.5 * self.nu * df * std::f64::consts::LN_2
            - 0.5 * self.nu * s_chol.log_det()
            - ln_multivariate_gamma(d, 0.5 * self.nu))
    }
}

/// `ln Γ_d(a)`.
pub fn ln_multivariate_gamma(d: usize, a: f64) -> f64 {
    let df = d as f64;
    0.25 * df * (df - 1.0) * PI.ln()
        + (1..=d).map(|j| ln_gamma(a + 0.5 * (1.0 - j as f64))).sum::<f64>()
}

fn check_nonempty<T>(pieces: &[T]) -> Result<()> {
    if pieces.is_empty() {
        return Err(Error::InvalidInput("no pieces to combine".into()));
    }
    Ok(())
}

/// Product of piece Gaussians divided by the prior raised to `M − 1`.
pub fn combine_gaussians(pieces: &[GaussianFactor], prior: &GaussianFactor) -> Result<GaussianFactor> {
    combine_gaussians_with_exponent(pieces, prior, pieces.len() as f64 - 1.0)
}

/// Natural parameter `Σ_j λ_j − prior_exponent · λ_0`.
pub(crate) fn combine_gaussians_with_exponent(
    pieces: &[GaussianFactor],
    prior: &GaussianFactor,
    prior_exponent: f64,
) -> Result<GaussianFactor> {
    check_nonempty(pieces)?;
    let d = prior.dim();
    if let Some((j, f)) = pieces.iter().enumerate().find(|(_, f)| f.dim() != d) {
        return Err(Error::Dimension(format!(
            "piece {j} has dim {}, prior has dim {d}",
            f.dim()
        )));
    }
    if pieces.len() == 1 && prior_exponent == 0.0 {
        return Ok(pieces[0].clone());
    }
    let mut precision = DMatrix::<f64>::zeros(d, d);
    let mut h = DVector::<f64>::zeros(d);
    for piece in pieces {
        let (hj, pj) = piece.natural()?;
        precision += pj;
        h += hj;
    }
    let (h0, p0) = prior.natural()?;
    precision -= p0 * prior_exponent;
    h -= h0 * prior_exponent;
    let precision = symmetrize(&precision);
    let chol = Cholesky::new(&precision).map_err(|i| {
        Error::Recombination(format!(
            "combined Gaussian precision not positive definite (pivot {i}); pieces too small or overdispersed relative to the prior"
        ))
    })?;
    GaussianFactor::new(chol.solve(&h), chol.inverse())
}

/// Product of piece Wisharts divided by the prior raised to `M − 1`.
pub fn combine_wisharts(pieces: &[WishartFactor], prior: &WishartFactor) -> Result<WishartFactor> {
    combine_wisharts_with_exponent(pieces, prior, pieces.len() as f64 - 1.0)
}

pub(crate) fn combine_wisharts_with_exponent(
    pieces: &[WishartFactor],
    prior: &WishartFactor,
    prior_exponent: f64,
) -> Result<WishartFactor> {
    check_nonempty(pieces)?;
    let d = prior.dim();
    if let Some((j, f)) = pieces.iter().enumerate().find(|(_, f)| f.dim() != d) {
        return Err(Error::Dimension(format!(
            "piece {j} has dim {}, prior has dim {d}",
            f.dim()
        )));
    }
    if pieces.len() == 1 && prior_exponent == 0.0 {
        return Ok(pieces[0].clone());
    }
    let mut nu = 0.0;
    let mut s_inv = DMatrix::<f64>::zeros(d, d);
    for piece in pieces {
        nu += piece.nu;
        s_inv += Cholesky::try_new(&piece.scale, "Wishart piece scale")?.inverse();
    }
    nu -= prior_exponent * prior.nu;
    s_inv -= Cholesky::try_new(&prior.scale, "Wishart prior scale")?.inverse() * prior_exponent;
    if nu <= d as f64 - 1.0 {
        return Err(Error::Recombination(format!(
            "combined Wishart degrees of freedom {nu} not above dim - 1"
        )));
    }
    let chol = Cholesky::new(&symmetrize(&s_inv)).map_err(|i| {
        Error::Recombination(format!(
            "combined inverse Wishart scale not positive definite (pivot {i})"
        ))
    })?;
    WishartFactor::new(nu, chol.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1(mu: f64, var: f64) -> GaussianFactor {
        GaussianFactor::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, var)).unwrap()
    }

    #[test]
    fn natural_of_identity_covariance() {
        let (h, p) = g1(0.0, 1.0).natural().unwrap();
        assert_eq!(h[0], 0.0);
        assert_eq!(p[(0, 0)], 1.0);
    }

    #[test]
    fn natural_of_scalar() {
        let (h, p) = g1(2.0, 4.0).natural().unwrap();
        assert!((h[0] - 0.5).abs() < 1e-15);
        assert!((p[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn indefinite_covariance_names_pivot() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match GaussianFactor::new(DVector::zeros(2), sigma) {
            Err(Error::Decomposition { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_piece_is_returned_unchanged() {
        let piece = g1(1.3, 0.7);
        let out = combine_gaussians(&[piece.clone()], &g1(-4.0, 9.0)).unwrap();
        assert_eq!(out, piece);
        let w = WishartFactor::new(5.0, DMatrix::from_element(1, 1, 2.0)).unwrap();
        let prior = WishartFactor::new(3.0, DMatrix::from_element(1, 1, 10.0)).unwrap();
        assert_eq!(combine_wisharts(&[w.clone()], &prior).unwrap(), w);
    }

    #[test]
    fn symmetric_pieces_keep_center() {
        let (a, v, w) = (0.8, 0.5, 3.0);
        let out = combine_gaussians(&[g1(a, v), g1(a, v)], &g1(a, w)).unwrap();
        assert!((out.mean()[0] - a).abs() < 1e-14);
    }

    #[test]
    fn two_wishart_pieces_arithmetic() {
        let w = WishartFactor::new(5.0, DMatrix::from_element(1, 1, 2.0)).unwrap();
        let prior = WishartFactor::new(3.0, DMatrix::from_element(1, 1, 10.0)).unwrap();
        let out = combine_wisharts(&[w.clone(), w], &prior).unwrap();
        assert_eq!(out.nu(), 7.0);
        assert!((out.scale()[(0, 0)] - 1.0 / 0.9).abs() < 1e-12);
    }

    #[test]
    fn overdispersed_pieces_fail_recombination() {
        // 1/10 + 1/10 - 1/1 < 0
        let out = combine_gaussians(&[g1(0.0, 10.0), g1(0.0, 10.0)], &g1(0.0, 1.0));
        assert!(matches!(out, Err(Error::Recombination(_))));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p2 = GaussianFactor::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(
            combine_gaussians(&[g1(0.0, 1.0)], &p2),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn wishart_dof_must_exceed_dim_minus_one() {
        assert!(WishartFactor::new(0.5, DMatrix::identity(2, 2)).is_err());
        assert!(WishartFactor::new(1.5, DMatrix::identity(2, 2)).is_ok());
    }

    #[test]
    fn wishart_scalar_density_matches_gamma() {
        // W(ν, s) in one dimension is Gamma(shape ν/2, scale 2s).
        let (nu, s, q) = (5.0_f64, 2.0_f64, 3.7_f64);
        let w = WishartFactor::new(nu, DMatrix::from_element(1, 1, s)).unwrap();
        let k = nu / 2.0;
        let theta = 2.0 * s;
        let gamma = (k - 1.0) * q.ln() - q / theta - k * theta.ln() - ln_gamma(k);
        let got = w.log_density(&DMatrix::from_element(1, 1, q)).unwrap();
        assert!((got - gamma).abs() < 1e-12);
    }
}
