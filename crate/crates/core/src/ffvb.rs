//! Stochastic fixed-form variational Bayes for products of Gaussian factors.
//!
//! Each block `θ_k` gets a Gaussian factor. Per iteration one joint draw
//! `θ*` is taken from the current factors; each block then refreshes its
//! moments from `(Γ_k, g_k, t_k)`, evaluates the gradient and Hessian of the
//! log target at `θ*`, and moves its state with weights `(1 − c, c)`,
//! `c = 1/√N`. The last `N/2` iterations are averaged into the returned
//! factors `Σ_k = Γ̄_k⁻¹`, `μ_k = Σ_k ḡ_k + t̄_k`.
//!
//! The precision type is generic so the GLMM joint block can stay in
//! block-arrow form.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::expfam::GaussianFactor;
use crate::glmm::{ArrowCholesky, BlockArrowMatrix};
use crate::linalg::{max_asymmetry, Cholesky};
use crate::rng::standard_normal_vec;

pub const DEFAULT_INNER_ITERATIONS: usize = 100;
const HESSIAN_SYMMETRY_TOL: f64 = 1e-8;

/// Factorized precision supporting the two operations the optimizer needs.
pub trait PrecisionFactor {
    /// `Γ⁻¹ rhs`.
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64>;
    /// `L⁻ᵀ z` where `Γ = L Lᵀ`; maps standard normals to `N(0, Γ⁻¹)`.
    fn whiten_inverse(&self, z: &DVector<f64>) -> DVector<f64>;
}

/// Symmetric matrix representation usable as a factor precision.
pub trait PrecisionMatrix: Clone {
    type Factor: PrecisionFactor;

    fn dim(&self) -> usize;
    fn zeros_like(&self) -> Self;
    /// `self ← a·self + b·other`.
    fn scale_add(&mut self, a: f64, other: &Self, b: f64);
    fn factor(&self) -> Result<Self::Factor>;
    fn max_asymmetry(&self) -> f64;
}

impl PrecisionFactor for Cholesky {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        Cholesky::solve(self, rhs)
    }

    fn whiten_inverse(&self, z: &DVector<f64>) -> DVector<f64> {
        self.solve_upper(z)
    }
}

impl PrecisionMatrix for DMatrix<f64> {
    type Factor = Cholesky;

    fn dim(&self) -> usize {
        self.nrows()
    }

    fn zeros_like(&self) -> Self {
        DMatrix::zeros(self.nrows(), self.ncols())
    }

    fn scale_add(&mut self, a: f64, other: &Self, b: f64) {
        *self *= a;
        *self += other * b;
    }

    fn factor(&self) -> Result<Cholesky> {
        Cholesky::try_new(self, "precision")
    }

    fn max_asymmetry(&self) -> f64 {
        max_asymmetry(self)
    }
}

impl PrecisionFactor for ArrowCholesky {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        ArrowCholesky::solve(self, rhs)
    }

    fn whiten_inverse(&self, z: &DVector<f64>) -> DVector<f64> {
        ArrowCholesky::whiten_inverse(self, z)
    }
}

impl PrecisionMatrix for BlockArrowMatrix {
    type Factor = ArrowCholesky;

    fn dim(&self) -> usize {
        BlockArrowMatrix::dim(self)
    }

    fn zeros_like(&self) -> Self {
        BlockArrowMatrix::zeros(self.p(), self.u(), self.m())
    }

    fn scale_add(&mut self, a: f64, other: &Self, b: f64) {
        BlockArrowMatrix::scale_add(self, a, other, b)
    }

    fn factor(&self) -> Result<ArrowCholesky> {
        BlockArrowMatrix::factor(self)
    }

    fn max_asymmetry(&self) -> f64 {
        self.diag()
            .iter()
            .map(max_asymmetry)
            .fold(max_asymmetry(self.corner()), f64::max)
    }
}

/// Target supplying per-block derivatives of `log p(θ) p(y | θ)`.
pub trait BlockTarget {
    type Precision: PrecisionMatrix;

    fn block_dims(&self) -> Vec<usize>;

    /// Gradient and Hessian with respect to block `k`, evaluated at `theta`.
    fn grad_hessian(&self, theta: &[DVector<f64>], k: usize) -> Result<(DVector<f64>, Self::Precision)>;
}

/// A Gaussian factor held as mean and precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FfvbBlock<P> {
    pub mean: DVector<f64>,
    pub precision: P,
}

struct BlockState<P: PrecisionMatrix> {
    t: DVector<f64>,
    g: DVector<f64>,
    gamma: P,
    t_bar: DVector<f64>,
    g_bar: DVector<f64>,
    gamma_bar: P,
    mean: DVector<f64>,
    factor: P::Factor,
}

fn at_iteration(e: Error, iteration: usize, block: usize) -> Error {
    match e {
        Error::Decomposition { context, index } => Error::Decomposition {
            context: format!("ffvb iteration {iteration}, block {block}: {context}"),
            index,
        },
        other => other.with_context(format!("ffvb iteration {iteration}, block {block}")),
    }
}

fn check_config(n: usize) -> Result<()> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::Config(format!(
            "number of iterations N must be even and >= 2, got {n}"
        )));
    }
    Ok(())
}

/// Runs the optimizer with standard-normal draws from `rng`.
pub fn ffvb_fit<T: BlockTarget, R: Rng + ?Sized>(
    target: &T,
    init: Vec<FfvbBlock<T::Precision>>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<FfvbBlock<T::Precision>>> {
    ffvb_fit_with_draws(target, init, n, |_, d| standard_normal_vec(rng, d))
}

/// Runs the optimizer with caller-supplied standard-normal vectors:
/// `draw(k, dim_k)` is called once per block per iteration, blocks in order.
pub fn ffvb_fit_with_draws<T, F>(
    target: &T,
    init: Vec<FfvbBlock<T::Precision>>,
    n: usize,
    mut draw: F,
) -> Result<Vec<FfvbBlock<T::Precision>>>
where
    T: BlockTarget,
    F: FnMut(usize, usize) -> DVector<f64>,
{
    check_config(n)?;
    let dims = target.block_dims();
    if init.len() != dims.len() {
        return Err(Error::Dimension(format!(
            "{} initial factors for {} blocks",
            init.len(),
            dims.len()
        )));
    }
    let c = 1.0 / (n as f64).sqrt();
    let avg = 2.0 / n as f64;

    let mut states = Vec::with_capacity(dims.len());
    for (k, (blk, &d)) in init.into_iter().zip(&dims).enumerate() {
        if blk.mean.len() != d || blk.precision.dim() != d {
            return Err(Error::Dimension(format!("initial factor {k} does not have dim {d}")));
        }
        let factor = blk.precision.factor().map_err(|e| at_iteration(e, 0, k))?;
        states.push(BlockState {
            t: blk.mean.clone(),
            g: DVector::zeros(d),
            gamma_bar: blk.precision.zeros_like(),
            gamma: blk.precision,
            t_bar: DVector::zeros(d),
            g_bar: DVector::zeros(d),
            mean: blk.mean,
            factor,
        });
    }

    for i in 1..=n {
        let theta: Vec<DVector<f64>> = states
            .iter()
            .enumerate()
            .map(|(k, s)| &s.mean + s.factor.whiten_inverse(&draw(k, dims[k])))
            .collect();
        for (k, s) in states.iter_mut().enumerate() {
            s.factor = s.gamma.factor().map_err(|e| at_iteration(e, i, k))?;
            s.mean = s.factor.solve(&s.g) + &s.t;

            let (grad, hess) = target.grad_hessian(&theta, k).map_err(|e| at_iteration(e, i, k))?;
            if grad.len() != dims[k] || hess.dim() != dims[k] {
                return Err(Error::Dimension(format!(
                    "target returned wrong-sized derivatives for block {k}"
                )));
            }
            let asym = hess.max_asymmetry();
            if asym > HESSIAN_SYMMETRY_TOL {
                return Err(Error::InvalidInput(format!(
                    "Hessian for block {k} not symmetric (max asymmetry {asym:e})"
                )));
            }

            s.g = &s.g * (1.0 - c) + &grad * c;
            s.gamma.scale_add(1.0 - c, &hess, -c);
            s.t = &s.t * (1.0 - c) + &theta[k] * c;
            if 2 * i > n {
                s.g_bar += &grad * avg;
                s.gamma_bar.scale_add(1.0, &hess, -avg);
                s.t_bar += &theta[k] * avg;
            }
        }
    }

    states
        .into_iter()
        .enumerate()
        .map(|(k, s)| {
            let f = s.gamma_bar.factor().map_err(|e| at_iteration(e, n + 1, k))?;
            Ok(FfvbBlock {
                mean: f.solve(&s.g_bar) + &s.t_bar,
                precision: s.gamma_bar,
            })
        })
        .collect()
}

/// Dense target built from a closure `(θ, k) → (g, H)`.
pub struct DenseOracle<F> {
    dims: Vec<usize>,
    eval: F,
}

impl<F> DenseOracle<F>
where
    F: Fn(&[DVector<f64>], usize) -> (DVector<f64>, DMatrix<f64>),
{
    pub fn new(dims: Vec<usize>, eval: F) -> Self {
        Self { dims, eval }
    }
}

impl<F> BlockTarget for DenseOracle<F>
where
    F: Fn(&[DVector<f64>], usize) -> (DVector<f64>, DMatrix<f64>),
{
    type Precision = DMatrix<f64>;

    fn block_dims(&self) -> Vec<usize> {
        self.dims.clone()
    }

    fn grad_hessian(&self, theta: &[DVector<f64>], k: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((self.eval)(theta, k))
    }
}

/// Moment-form convenience wrapper: `init` as Gaussian factors (default
/// `N(0, I)` per block when `None`), result as Gaussian factors.
pub fn ffvb_fit_gaussian<T, R>(
    target: &T,
    init: Option<&[GaussianFactor]>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<GaussianFactor>>
where
    T: BlockTarget<Precision = DMatrix<f64>>,
    R: Rng + ?Sized,
{
    let blocks = dense_init(target, init)?;
    let out = ffvb_fit(target, blocks, n, rng)?;
    to_gaussians(out)
}

pub(crate) fn dense_init<T>(target: &T, init: Option<&[GaussianFactor]>) -> Result<Vec<FfvbBlock<DMatrix<f64>>>>
where
    T: BlockTarget<Precision = DMatrix<f64>>,
{
    match init {
        Some(fs) => fs
            .iter()
            .map(|f| {
                let (_, precision) = f.natural()?;
                Ok(FfvbBlock {
                    mean: f.mean().clone(),
                    precision,
                })
            })
            .collect(),
        None => Ok(target
            .block_dims()
            .into_iter()
            .map(|d| FfvbBlock {
                mean: DVector::zeros(d),
                precision: DMatrix::identity(d, d),
            })
            .collect()),
    }
}

pub(crate) fn to_gaussians(blocks: Vec<FfvbBlock<DMatrix<f64>>>) -> Result<Vec<GaussianFactor>> {
    blocks
        .into_iter()
        .map(|b| {
            let cov = Cholesky::try_new(&b.precision, "final precision")?.inverse();
            GaussianFactor::new(b.mean, cov)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn quadratic_1d(m0: f64, v0: f64) -> DenseOracle<impl Fn(&[DVector<f64>], usize) -> (DVector<f64>, DMatrix<f64>)> {
        DenseOracle::new(vec![1], move |th: &[DVector<f64>], _| {
            (
                DVector::from_element(1, -(th[0][0] - m0) / v0),
                DMatrix::from_element(1, 1, -1.0 / v0),
            )
        })
    }

    #[test]
    fn odd_iteration_count_is_rejected() {
        let t = quadratic_1d(0.0, 1.0);
        let r = ffvb_fit_gaussian(&t, None, 7, &mut rng_from_seed(1));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn quadratic_target_is_recovered_exactly() {
        let t = quadratic_1d(1.5, 0.3);
        for seed in 0..5 {
            let out = ffvb_fit_gaussian(&t, None, 10, &mut rng_from_seed(seed)).unwrap();
            assert!((out[0].mean()[0] - 1.5).abs() < 1e-10);
            assert!((out[0].covariance()[(0, 0)] - 0.3).abs() < 1e-10);
        }
    }

    #[test]
    fn indefinite_hessian_reports_iteration() {
        // Positive curvature drives Γ negative after a few steps.
        let t = DenseOracle::new(vec![1], |_: &[DVector<f64>], _| {
            (DVector::zeros(1), DMatrix::from_element(1, 1, 50.0))
        });
        match ffvb_fit_gaussian(&t, None, 100, &mut rng_from_seed(0)) {
            Err(Error::Decomposition { context, .. }) => assert!(context.contains("iteration")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
