#![allow(dead_code)]

use glmm_vb::glmm::{Family, GlmmModel, Prior, Subject};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_spd<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| normal(rng));
    &a * a.transpose() + DMatrix::identity(d, d) * (0.5 + d as f64 * 0.1)
}

pub fn random_vec<R: Rng>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| normal(rng))
}

fn draw_response<R: Rng>(rng: &mut R, family: Family, eta: f64) -> f64 {
    match family {
        Family::Bernoulli => f64::from(u8::from(rng.random::<f64>() < glmm_vb::glmm::sigmoid(eta))),
        Family::Poisson => Poisson::new(eta.exp().clamp(1e-8, 1e6)).unwrap().sample(rng),
    }
}

/// Random subject whose first x and z columns are intercepts.
pub fn random_subject<R: Rng>(rng: &mut R, id: &str, family: Family, n: usize, p: usize, u: usize) -> Subject {
    let x = DMatrix::from_fn(n, p, |_, c| if c == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let z = DMatrix::from_fn(n, u, |_, c| if c == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let beta = DVector::from_fn(p, |k, _| if k == 0 { -0.3 } else { 0.5 });
    let b = DVector::from_fn(u, |_, _| 0.6 * normal(rng));
    let eta = &x * &beta + &z * &b;
    let y = DVector::from_fn(n, |j, _| draw_response(rng, family, eta[j]));
    Subject {
        id: id.to_string(),
        y,
        x,
        z,
        offset: DVector::zeros(n),
    }
}

pub fn random_model<R: Rng>(rng: &mut R, family: Family, m: usize, n: usize, p: usize, u: usize) -> GlmmModel {
    let subjects = (0..m).map(|i| random_subject(rng, &format!("s{i}"), family, n, p, u)).collect();
    GlmmModel::new(family, p, u, subjects, Prior::default_for(p, u, 1000.0)).unwrap()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Log integrand `log f(y | β, b) + log N(b; 0, 1/q)` for a u = 1 subject.
pub fn log_integrand_1d(s: &Subject, family: Family, beta: &DVector<f64>, q: f64, b: f64) -> f64 {
    let eta = &s.x * beta + &s.offset;
    let ll: f64 = (0..s.n()).map(|j| family.log_density(s.y[j], eta[j] + s.z[(j, 0)] * b)).sum();
    ll + 0.5 * q.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * q * b * b
}

/// Trapezoid rule in log space on `points` nodes over `[lo, hi]`.
pub fn log_trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> f64 {
    let h = (hi - lo) / (points - 1) as f64;
    let vals: Vec<f64> = (0..points)
        .map(|k| {
            let w: f64 = if k == 0 || k + 1 == points { 0.5 } else { 1.0 };
            f(lo + h * k as f64) + w.ln()
        })
        .collect();
    log_sum_exp(&vals) + h.ln()
}

/// Quadrature oracle for a u = 1 subject's log marginal likelihood: trapezoid
/// rule on 2·10⁵ points over ±(12 prior SDs + 12).
pub fn quadrature_log_marginal(s: &Subject, family: Family, beta: &DVector<f64>, q: f64) -> f64 {
    let half = 12.0 / q.sqrt() + 12.0;
    log_trapezoid(|b| log_integrand_1d(s, family, beta, q, b), -half, half, 200_001)
}

/// Gauss–Hermite nodes and weights for `∫ e^{−x²} f(x) dx` (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let j = DMatrix::from_fn(n, n, |r, c| {
        if r + 1 == c || c + 1 == r {
            (r.max(c) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(j);
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], sqrt_pi * eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// Adaptive Gauss–Hermite oracle: centre and scale from the integrand's mode
/// (found by bisection on a numerical derivative) and curvature.
pub fn adaptive_gh_log_marginal(s: &Subject, family: Family, beta: &DVector<f64>, q: f64, n: usize) -> f64 {
    let f = |b: f64| log_integrand_1d(s, family, beta, q, b);
    let d = |b: f64| (f(b + 1e-6) - f(b - 1e-6)) / 2e-6;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if d(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mode = 0.5 * (lo + hi);
    let h = 1e-4;
    let curv = -(f(mode + h) - 2.0 * f(mode) + f(mode - h)) / (h * h);
    let scale = (2.0 / curv).sqrt();
    let (x, w) = gauss_hermite(n);
    let terms: Vec<f64> = x
        .iter()
        .zip(&w)
        .map(|(&xi, &wi)| wi.ln() + xi * xi + f(mode + scale * xi))
        .collect();
    log_sum_exp(&terms) + scale.ln()
}
