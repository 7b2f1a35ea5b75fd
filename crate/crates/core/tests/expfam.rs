mod common;

use common::{random_spd, random_vec, rng};
use glmm_vb::expfam::{combine_gaussians, combine_wisharts, GaussianFactor, WishartFactor};
use glmm_vb::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn g1(mu: f64, var: f64) -> GaussianFactor {
    GaussianFactor::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, var)).unwrap()
}

/// Multiplies the 1-D densities on a 10⁶-point grid over [−10, 10] and
/// returns (argmax, variance) of the normalized product.
fn grid_product(pieces: &[GaussianFactor], prior: &GaussianFactor) -> (f64, f64) {
    let n = 1_000_000;
    let h = 20.0 / (n - 1) as f64;
    let m = pieces.len() as f64;
    let logf: Vec<f64> = (0..n)
        .map(|k| {
            let x = DVector::from_element(1, -10.0 + h * k as f64);
            pieces.iter().map(|p| p.log_density(&x).unwrap()).sum::<f64>() - (m - 1.0) * prior.log_density(&x).unwrap()
        })
        .collect();
    let mx = logf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logf.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = w.iter().sum();
    let argmax = (0..n).max_by(|&a, &b| logf[a].partial_cmp(&logf[b]).unwrap()).unwrap();
    let xs = |k: usize| -10.0 + h * k as f64;
    let mean: f64 = (0..n).map(|k| w[k] * xs(k)).sum::<f64>() / z;
    let var: f64 = (0..n).map(|k| w[k] * (xs(k) - mean).powi(2)).sum::<f64>() / z;
    (xs(argmax), var)
}

#[test]
fn natural_parameters_of_trivial_factors() {
    let (h, p) = g1(0.0, 1.0).natural().unwrap();
    assert_eq!((h[0], p[(0, 0)]), (0.0, 1.0));
    let (h, p) = g1(2.0, 4.0).natural().unwrap();
    assert_eq!((h[0], p[(0, 0)]), (0.5, 0.25));
}

#[test]
fn natural_round_trip_random_3x3() {
    let mut r = rng(11);
    for _ in 0..20 {
        let sigma = random_spd(&mut r, 3);
        let mu = random_vec(&mut r, 3);
        let f = GaussianFactor::new(mu.clone(), sigma.clone()).unwrap();
        let (h, p) = f.natural().unwrap();
        // Oracle: direct dense inversion.
        let p_dense = sigma.clone().try_inverse().unwrap();
        assert!((&p - &p_dense).amax() / p_dense.amax() < 1e-10);
        let back = GaussianFactor::from_natural(&h, &p).unwrap();
        assert!((back.mean() - &mu).amax() / mu.amax() < 1e-10);
        assert!((back.covariance() - &sigma).amax() / sigma.amax() < 1e-10);
    }
}

#[test]
fn non_pd_covariance_names_pivot() {
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    match GaussianFactor::new(DVector::zeros(2), sigma) {
        Err(Error::Decomposition { index, .. }) => assert_eq!(index, 1),
        other => panic!("expected decomposition error, got {other:?}"),
    }
}

#[test]
fn two_pieces_match_grid_product() {
    let pieces = [g1(1.0, 1.0), g1(3.0, 1.0)];
    let prior = g1(0.0, 100.0);
    let c = combine_gaussians(&pieces, &prior).unwrap();
    assert!((1.0 / c.covariance()[(0, 0)] - 1.99).abs() < 1e-12);
    assert!((c.mean()[0] - 4.0 / 1.99).abs() < 1e-12);
    let (argmax, var) = grid_product(&pieces, &prior);
    assert!((argmax - c.mean()[0]).abs() < 2e-5);
    assert!((var - c.covariance()[(0, 0)]).abs() < 1e-6);
}

#[test]
fn single_piece_is_returned_unchanged() {
    let mut r = rng(2);
    let piece = GaussianFactor::new(random_vec(&mut r, 2), random_spd(&mut r, 2)).unwrap();
    let prior = GaussianFactor::new(random_vec(&mut r, 2), random_spd(&mut r, 2)).unwrap();
    assert_eq!(combine_gaussians(std::slice::from_ref(&piece), &prior).unwrap(), piece);
    let w = WishartFactor::new(4.0, random_spd(&mut r, 2)).unwrap();
    let w0 = WishartFactor::new(3.0, random_spd(&mut r, 2)).unwrap();
    assert_eq!(combine_wisharts(std::slice::from_ref(&w), &w0).unwrap(), w);
}

#[test]
fn symmetric_pieces_keep_common_centre() {
    let c = combine_gaussians(&[g1(0.7, 2.0), g1(0.7, 2.0)], &g1(0.7, 5.0)).unwrap();
    assert!((c.mean()[0] - 0.7).abs() < 1e-14);
}

#[test]
fn scalar_wishart_arithmetic() {
    let s = |nu: f64, v: f64| WishartFactor::new(nu, DMatrix::from_element(1, 1, v)).unwrap();
    let c = combine_wisharts(&[s(5.0, 2.0), s(5.0, 2.0)], &s(3.0, 10.0)).unwrap();
    assert_eq!(c.nu(), 7.0);
    assert!((c.scale()[(0, 0)] - 1.0 / 0.9).abs() < 1e-12);
}

#[test]
fn overdispersed_pieces_fail_to_recombine() {
    let c = combine_gaussians(&[g1(0.0, 100.0), g1(0.0, 100.0), g1(0.0, 100.0)], &g1(0.0, 10.0));
    assert!(matches!(c, Err(Error::Recombination(_))));
}

/// log q_combined − [Σ log q_j − (M−1) log q_prior] over evaluation points.
fn gaussian_spread<R: rand::Rng>(r: &mut R, pieces: &[GaussianFactor], prior: &GaussianFactor, c: &GaussianFactor) -> f64 {
    let m = pieces.len() as f64;
    let d = prior.dim();
    let diffs: Vec<f64> = (0..100)
        .map(|_| {
            let x = c.mean() + random_vec(r, d) * 2.0;
            c.log_density(&x).unwrap()
                - (pieces.iter().map(|p| p.log_density(&x).unwrap()).sum::<f64>()
                    - (m - 1.0) * prior.log_density(&x).unwrap())
        })
        .collect();
    diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - diffs.iter().copied().fold(f64::INFINITY, f64::min)
}

fn wishart_spread<R: rand::Rng>(r: &mut R, pieces: &[WishartFactor], prior: &WishartFactor, c: &WishartFactor) -> f64 {
    let m = pieces.len() as f64;
    let diffs: Vec<f64> = (0..100)
        .map(|_| {
            let q = random_spd(r, prior.dim());
            c.log_density(&q).unwrap()
                - (pieces.iter().map(|p| p.log_density(&q).unwrap()).sum::<f64>()
                    - (m - 1.0) * prior.log_density(&q).unwrap())
        })
        .collect();
    diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - diffs.iter().copied().fold(f64::INFINITY, f64::min)
}

#[test]
fn wishart_log_density_difference_is_constant_dim2() {
    let mut r = rng(5);
    let prior = WishartFactor::new(3.0, DMatrix::identity(2, 2) * 10.0).unwrap();
    let pieces: Vec<WishartFactor> = (0..3)
        .map(|_| WishartFactor::new(20.0 + 5.0 * r.random::<f64>(), random_spd(&mut r, 2) * 0.05).unwrap())
        .collect();
    let c = combine_wisharts(&pieces, &prior).unwrap();
    assert!(wishart_spread(&mut r, &pieces, &prior, &c) < 1e-8);
}

#[test]
fn permutation_invariance() {
    let mut r = rng(8);
    let prior = GaussianFactor::new(DVector::zeros(3), DMatrix::identity(3, 3) * 50.0).unwrap();
    let pieces: Vec<GaussianFactor> = (0..4)
        .map(|_| GaussianFactor::new(random_vec(&mut r, 3), random_spd(&mut r, 3) * 0.1).unwrap())
        .collect();
    let a = combine_gaussians(&pieces, &prior).unwrap();
    let mut rev = pieces.clone();
    rev.reverse();
    let b = combine_gaussians(&rev, &prior).unwrap();
    assert!((a.mean() - b.mean()).amax() < 1e-12);
    assert!((a.covariance() - b.covariance()).amax() < 1e-12);
}

#[test]
fn incremental_combination_matches_batch() {
    let mut r = rng(9);
    let prior = GaussianFactor::new(DVector::zeros(2), DMatrix::identity(2, 2) * 20.0).unwrap();
    let pieces: Vec<GaussianFactor> = (0..4)
        .map(|_| GaussianFactor::new(random_vec(&mut r, 2), random_spd(&mut r, 2) * 0.2).unwrap())
        .collect();
    let batch = combine_gaussians(&pieces, &prior).unwrap();
    let mut acc = pieces[0].clone();
    for p in &pieces[1..] {
        acc = combine_gaussians(&[acc, p.clone()], &prior).unwrap();
    }
    assert!((acc.mean() - batch.mean()).amax() < 1e-10);
    assert!((acc.covariance() - batch.covariance()).amax() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn gaussian_natural_additivity(seed in any::<u64>(), m in 1usize..6, d in 1usize..4) {
        let mut r = rng(seed);
        let prior = GaussianFactor::new(random_vec(&mut r, d), random_spd(&mut r, d) * 30.0).unwrap();
        let pieces: Vec<GaussianFactor> = (0..m)
            .map(|_| GaussianFactor::new(random_vec(&mut r, d), random_spd(&mut r, d) * 0.1).unwrap())
            .collect();
        let c = combine_gaussians(&pieces, &prior).unwrap();
        prop_assert!(gaussian_spread(&mut r, &pieces, &prior, &c) < 1e-8);
    }

    #[test]
    fn wishart_natural_additivity(seed in any::<u64>(), m in 1usize..6, d in 1usize..4) {
        let mut r = rng(seed);
        let prior = WishartFactor::new(d as f64 + 1.0, DMatrix::identity(d, d) * 10.0).unwrap();
        let pieces: Vec<WishartFactor> = (0..m)
            .map(|_| WishartFactor::new(d as f64 + 10.0 + 10.0 * r.random::<f64>(), random_spd(&mut r, d) * 0.05).unwrap())
            .collect();
        let c = combine_wisharts(&pieces, &prior).unwrap();
        prop_assert!(wishart_spread(&mut r, &pieces, &prior, &c) < 1e-8);
    }
}
