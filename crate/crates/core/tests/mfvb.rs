use glmm_vb::mfvb::{mfvb_fit, FitConfig};
use glmm_vb::{generate, run_chain, ChainConfig, SimDesign, SimKind};

fn simulated_model(kind: SimKind, m: usize, seed: u64) -> glmm_vb::GlmmModel {
    let design = SimDesign::new(kind, m, seed);
    let data = generate(&design).unwrap();
    let (fixed, random) = design.true_columns();
    data.model(kind.family(), &fixed, &random, None).unwrap()
}

#[test]
fn logistic_fit_covers_truth() {
    let model = simulated_model(SimKind::LogisticIntercept, 200, 101);
    let fit = mfvb_fit(&model, &FitConfig::with_seed(5)).unwrap();
    let mean = fit.beta_marginal.mean();
    let cov = fit.beta_marginal.covariance();
    for (k, truth) in [-1.5, 2.5].into_iter().enumerate() {
        let sd = cov[(k, k)].sqrt();
        assert!((mean[k] - truth).abs() < 3.0 * sd, "beta{} = {} ± {sd}", k + 1, mean[k]);
    }
    assert!(fit.converged);
}

#[test]
fn same_seed_gives_identical_fit() {
    let model = simulated_model(SimKind::PoissonIntercept, 60, 102);
    let a = mfvb_fit(&model, &FitConfig::with_seed(9)).unwrap();
    let b = mfvb_fit(&model, &FitConfig::with_seed(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn stopping_delta_decreases_after_third_iteration() {
    let model = simulated_model(SimKind::LogisticIntercept, 200, 103);
    let fit = mfvb_fit(&model, &FitConfig::with_seed(1)).unwrap();
    // delta_trace[k] belongs to outer iteration k + 2.
    let tail = &fit.delta_trace[1..];
    assert!(tail.len() >= 2);
    for w in tail.windows(2) {
        assert!(w[1] <= w[0], "delta rose: {:?}", fit.delta_trace);
    }
    assert_eq!(fit.delta_trace.len() + 1, fit.iterations_used);
}

#[test]
fn wishart_factor_has_conjugate_dof_and_spd_scale() {
    let model = simulated_model(SimKind::LogisticModelSelect, 80, 104);
    let model = {
        // Two random-effect columns exercise the matrix case.
        let design = SimDesign::new(SimKind::LogisticModelSelect, 80, 104);
        let data = generate(&design).unwrap();
        drop(model);
        data.model(design.kind.family(), &[0, 1], &[0, 1], None).unwrap()
    };
    let fit = mfvb_fit(&model, &FitConfig::with_seed(2)).unwrap();
    assert_eq!(fit.q_q.nu(), 3.0 + 80.0);
    let s = fit.q_q.scale();
    assert!((s - s.transpose()).amax() == 0.0);
    assert!(s.clone().cholesky().is_some());
}

#[test]
fn marginal_blocks_match_dense_inverse() {
    let model = simulated_model(SimKind::PoissonIntercept, 12, 105);
    let fit = mfvb_fit(&model, &FitConfig::with_seed(3)).unwrap();
    let inv = fit.q_alpha_precision.to_dense().cholesky().unwrap().inverse();
    let (p, u) = (fit.p(), fit.u());
    assert!((fit.beta_marginal.covariance() - inv.view((0, 0), (p, p))).amax() < 1e-9);
    for (i, s) in fit.per_subject.iter().enumerate() {
        let o = p + i * u;
        assert!((&s.sigma_b - inv.view((o, o), (u, u))).amax() < 1e-9);
        assert!((&s.cross_cov_beta_b - inv.view((0, o), (p, u))).amax() < 1e-9);
        assert_eq!(s.mu_b[0], fit.q_alpha_mu[o]);
    }
}

#[test]
fn invalid_config_is_rejected() {
    let model = simulated_model(SimKind::PoissonIntercept, 5, 106);
    let cfg = FitConfig {
        inner_iterations: 7,
        ..FitConfig::default()
    };
    assert!(mfvb_fit(&model, &cfg).is_err());
}

#[test]
fn small_poisson_fit_agrees_with_reference_chain() {
    let model = simulated_model(SimKind::PoissonIntercept, 40, 107);
    let fit = mfvb_fit(&model, &FitConfig::with_seed(4)).unwrap();
    let chain = run_chain(
        &model,
        &ChainConfig {
            n_iter: 4000,
            burnin: 4000,
            is_samples: 10,
            seed: 4,
        },
    )
    .unwrap();
    let summary = chain.summary().unwrap();
    let cov = fit.beta_marginal.covariance();
    for k in 0..2 {
        let (vm, vs) = (fit.beta_marginal.mean()[k], cov[(k, k)].sqrt());
        let (cm, cs) = (summary.mean[k], summary.sd[k]);
        assert!((vm - cm).abs() < 3.0 * (vs * vs + cs * cs).sqrt(), "beta{}: vb {vm}±{vs} mcmc {cm}±{cs}", k + 1);
    }
}
