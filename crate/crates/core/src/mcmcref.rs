//! Pseudo-marginal adaptive random-walk Metropolis–Hastings on `(β, θ_Q)`.
//!
//! Random effects are integrated out by importance sampling: each subject's
//! likelihood is estimated from `S` draws of a Gaussian proposal centred at
//! the mode of its integrand with the inverse negative Hessian as covariance.
//! `Q = exp(Σ)` with `θ_Q = vech(Σ)`, so every state maps to an SPD `Q`.
//!
//! Adaptation: the first 1000 proposals use covariance `0.1²/d · I`; after
//! that `2.38²/d · (C + 1e-10 I)` with `C` the sample covariance of every
//! past state. The likelihood estimate of the current state is stored and
//! reused until a proposal is accepted.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glmm::GlmmModel;
use crate::laplace::{find_mode, SubjectIntegrand};
use crate::linalg::{max_asymmetry, unvech, vech, Cholesky};
use crate::rng::{rng_from_seed, standard_normal_vec};

pub const ADAPT_START: usize = 1000;
const ADAPT_SCALE: f64 = 2.38;
const ADAPT_JITTER: f64 = 1e-10;
const INITIAL_SD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burnin: usize,
    pub is_samples: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iter: 20_000,
            burnin: 20_000,
            is_samples: 10,
            seed: 0,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 || self.burnin == 0 || self.is_samples == 0 {
            return Err(Error::Config("n_iter, burnin and is_samples must all be positive".into()));
        }
        Ok(())
    }
}

fn u_from_vech_len(len: usize) -> Result<usize> {
    let mut u = 0;
    while u * (u + 1) / 2 < len {
        u += 1;
    }
    if u * (u + 1) / 2 != len || u == 0 {
        return Err(Error::Dimension(format!("{len} is not a triangular number")));
    }
    Ok(u)
}

/// `Q = exp(Σ)` where `Σ` is the symmetric matrix with lower triangle `θ_Q`.
pub fn theta_to_q(theta: &[f64]) -> Result<DMatrix<f64>> {
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("theta_Q must be finite".into()));
    }
    let u = u_from_vech_len(theta.len())?;
    let eig = SymmetricEigen::new(unvech(theta, u));
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::exp));
    let q = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    Ok((&q + q.transpose()) * 0.5)
}

/// Inverse of [`theta_to_q`] via the symmetric matrix logarithm.
pub fn q_to_theta(q: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !q.is_square() || max_asymmetry(q) > 1e-10 * (1.0 + q.amax()) {
        return Err(Error::InvalidInput("Q must be a symmetric matrix".into()));
    }
    let eig = SymmetricEigen::new(q.clone());
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidInput("Q must be positive definite".into()));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::ln));
    let s = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    Ok(vech(&((&s + s.transpose()) * 0.5)))
}

/// `ln((e^a − e^b)/(a − b))`, continuous at `a = b`.
fn ln_exp_divided_difference(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    let d = hi - lo;
    if d < 1e-12 {
        lo + (1.0 + 0.5 * d).ln()
    } else {
        lo + (d.exp_m1() / d).ln()
    }
}

/// `log |∂ vech(Q) / ∂ θ_Q|` for `Q = exp(Σ)`: eigenvalues `λ` of `Σ` give
/// `Σ_i λ_i + Σ_{i<j} ln((e^{λ_i} − e^{λ_j}) / (λ_i − λ_j))`.
pub fn log_jacobian(theta: &[f64]) -> Result<f64> {
    let u = u_from_vech_len(theta.len())?;
    let lam = SymmetricEigen::new(unvech(theta, u)).eigenvalues;
    let mut total: f64 = lam.iter().sum();
    for i in 0..u {
        for j in 0..i {
            total += ln_exp_divided_difference(lam[i], lam[j]);
        }
    }
    Ok(total)
}

/// Log prior density of `(β, θ_Q)`: Gaussian on `β`, Wishart on `Q`
/// transported to `θ_Q`.
pub fn log_prior(model: &GlmmModel, beta: &DVector<f64>, theta: &[f64]) -> Result<f64> {
    let prior = model.prior();
    let q = theta_to_q(theta)?;
    Ok(prior.beta_factor()?.log_density(beta)? + prior.q_factor()?.log_density(&q)? + log_jacobian(theta)?)
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + (v.iter().map(|x| (x - mx).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Importance-sampling estimate of `log p(y | β, Q)`: the sum over subjects
/// of the log of the average of `S` importance weights.
pub fn is_loglik<R: Rng + ?Sized>(
    model: &GlmmModel,
    beta: &DVector<f64>,
    q: &DMatrix<f64>,
    s: usize,
    rng: &mut R,
) -> Result<f64> {
    if s == 0 {
        return Err(Error::Config("importance sample size must be positive".into()));
    }
    let u = model.u();
    let half_u_ln2pi = 0.5 * u as f64 * (2.0 * PI).ln();
    let mut total = 0.0;
    let mut log_w = vec![0.0; s];
    for subject in model.subjects() {
        let integrand = SubjectIntegrand::new(subject, model.family(), beta, q)?;
        let mode = find_mode(&integrand)?;
        let half_logdet = 0.5 * mode.neg_hessian.log_det();
        for w in log_w.iter_mut() {
            let z = standard_normal_vec(rng, u);
            let b = &mode.b_hat + mode.neg_hessian.solve_upper(&z);
            let log_proposal = -half_u_ln2pi + half_logdet - 0.5 * z.norm_squared();
            *w = integrand.value(&b) - log_proposal;
        }
        total += log_mean_exp(&log_w);
    }
    Ok(total)
}

/// Maximizes `log p(y | β, b = 0) + log p(β)` by damped Newton; the chain's
/// starting `β`.
pub fn fixed_effects_mode(model: &GlmmModel) -> Result<DVector<f64>> {
    let family = model.family();
    let prior = model.prior();
    let prec = model.prior_beta_precision();
    let objective = |beta: &DVector<f64>| -> f64 {
        let zero = DVector::zeros(model.u());
        let ll: f64 = model.subjects().iter().map(|s| s.log_likelihood(family, beta, &zero)).sum();
        let d = beta - &prior.mu_beta0;
        ll - 0.5 * d.dot(&(prec * &d))
    };
    let mut beta = prior.mu_beta0.clone();
    let mut f = objective(&beta);
    for _ in 0..100 {
        let mut g = -(prec * (&beta - &prior.mu_beta0));
        let mut h = prec.clone();
        for s in model.subjects() {
            let eta = &s.x * &beta + &s.offset;
            for j in 0..s.n() {
                let r = s.y[j] - family.mean(eta[j]);
                let w = family.variance(eta[j]);
                let xj = s.x.row(j).transpose();
                g += &xj * r;
                h += &xj * xj.transpose() * w;
            }
        }
        if g.amax() < 1e-8 {
            return Ok(beta);
        }
        let step = Cholesky::try_new(&h, "fixed-effects Hessian")?.solve(&g);
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let fc = objective(&cand);
            if fc >= f - 1e-12 * (1.0 + f.abs()) {
                beta = cand;
                f = fc;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Ok(beta);
            }
        }
    }
    Ok(beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    pub p: usize,
    pub u: usize,
    /// Post-burn-in draws, each `(β, θ_Q)`.
    pub draws: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    /// Importance-sampled likelihood evaluations over the whole run.
    pub likelihood_evaluations: usize,
    pub warning: Option<String>,
    pub config: ChainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Posterior mean and SD of `vech(Q⁻¹)`, the random-effects covariance.
    pub q_inverse_mean: Vec<f64>,
    pub q_inverse_sd: Vec<f64>,
    pub acceptance_rate: f64,
    pub likelihood_evaluations: usize,
    pub warning: Option<String>,
    pub config: ChainConfig,
}

pub fn parameter_names(p: usize, u: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..=p).map(|k| format!("beta{k}")).collect();
    names.extend((1..=u * (u + 1) / 2).map(|k| format!("theta{k}")));
    names
}

fn mean_sd(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let sd = (0..d)
        .map(|k| (rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt())
        .collect();
    (mean, sd)
}

impl ChainResult {
    pub fn beta_draws(&self) -> impl Iterator<Item = &[f64]> {
        self.draws.iter().map(move |d| &d[..self.p])
    }

    /// `vech(Q⁻¹)` for every draw.
    pub fn q_inverse_draws(&self) -> Result<Vec<Vec<f64>>> {
        self.draws
            .iter()
            .map(|d| {
                let neg: Vec<f64> = d[self.p..].iter().map(|t| -t).collect();
                Ok(vech(&theta_to_q(&neg)?))
            })
            .collect()
    }

    pub fn summary(&self) -> Result<ChainSummary> {
        let (mean, sd) = mean_sd(&self.draws);
        let (q_inverse_mean, q_inverse_sd) = mean_sd(&self.q_inverse_draws()?);
        Ok(ChainSummary {
            names: parameter_names(self.p, self.u),
            mean,
            sd,
            q_inverse_mean,
            q_inverse_sd,
            acceptance_rate: self.acceptance_rate,
            likelihood_evaluations: self.likelihood_evaluations,
            warning: self.warning.clone(),
            config: self.config,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(parameter_names(self.p, self.u))?;
        for d in &self.draws {
            w.write_record(d.iter().map(|x| format!("{x:.16e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a chain CSV written by [`ChainResult::write_csv`]: header names and
/// one row per draw.
pub fn read_chain_csv<R: std::io::Read>(reader: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(
            rec.iter()
                .map(|s| s.trim().parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad chain value '{s}'"))))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((names, rows))
}

/// Running mean and scatter of past states.
struct Moments {
    n: f64,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self {
            n: 0.0,
            mean: DVector::zeros(d),
            scatter: DMatrix::zeros(d, d),
        }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.n += 1.0;
        let delta = x - &self.mean;
        self.mean += &delta / self.n;
        let delta2 = x - &self.mean;
        self.scatter += &delta * delta2.transpose();
    }

    fn covariance(&self) -> DMatrix<f64> {
        let c = &self.scatter / (self.n - 1.0);
        (&c + c.transpose()) * 0.5
    }
}

pub fn run_chain(model: &GlmmModel, config: &ChainConfig) -> Result<ChainResult> {
    config.validate()?;
    if model.m() == 0 {
        return Err(Error::EmptyData);
    }
    let (p, u) = (model.p(), model.u());
    let dq = u * (u + 1) / 2;
    let d = p + dq;
    let mut rng = rng_from_seed(config.seed);

    let split = |x: &DVector<f64>| (x.rows(0, p).into_owned(), x.as_slice()[p..].to_vec());
    let evaluate = |x: &DVector<f64>, rng: &mut _| -> Result<(f64, f64)> {
        let (beta, theta) = split(x);
        let lp = log_prior(model, &beta, &theta)?;
        if !lp.is_finite() {
            return Ok((lp, f64::NEG_INFINITY));
        }
        let ll = is_loglik(model, &beta, &theta_to_q(&theta)?, config.is_samples, rng)?;
        Ok((lp, ll))
    };

    let mut x = DVector::zeros(d);
    x.rows_mut(0, p).copy_from(&fixed_effects_mode(model)?);
    let (mut lp, mut ll) = evaluate(&x, &mut rng)?;
    let mut evaluations = 1;
    if !(lp + ll).is_finite() {
        return Err(Error::Numerical {
            subject: String::new(),
            message: "log posterior estimate at the starting state is not finite".into(),
        });
    }

    let fixed_chol = DMatrix::<f64>::identity(d, d) * (INITIAL_SD / (d as f64).sqrt());
    let mut moments = Moments::new(d);
    moments.push(&x);
    let total = config.burnin + config.n_iter;
    let mut draws = Vec::with_capacity(config.n_iter);
    let mut accepted_after_burnin = 0usize;

    for t in 0..total {
        let l = if t < ADAPT_START {
            fixed_chol.clone()
        } else {
            let mut c = moments.covariance();
            for k in 0..d {
                c[(k, k)] += ADAPT_JITTER;
            }
            c *= ADAPT_SCALE * ADAPT_SCALE / d as f64;
            match Cholesky::new(&c) {
                Ok(ch) => ch.l().clone(),
                Err(_) => fixed_chol.clone(),
            }
        };
        let z = standard_normal_vec(&mut rng, d);
        let cand = &x + l * z;
        let (lp_c, ll_c) = evaluate(&cand, &mut rng)?;
        if lp_c.is_finite() {
            evaluations += 1;
        }
        let log_ratio = lp_c + ll_c - lp - ll;
        let log_u = rng.random::<f64>().ln();
        if log_ratio.is_finite() && log_u < log_ratio {
            x = cand;
            lp = lp_c;
            ll = ll_c;
            if t >= config.burnin {
                accepted_after_burnin += 1;
            }
        }
        moments.push(&x);
        if t >= config.burnin {
            draws.push(x.iter().copied().collect());
        }
    }

    let acceptance_rate = accepted_after_burnin as f64 / config.n_iter as f64;
    let warning = (acceptance_rate < 0.01).then(|| {
        format!("acceptance rate {acceptance_rate:.4} after burn-in is below 1%; the chain may not have mixed")
    });
    Ok(ChainResult {
        p,
        u,
        draws,
        acceptance_rate,
        likelihood_evaluations: evaluations,
        warning,
        config: *config,
    })
}
