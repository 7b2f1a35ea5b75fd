//! Simulated random-intercept datasets.
//!
//! Subject `i` draws `b_i ~ N(0, σ²)` and then its observations in order,
//! all from one ChaCha20 stream seeded with `seed`.
//!
//! Columns: `x1 = 1`, `x2` the covariate with effect `β₁`, and for the
//! selection design a decoy `x3` and random slope decoy `z2`, both uniform on
//! `{−1, 0, 1}`. `z1 = 1` throughout.

use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glmm::{sigmoid, Dataset, Family, SubjectRecord};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimKind {
    /// `logit p_ij = β₀ + β₁ j/n_i + b_i`.
    LogisticIntercept,
    /// The logistic design plus decoy covariates `x3` and `z2`.
    LogisticModelSelect,
    /// `log λ_ij = β₀ + β₁ x_ij + b_i`, `x_ij ~ U(0, 1)`.
    PoissonIntercept,
}

impl SimKind {
    pub fn family(self) -> Family {
        match self {
            SimKind::PoissonIntercept => Family::Poisson,
            _ => Family::Bernoulli,
        }
    }
}

impl FromStr for SimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logistic" | "logistic-intercept" => Ok(SimKind::LogisticIntercept),
            "logistic-select" | "logistic-model-select" | "select" => Ok(SimKind::LogisticModelSelect),
            "poisson" | "poisson-intercept" => Ok(SimKind::PoissonIntercept),
            other => Err(Error::InvalidInput(format!(
                "unknown design '{other}'; expected logistic, logistic-select or poisson"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub kind: SimKind,
    pub m: usize,
    pub n_i: usize,
    pub beta: [f64; 2],
    pub sigma2: f64,
    pub seed: u64,
}

impl SimDesign {
    /// Logistic designs: `β = (−1.5, 2.5)`, `σ² = 1.5`, `n_i = 8`.
    /// Poisson: `β = (−1.5, 2.5)`, `σ² = 0.2`, `n_i = 5`.
    pub fn new(kind: SimKind, m: usize, seed: u64) -> Self {
        let (n_i, sigma2) = match kind {
            SimKind::PoissonIntercept => (5, 0.2),
            _ => (8, 1.5),
        };
        Self {
            kind,
            m,
            n_i,
            beta: [-1.5, 2.5],
            sigma2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.n_i < 1 {
            return Err(Error::Config("m and n_i must be at least 1".into()));
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::Config(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if !self.beta.iter().all(|b| b.is_finite()) {
            return Err(Error::Config("beta must be finite".into()));
        }
        Ok(())
    }

    /// 0-based fixed and random columns of the generating model.
    pub fn true_columns(&self) -> (Vec<usize>, Vec<usize>) {
        (vec![0, 1], vec![0])
    }

    /// Sidecar JSON with the design and true parameters.
    pub fn sidecar_json(&self) -> Result<String> {
        let (fixed, random) = self.true_columns();
        let v = serde_json::json!({
            "design": self,
            "family": self.kind.family(),
            "true_beta": self.beta,
            "true_sigma2": self.sigma2,
            "true_fixed_columns": fixed,
            "true_random_columns": random,
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

fn decoy<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(-1i32..=1) as f64
}

pub fn generate(design: &SimDesign) -> Result<Dataset> {
    design.validate()?;
    let mut rng = rng_from_seed(design.seed);
    let (n_x, n_z) = match design.kind {
        SimKind::LogisticModelSelect => (3, 2),
        _ => (2, 1),
    };
    let sd = design.sigma2.sqrt();
    let n = design.n_i;
    let mut subjects = Vec::with_capacity(design.m);
    for i in 0..design.m {
        let z0: f64 = rng.sample(StandardNormal);
        let b = sd * z0;
        let mut x = DMatrix::zeros(n, n_x);
        let mut z = DMatrix::zeros(n, n_z);
        let mut y = Vec::with_capacity(n);
        for j in 0..n {
            x[(j, 0)] = 1.0;
            z[(j, 0)] = 1.0;
            let cov = match design.kind {
                SimKind::PoissonIntercept => rng.random::<f64>(),
                _ => (j + 1) as f64 / n as f64,
            };
            x[(j, 1)] = cov;
            if design.kind == SimKind::LogisticModelSelect {
                x[(j, 2)] = decoy(&mut rng);
                z[(j, 1)] = decoy(&mut rng);
            }
            let eta = design.beta[0] + design.beta[1] * cov + b;
            let yj = match design.kind {
                SimKind::PoissonIntercept => Poisson::new(eta.exp())
                    .map_err(|e| Error::Numerical {
                        subject: format!("s{}", i + 1),
                        message: format!("Poisson rate: {e}"),
                    })?
                    .sample(&mut rng),
                _ => f64::from(u8::from(rng.random::<f64>() < sigmoid(eta))),
            };
            y.push(yj);
        }
        subjects.push(SubjectRecord {
            id: format!("s{}", i + 1),
            y,
            x,
            z,
            offset: None,
        });
    }
    Ok(Dataset {
        n_x,
        n_z,
        has_offset: false,
        subjects,
    })
}
