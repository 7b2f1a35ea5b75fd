use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Response family with its canonical link. The scale `φ` is 1 for both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Bernoulli,
    Poisson,
}

/// Logistic function, evaluated without overflow.
#[inline]
pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^η)`, evaluated without overflow.
#[inline]
pub fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

impl Family {
    pub fn phi(self) -> f64 {
        1.0
    }

    /// Cumulant `b(η)`.
    #[inline]
    pub fn cumulant(self, eta: f64) -> f64 {
        match self {
            Family::Bernoulli => softplus(eta),
            Family::Poisson => eta.exp(),
        }
    }

    /// Mean `ḃ(η)`.
    #[inline]
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Family::Bernoulli => sigmoid(eta),
            Family::Poisson => eta.exp(),
        }
    }

    /// Variance function `b̈(η)`.
    #[inline]
    pub fn variance(self, eta: f64) -> f64 {
        match self {
            // ḃ(η)(1 − ḃ(η)) = σ(η)σ(−η) keeps full relative precision in both tails.
            Family::Bernoulli => sigmoid(eta) * sigmoid(-eta),
            Family::Poisson => eta.exp(),
        }
    }

    /// `c(y, φ)`: 0 for Bernoulli, `−log y!` for Poisson.
    pub fn log_base_measure(self, y: f64) -> f64 {
        match self {
            Family::Bernoulli => 0.0,
            Family::Poisson => -ln_gamma(y + 1.0),
        }
    }

    /// `log f(y | η)`.
    #[inline]
    pub fn log_density(self, y: f64, eta: f64) -> f64 {
        (y * eta - self.cumulant(eta)) / self.phi() + self.log_base_measure(y)
    }

    pub fn is_valid_response(self, y: f64) -> bool {
        match self {
            Family::Bernoulli => y == 0.0 || y == 1.0,
            Family::Poisson => y >= 0.0 && y.is_finite() && y.fract() == 0.0,
        }
    }

    pub fn canonical_link(self) -> &'static str {
        match self {
            Family::Bernoulli => "logit",
            Family::Poisson => "log",
        }
    }

    /// Parses a family and optional link name. Only canonical links are accepted.
    pub fn with_link(family: &str, link: Option<&str>) -> Result<Self> {
        let fam: Family = family.parse()?;
        match link {
            None => Ok(fam),
            Some(l) if l.eq_ignore_ascii_case(fam.canonical_link()) || l == "canonical" => Ok(fam),
            Some(l) => Err(Error::InvalidInput(format!(
                "link '{l}' is not canonical for {fam}; only '{}' is supported",
                fam.canonical_link()
            ))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bernoulli" | "binomial" | "logistic" => Ok(Family::Bernoulli),
            "poisson" => Ok(Family::Poisson),
            other => Err(Error::InvalidInput(format!("unknown family '{other}'"))),
        }
    }
}

/// Componentwise `(b(η), ḃ(η), b̈(η))`.
pub fn family_links(family: Family, eta: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if let Some(i) = eta.iter().position(|e| e.is_nan()) {
        return Err(Error::InvalidInput(format!("linear predictor {i} is NaN")));
    }
    Ok((
        eta.iter().map(|&e| family.cumulant(e)).collect(),
        eta.iter().map(|&e| family.mean(e)).collect(),
        eta.iter().map(|&e| family.variance(e)).collect(),
    ))
}
