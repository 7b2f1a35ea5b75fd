//! JSON documents for fits and combined posteriors.
//!
//! Floats are written in scientific notation with 17 significant digits so a
//! read-back reproduces every value exactly. Matrices are flattened row-major.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{GaussianFactor, WishartFactor};
use crate::glmm::{Family, Prior};
use crate::linalg::{from_row_major, row_major};
use crate::mfvb::{VariationalFit, STOPPING_RULE};

pub(crate) mod sig17 {
    use serde::de::Deserialize;
    use serde::ser::{Error as _, Serialize, SerializeSeq};
    use serde::{Deserializer, Serializer};
    use serde_json::value::RawValue;

    pub fn format(x: f64) -> Option<String> {
        x.is_finite().then(|| format!("{x:.16e}"))
    }

    fn raw<S: Serializer>(x: f64) -> Result<Box<RawValue>, S::Error> {
        let s = format(x).ok_or_else(|| S::Error::custom(format!("non-finite value {x}")))?;
        RawValue::from_string(s).map_err(S::Error::custom)
    }

    pub mod scalar {
        use super::*;

        pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
            raw::<S>(*x)?.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
            f64::deserialize(d)
        }
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for &x in v {
                seq.serialize_element(&raw::<S>(x)?)?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<f64>::deserialize(d)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectDocument {
    pub subject_id: String,
    #[serde(with = "sig17::vec")]
    pub mu_b: Vec<f64>,
    #[serde(with = "sig17::vec")]
    pub sigma_b: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piece: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorDocument {
    #[serde(with = "sig17::vec")]
    pub mu_beta0: Vec<f64>,
    #[serde(with = "sig17::vec")]
    pub sigma_beta0: Vec<f64>,
    #[serde(with = "sig17::scalar")]
    pub nu0: f64,
    #[serde(rename = "S0", with = "sig17::vec")]
    pub s0: Vec<f64>,
}

impl PriorDocument {
    pub fn from_prior(prior: &Prior) -> Self {
        Self {
            mu_beta0: prior.mu_beta0.iter().copied().collect(),
            sigma_beta0: row_major(&prior.sigma_beta0),
            nu0: prior.nu0,
            s0: row_major(&prior.s0),
        }
    }

    pub fn to_prior(&self, p: usize, u: usize) -> Result<Prior> {
        if self.mu_beta0.len() != p {
            return Err(Error::Dimension(format!("prior mu_beta0 has length {}, expected {p}", self.mu_beta0.len())));
        }
        Ok(Prior {
            mu_beta0: DVector::from_column_slice(&self.mu_beta0),
            sigma_beta0: from_row_major(&self.sigma_beta0, p, p)?,
            nu0: self.nu0,
            s0: from_row_major(&self.s0, u, u)?,
        })
    }
}

/// One entry of a combined document's piece manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceManifest {
    pub piece: usize,
    pub m: usize,
    pub seed: u64,
    pub converged: bool,
    pub iterations_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub family: Family,
    pub p: usize,
    pub u: usize,
    pub m: usize,
    #[serde(with = "sig17::vec")]
    pub mu_beta: Vec<f64>,
    #[serde(with = "sig17::vec")]
    pub sigma_beta: Vec<f64>,
    #[serde(with = "sig17::scalar")]
    pub nu_q: f64,
    #[serde(rename = "S_q", with = "sig17::vec")]
    pub s_q: Vec<f64>,
    pub per_subject: Vec<SubjectDocument>,
    pub converged: bool,
    pub iterations_used: usize,
    pub seed: u64,
    pub combined: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pieces: Vec<PieceManifest>,
    pub prior: PriorDocument,
    pub stopping_rule: String,
    #[serde(default, with = "sig17::vec")]
    pub delta_trace: Vec<f64>,
}

fn subject_documents(fit: &VariationalFit, piece: Option<usize>) -> Vec<SubjectDocument> {
    fit.per_subject
        .iter()
        .map(|s| SubjectDocument {
            subject_id: s.subject_id.clone(),
            mu_b: s.mu_b.iter().copied().collect(),
            sigma_b: row_major(&s.sigma_b),
            piece,
        })
        .collect()
}

impl FitDocument {
    pub fn from_fit(fit: &VariationalFit, prior: &Prior) -> Self {
        Self {
            family: fit.family,
            p: fit.p(),
            u: fit.u(),
            m: fit.m(),
            mu_beta: fit.beta_marginal.mean().iter().copied().collect(),
            sigma_beta: row_major(fit.beta_marginal.covariance()),
            nu_q: fit.q_q.nu(),
            s_q: row_major(fit.q_q.scale()),
            per_subject: subject_documents(fit, None),
            converged: fit.converged,
            iterations_used: fit.iterations_used,
            seed: fit.seed,
            combined: false,
            pieces: Vec::new(),
            prior: PriorDocument::from_prior(prior),
            stopping_rule: STOPPING_RULE.to_string(),
            delta_trace: fit.delta_trace.clone(),
        }
    }

    /// Document for a recombined posterior; `pieces[j]` is piece `j`'s fit.
    pub fn combined(
        beta: &GaussianFactor,
        q: &WishartFactor,
        pieces: &[FitDocument],
        prior: &Prior,
        seed: u64,
    ) -> Result<Self> {
        let first = pieces.first().ok_or(Error::EmptyData)?;
        let per_subject = pieces
            .iter()
            .enumerate()
            .flat_map(|(j, d)| {
                d.per_subject.iter().map(move |s| SubjectDocument {
                    piece: Some(j),
                    ..s.clone()
                })
            })
            .collect();
        let manifest = pieces
            .iter()
            .enumerate()
            .map(|(j, d)| PieceManifest {
                piece: j,
                m: d.m,
                seed: d.seed,
                converged: d.converged,
                iterations_used: d.iterations_used,
            })
            .collect();
        Ok(Self {
            family: first.family,
            p: beta.dim(),
            u: q.dim(),
            m: pieces.iter().map(|d| d.m).sum(),
            mu_beta: beta.mean().iter().copied().collect(),
            sigma_beta: row_major(beta.covariance()),
            nu_q: q.nu(),
            s_q: row_major(q.scale()),
            per_subject,
            converged: pieces.iter().all(|d| d.converged),
            iterations_used: pieces.iter().map(|d| d.iterations_used).max().unwrap_or(0),
            seed,
            combined: true,
            pieces: manifest,
            prior: PriorDocument::from_prior(prior),
            stopping_rule: STOPPING_RULE.to_string(),
            delta_trace: Vec::new(),
        })
    }

    pub fn beta(&self) -> Result<GaussianFactor> {
        if self.mu_beta.len() != self.p {
            return Err(Error::Dimension(format!("mu_beta has length {}, expected {}", self.mu_beta.len(), self.p)));
        }
        GaussianFactor::new(
            DVector::from_column_slice(&self.mu_beta),
            from_row_major(&self.sigma_beta, self.p, self.p)?,
        )
    }

    pub fn q(&self) -> Result<WishartFactor> {
        WishartFactor::new(self.nu_q, from_row_major(&self.s_q, self.u, self.u)?)
    }

    pub fn prior(&self) -> Result<Prior> {
        self.prior.to_prior(self.p, self.u)
    }

    pub fn subject_posterior(&self, index: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let s = self
            .per_subject
            .get(index)
            .ok_or_else(|| Error::InvalidInput(format!("subject index {index} out of range")))?;
        Ok((DVector::from_column_slice(&s.mu_b), from_row_major(&s.sigma_b, self.u, self.u)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write_path(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn read_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
