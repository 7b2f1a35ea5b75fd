//! Model selection by cross-validated log predictive density score (LPDS).
//!
//! Each candidate is fitted once per piece. For fold `j` the pieces other than
//! `j` are recombined (prior exponent `M − 2`), the posterior means of `β` and
//! `Q` are plugged in, and the held-out subjects' predictive densities are
//! approximated by Laplace's method. The score is the average over folds.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dnr::{combine_factors, fit_pieces, piece_models, CombinedPosterior, Partition};
use crate::error::{Error, Result};
use crate::expfam::{GaussianFactor, WishartFactor};
use crate::glmm::{Dataset, Family, GlmmModel, Subject};
use crate::laplace::laplace_log_marginal;
use crate::mfvb::{FitConfig, VariationalFit};

pub const MAX_CANDIDATES: usize = 4096;

/// Column 0 of the x and z designs is the intercept and is always included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateModel {
    pub fixed_columns: Vec<usize>,
    pub random_columns: Vec<usize>,
    pub family: Family,
}

impl CandidateModel {
    pub fn new(fixed_columns: Vec<usize>, random_columns: Vec<usize>, family: Family) -> Result<Self> {
        if fixed_columns.first() != Some(&0) || random_columns.first() != Some(&0) {
            return Err(Error::Config(
                "candidate models must list the intercept column (x1 and z1) first".into(),
            ));
        }
        Ok(Self {
            fixed_columns,
            random_columns,
            family,
        })
    }

    pub fn n_covariates(&self) -> usize {
        self.fixed_columns.len() + self.random_columns.len()
    }

    pub fn fixed_label(&self) -> String {
        column_label('x', &self.fixed_columns)
    }

    pub fn random_label(&self) -> String {
        column_label('z', &self.random_columns)
    }

    pub fn model(&self, dataset: &Dataset) -> Result<GlmmModel> {
        dataset.model(self.family, &self.fixed_columns, &self.random_columns, None)
    }
}

fn column_label(prefix: char, cols: &[usize]) -> String {
    cols.iter().map(|c| format!("{prefix}{}", c + 1)).collect::<Vec<_>>().join(";")
}

/// Every subset of the pools added to the intercepts, enumerated by binary
/// counting with the fixed pool as the major digit.
pub fn enumerate_candidates(fixed_pool: &[usize], random_pool: &[usize], family: Family) -> Result<Vec<CandidateModel>> {
    if fixed_pool.contains(&0) || random_pool.contains(&0) {
        return Err(Error::Config("covariate pools must not contain the intercept column".into()));
    }
    let bits = fixed_pool.len() + random_pool.len();
    if bits >= usize::BITS as usize || (1usize << bits) > MAX_CANDIDATES {
        return Err(Error::Config(format!(
            "{bits} pool covariates give more than {MAX_CANDIDATES} candidate models"
        )));
    }
    let subset = |pool: &[usize], mask: usize| {
        let mut cols = vec![0];
        cols.extend(pool.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, &c)| c));
        cols
    };
    let mut out = Vec::with_capacity(1 << bits);
    for f in 0..1usize << fixed_pool.len() {
        for r in 0..1usize << random_pool.len() {
            out.push(CandidateModel {
                fixed_columns: subset(fixed_pool, f),
                random_columns: subset(random_pool, r),
                family,
            });
        }
    }
    Ok(out)
}

/// Recombination of every piece except `leave_out`.
pub fn loo_combine(fits: &[VariationalFit], leave_out: usize, model: &GlmmModel) -> Result<CombinedPosterior> {
    let m_pieces = fits.len();
    if m_pieces < 2 {
        return Err(Error::Config("leave-one-piece-out needs at least two pieces".into()));
    }
    if leave_out >= m_pieces {
        return Err(Error::InvalidInput(format!("piece {leave_out} out of range for {m_pieces} pieces")));
    }
    let kept: Vec<VariationalFit> = fits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != leave_out)
        .map(|(_, f)| f.clone())
        .collect();
    let betas: Vec<GaussianFactor> = kept.iter().map(|f| f.beta_marginal.clone()).collect();
    let qs: Vec<WishartFactor> = kept.iter().map(|f| f.q_q.clone()).collect();
    let (beta, q) = combine_factors(&betas, &qs, model.prior(), m_pieces as f64 - 2.0)?;
    Ok(CombinedPosterior { beta, q, pieces: kept })
}

/// Laplace approximation of `log p(y_i | β̂, Q̂)`.
pub fn laplace_predictive(subject: &Subject, beta_hat: &DVector<f64>, q_hat: &DMatrix<f64>, family: Family) -> Result<f64> {
    laplace_log_marginal(subject, family, beta_hat, q_hat)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub candidate: CandidateModel,
    pub lpds: f64,
    pub per_fold: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpdsReport {
    pub per_model: Vec<ModelScore>,
    pub best_index: usize,
    pub m_pieces: usize,
    pub seed: u64,
}

/// Index of the highest score; ties go to fewer covariates, then lower index.
pub fn select_best(scores: &[ModelScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, s) in scores.iter().enumerate() {
        best = match best {
            None => Some(k),
            Some(b) => {
                let cur = &scores[b];
                if s.lpds > cur.lpds || (s.lpds == cur.lpds && s.candidate.n_covariates() < cur.candidate.n_covariates()) {
                    Some(k)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Per-fold held-out log predictive densities for one candidate model.
pub fn fold_scores(model: &GlmmModel, partition: &Partition, config: &FitConfig) -> Result<Vec<f64>> {
    let fits = fit_pieces(model, partition, config)?;
    let pieces = piece_models(model, partition)?;
    (0..fits.len())
        .map(|j| {
            let loo = loo_combine(&fits, j, model).map_err(|e| e.with_context(format!("fold {j}")))?;
            let beta_hat = loo.beta.mean().clone();
            let q_hat = loo.q.mean();
            let mut total = 0.0;
            for s in pieces[j].subjects() {
                total += laplace_predictive(s, &beta_hat, &q_hat, model.family())
                    .map_err(|e| e.with_context(format!("fold {j}")))?;
            }
            Ok(total)
        })
        .collect()
}

pub fn cross_validated_lpds(
    candidates: &[CandidateModel],
    dataset: &Dataset,
    partition: &Partition,
    config: &FitConfig,
) -> Result<LpdsReport> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate models".into()));
    }
    if partition.m_pieces < 2 {
        return Err(Error::Config("cross-validation needs at least two pieces".into()));
    }
    let results: Vec<Result<ModelScore>> = candidates
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            let per_fold = c
                .model(dataset)
                .and_then(|model| fold_scores(&model, partition, config))
                .map_err(|e| e.with_context(format!("candidate {k}")))?;
            let lpds = per_fold.iter().sum::<f64>() / per_fold.len() as f64;
            Ok(ModelScore {
                candidate: c.clone(),
                lpds,
                per_fold,
            })
        })
        .collect();
    let per_model = results.into_iter().collect::<Result<Vec<_>>>()?;
    let best_index = select_best(&per_model).expect("nonempty");
    Ok(LpdsReport {
        per_model,
        best_index,
        m_pieces: partition.m_pieces,
        seed: config.rng_seed,
    })
}

/// [`cross_validated_lpds`] on a dedicated pool of `jobs` workers.
pub fn cross_validated_lpds_with_jobs(
    candidates: &[CandidateModel],
    dataset: &Dataset,
    partition: &Partition,
    config: &FitConfig,
    jobs: usize,
) -> Result<LpdsReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| cross_validated_lpds(candidates, dataset, partition, config))
}

impl LpdsReport {
    pub fn best(&self) -> &ModelScore {
        &self.per_model[self.best_index]
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["candidate", "fixed_cols", "random_cols", "lpds"])?;
        for (k, s) in self.per_model.iter().enumerate() {
            w.write_record([
                k.to_string(),
                s.candidate.fixed_label(),
                s.candidate.random_label(),
                format!("{:.16e}", s.lpds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Covariate-by-model inclusion table with an LPDS row.
    pub fn render_table(&self) -> String {
        let n_x = self.per_model.iter().flat_map(|s| s.candidate.fixed_columns.iter()).max().map_or(0, |c| c + 1);
        let n_z = self.per_model.iter().flat_map(|s| s.candidate.random_columns.iter()).max().map_or(0, |c| c + 1);
        let mut rows: Vec<(String, Vec<String>)> = Vec::new();
        let yn = |b: bool| if b { "Y" } else { "N" }.to_string();
        for c in 0..n_x {
            let name = if c == 0 { "Fixed intercept".to_string() } else { format!("x{}", c + 1) };
            rows.push((name, self.per_model.iter().map(|s| yn(s.candidate.fixed_columns.contains(&c))).collect()));
        }
        for c in 0..n_z {
            let name = if c == 0 { "Random intercept".to_string() } else { format!("Random z{}", c + 1) };
            rows.push((name, self.per_model.iter().map(|s| yn(s.candidate.random_columns.contains(&c))).collect()));
        }
        rows.push(("LPDS".into(), self.per_model.iter().map(|s| format!("{:.1}", s.lpds)).collect()));

        let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let headers: Vec<String> = (1..=self.per_model.len())
            .map(|k| if k - 1 == self.best_index { format!("Model {k}*") } else { format!("Model {k}") })
            .collect();
        let col_w: Vec<usize> = (0..headers.len())
            .map(|k| rows.iter().map(|r| r.1[k].len()).chain([headers[k].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let _ = write!(out, "{:label_w$} |", "");
        for (h, w) in headers.iter().zip(&col_w) {
            let _ = write!(out, " {h:>w$}");
        }
        out.push('\n');
        for (name, cells) in &rows {
            let _ = write!(out, "{name:label_w$} |");
            for (c, w) in cells.iter().zip(&col_w) {
                let _ = write!(out, " {c:>w$}");
            }
            out.push('\n');
        }
        out
    }
}
