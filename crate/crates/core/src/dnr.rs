//! Divide and recombine: random balanced partitions of subjects, independent
//! piece fits, and recombination of the shared `β` and `Q` posteriors.
//!
//! Piece `j` is fitted with seed `derive_seed(seed, j)` (see [`crate::rng`]),
//! so results do not depend on how many workers run the pieces or in what
//! order they finish.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::document::FitDocument;
use crate::error::{Error, Result};
use crate::expfam::{combine_gaussians_with_exponent, combine_wisharts_with_exponent, GaussianFactor, WishartFactor};
use crate::glmm::{GlmmModel, Prior};
use crate::mfvb::{mfvb_fit, FitConfig, VariationalFit};
use crate::rng::{derive_seed, rng_from_seed};

pub const DEFAULT_PIECE_SIZE: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub m_pieces: usize,
    /// Subject ids in input order.
    pub ids: Vec<String>,
    /// `assignment[k]` is the piece of `ids[k]`.
    pub assignment: Vec<usize>,
    pub seed: u64,
}

/// Number of pieces for `m` subjects: `max(1, round(m / target))`, halves
/// rounded up.
pub fn piece_count(m: usize, target: usize) -> usize {
    ((m as f64 / target as f64).round() as usize).max(1)
}

/// Random balanced partition: shuffle the subjects, then deal them to the
/// pieces in turn, so piece sizes differ by at most one.
pub fn make_partition(ids: &[String], target_piece_size: usize, seed: u64) -> Result<Partition> {
    if ids.is_empty() {
        return Err(Error::EmptyData);
    }
    if target_piece_size == 0 {
        return Err(Error::Config("target piece size must be at least 1".into()));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::InvalidInput(format!("duplicate subject id '{dup}'")));
    }
    let m_pieces = piece_count(ids.len(), target_piece_size);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut assignment = vec![0; ids.len()];
    for (k, &i) in order.iter().enumerate() {
        assignment[i] = k % m_pieces;
    }
    Ok(Partition {
        m_pieces,
        ids: ids.to_vec(),
        assignment,
        seed,
    })
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.m_pieces];
        for &j in &self.assignment {
            sizes[j] += 1;
        }
        sizes
    }

    pub fn piece_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id).map(|k| self.assignment[k])
    }

    /// Positions (into `ids`) of the subjects in piece `j`, ascending.
    pub fn members(&self, j: usize) -> Vec<usize> {
        (0..self.ids.len()).filter(|&k| self.assignment[k] == j).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["subject_id", "piece"])?;
        for (id, j) in self.ids.iter().zip(&self.assignment) {
            w.write_record([id.as_str(), &j.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    /// Reads a `subject_id,piece` CSV. The seed is not stored in the file.
    pub fn read_csv<R: Read>(reader: R, seed: u64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut ids = Vec::new();
        let mut assignment = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::InvalidInput("partition rows must be subject_id,piece".into()));
            }
            ids.push(rec[0].to_string());
            assignment.push(
                rec[1]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidInput(format!("bad piece index '{}'", &rec[1])))?,
            );
        }
        let m_pieces = assignment.iter().max().map_or(0, |j| j + 1);
        if m_pieces == 0 {
            return Err(Error::EmptyData);
        }
        let p = Partition {
            m_pieces,
            ids,
            assignment,
            seed,
        };
        if p.sizes().contains(&0) {
            return Err(Error::InvalidInput("partition has an empty piece".into()));
        }
        Ok(p)
    }

    /// Subject index lists into `model`, one per piece.
    fn model_indices(&self, model: &GlmmModel) -> Result<Vec<Vec<usize>>> {
        let index: HashMap<&str, usize> = model
            .subjects()
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        if self.ids.len() != index.len() {
            return Err(Error::InvalidInput(format!(
                "partition covers {} subjects but the model has {}",
                self.ids.len(),
                index.len()
            )));
        }
        let mut pieces = vec![Vec::new(); self.m_pieces];
        for (id, &j) in self.ids.iter().zip(&self.assignment) {
            let i = *index
                .get(id.as_str())
                .ok_or_else(|| Error::InvalidInput(format!("partition subject '{id}' not in the data")))?;
            pieces[j].push(i);
        }
        for p in &mut pieces {
            p.sort_unstable();
        }
        Ok(pieces)
    }
}

/// Sub-models of `model`, one per piece, subjects in data order.
pub fn piece_models(model: &GlmmModel, partition: &Partition) -> Result<Vec<GlmmModel>> {
    partition
        .model_indices(model)?
        .iter()
        .map(|idx| model.subset(idx))
        .collect()
}

pub fn piece_config(config: &FitConfig, piece: usize) -> FitConfig {
    FitConfig {
        rng_seed: derive_seed(config.rng_seed, piece as u64),
        ..*config
    }
}

fn fit_models(models: &[GlmmModel], config: &FitConfig) -> Result<Vec<VariationalFit>> {
    let results: Vec<Result<VariationalFit>> = models
        .par_iter()
        .enumerate()
        .map(|(j, m)| mfvb_fit(m, &piece_config(config, j)))
        .collect();
    results
        .into_iter()
        .enumerate()
        .map(|(j, r)| {
            r.map_err(|e| Error::Piece {
                piece: j,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Fits every piece on the current rayon pool.
pub fn fit_pieces(model: &GlmmModel, partition: &Partition, config: &FitConfig) -> Result<Vec<VariationalFit>> {
    config.validate()?;
    let models = piece_models(model, partition)?;
    fit_models(&models, config)
}

/// [`fit_pieces`] on a dedicated pool of `jobs` workers.
pub fn fit_pieces_with_jobs(
    model: &GlmmModel,
    partition: &Partition,
    config: &FitConfig,
    jobs: usize,
) -> Result<Vec<VariationalFit>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| fit_pieces(model, partition, config))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedPosterior {
    pub beta: GaussianFactor,
    pub q: WishartFactor,
    pub pieces: Vec<VariationalFit>,
}

impl CombinedPosterior {
    pub fn to_document(&self, prior: &Prior, seed: u64) -> Result<FitDocument> {
        let docs: Vec<FitDocument> = self.pieces.iter().map(|f| FitDocument::from_fit(f, prior)).collect();
        FitDocument::combined(&self.beta, &self.q, &docs, prior, seed)
    }
}

/// Combines per-piece factors with the prior raised to `exponent`.
pub(crate) fn combine_factors(
    betas: &[GaussianFactor],
    qs: &[WishartFactor],
    prior: &Prior,
    exponent: f64,
) -> Result<(GaussianFactor, WishartFactor)> {
    let beta = combine_gaussians_with_exponent(betas, &prior.beta_factor()?, exponent)?;
    let q = combine_wisharts_with_exponent(qs, &prior.q_factor()?, exponent)?;
    Ok((beta, q))
}

/// Recombines per-piece fit documents into a combined document.
pub fn recombine_documents(docs: &[FitDocument], seed: u64) -> Result<FitDocument> {
    let first = docs.first().ok_or(Error::EmptyData)?;
    let prior = first.prior()?;
    for d in docs {
        if d.combined {
            return Err(Error::Recombination("cannot recombine an already combined posterior".into()));
        }
        if (d.family, d.p, d.u) != (first.family, first.p, first.u) || d.prior()? != prior {
            return Err(Error::Recombination(
                "piece fits differ in family, dimensions or prior".into(),
            ));
        }
    }
    let betas = docs.iter().map(FitDocument::beta).collect::<Result<Vec<_>>>()?;
    let qs = docs.iter().map(FitDocument::q).collect::<Result<Vec<_>>>()?;
    let (beta, q) = combine_factors(&betas, &qs, &prior, docs.len() as f64 - 1.0)?;
    FitDocument::combined(&beta, &q, docs, &prior, seed)
}

pub fn recombine(fits: &[VariationalFit], model: &GlmmModel) -> Result<CombinedPosterior> {
    if fits.is_empty() {
        return Err(Error::EmptyData);
    }
    let betas: Vec<GaussianFactor> = fits.iter().map(|f| f.beta_marginal.clone()).collect();
    let qs: Vec<WishartFactor> = fits.iter().map(|f| f.q_q.clone()).collect();
    let (beta, q) = combine_factors(&betas, &qs, model.prior(), fits.len() as f64 - 1.0)?;
    Ok(CombinedPosterior {
        beta,
        q,
        pieces: fits.to_vec(),
    })
}

/// Partition, fit pieces on `jobs` workers (or the current pool), recombine.
pub fn fit_divided(
    model: &GlmmModel,
    target_piece_size: usize,
    config: &FitConfig,
    jobs: Option<usize>,
) -> Result<(Partition, CombinedPosterior)> {
    let ids: Vec<String> = model.subjects().iter().map(|s| s.id.clone()).collect();
    let partition = make_partition(&ids, target_piece_size, config.rng_seed)?;
    let fits = match jobs {
        Some(j) => fit_pieces_with_jobs(model, &partition, config, j)?,
        None => fit_pieces(model, &partition, config)?,
    };
    let combined = recombine(&fits, model)?;
    Ok((partition, combined))
}
