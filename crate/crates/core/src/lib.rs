//! Variational Bayes for generalized linear mixed models.
//!
//! A hybrid fixed-form / mean-field scheme fits `q(β, b) q(Q)` to a
//! Bernoulli or Poisson GLMM. Data can be split into pieces that are fitted
//! independently and recombined exactly in natural-parameter space, which
//! also gives cheap leave-one-piece-out predictive densities for model
//! selection. A pseudo-marginal MCMC sampler provides reference posteriors.

pub mod density;
pub mod dnr;
pub mod document;
pub mod error;
pub mod expfam;
pub mod ffvb;
pub mod glmm;
pub mod laplace;
pub mod linalg;
pub mod mcmcref;
pub mod mfvb;
pub mod modelsel;
pub mod rng;
pub mod simulate;

pub use dnr::{fit_pieces, make_partition, recombine, CombinedPosterior, Partition};
pub use document::FitDocument;
pub use error::{Error, Result};
pub use expfam::{combine_gaussians, combine_wisharts, GaussianFactor, WishartFactor};
pub use glmm::{Dataset, Family, GlmmModel, Prior};
pub use mcmcref::{run_chain, ChainConfig};
pub use mfvb::{mfvb_fit, FitConfig, VariationalFit};
pub use modelsel::{cross_validated_lpds, enumerate_candidates, CandidateModel, LpdsReport};
pub use simulate::{generate, SimDesign, SimKind};
