//! Marginal density grids for plotting and VB–MCMC comparison tables.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, Normal};
use statrs::function::gamma::ln_gamma;

use crate::document::FitDocument;
use crate::error::{Error, Result};

pub const GRID_POINTS: usize = 512;
pub const GRID_HALF_WIDTH_SDS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub parameter: String,
    pub grid: Vec<(f64, f64)>,
}

impl DensityGrid {
    pub fn trapezoid(&self) -> f64 {
        self.grid.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[1].1 + w[0].1)).sum()
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(move |k| lo + step * k as f64)
}

pub fn gaussian_grid(parameter: &str, mean: f64, sd: f64) -> Result<DensityGrid> {
    let dist = Normal::new(mean, sd).map_err(|e| Error::InvalidInput(format!("{parameter}: {e}")))?;
    let half = GRID_HALF_WIDTH_SDS * sd;
    Ok(DensityGrid {
        parameter: parameter.to_string(),
        grid: linspace(mean - half, mean + half, GRID_POINTS).map(|x| (x, dist.pdf(x))).collect(),
    })
}

/// Shape and scale of the inverse gamma law of `σ² = 1/Q` for `Q ~ W(ν, S)`
/// with `u = 1`: shape `ν/2`, scale `1/(2S)`.
pub fn sigma2_law(nu: f64, s: f64) -> (f64, f64) {
    (0.5 * nu, 0.5 / s)
}

/// Mean and SD of `σ²` under `q(Q) = W(ν, S)`, `u = 1`.
pub fn sigma2_moments(nu: f64, s: f64) -> Result<(f64, f64)> {
    let (a, b) = sigma2_law(nu, s);
    if a <= 2.0 {
        return Err(Error::InvalidInput(format!(
            "sigma2 variance is undefined for Wishart degrees of freedom {nu}"
        )));
    }
    let mean = b / (a - 1.0);
    Ok((mean, mean / (a - 2.0).sqrt()))
}

/// `σ²` density on `mean ± 5 SD`, the lower end clamped above zero.
pub fn sigma2_grid(nu: f64, s: f64) -> Result<DensityGrid> {
    let (a, b) = sigma2_law(nu, s);
    let (mean, sd) = sigma2_moments(nu, s)?;
    let ln_norm = a * b.ln() - ln_gamma(a);
    let pdf = |x: f64| (ln_norm - (a + 1.0) * x.ln() - b / x).exp();
    let hi = mean + GRID_HALF_WIDTH_SDS * sd;
    let lo = (mean - GRID_HALF_WIDTH_SDS * sd).max(hi * 1e-9);
    Ok(DensityGrid {
        parameter: "sigma2".into(),
        grid: linspace(lo, hi, GRID_POINTS).map(|x| (x, pdf(x))).collect(),
    })
}

/// Grids for every `β_k` and, when `u = 1`, for `σ²`.
pub fn fit_density_grids(doc: &FitDocument) -> Result<Vec<DensityGrid>> {
    let beta = doc.beta()?;
    let sds = beta.marginal_sds();
    let mut grids = (0..doc.p)
        .map(|k| gaussian_grid(&format!("beta{}", k + 1), beta.mean()[k], sds[k]))
        .collect::<Result<Vec<_>>>()?;
    if doc.u == 1 {
        grids.push(sigma2_grid(doc.nu_q, doc.s_q[0])?);
    }
    Ok(grids)
}

/// Histogram density of `draws` on the bins spanned by `grid`'s abscissae.
pub fn histogram_on_grid(draws: &[f64], grid: &DensityGrid) -> DensityGrid {
    let xs: Vec<f64> = grid.grid.iter().map(|g| g.0).collect();
    let n = draws.len() as f64;
    let mut out = Vec::with_capacity(xs.len());
    for (k, &x) in xs.iter().enumerate() {
        let lo = if k == 0 { x } else { 0.5 * (xs[k - 1] + x) };
        let hi = if k + 1 == xs.len() { x } else { 0.5 * (x + xs[k + 1]) };
        let count = draws.iter().filter(|&&d| d >= lo && d < hi).count() as f64;
        out.push((x, if hi > lo { count / (n * (hi - lo)) } else { 0.0 }));
    }
    DensityGrid {
        parameter: grid.parameter.clone(),
        grid: out,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterComparison {
    pub parameter: String,
    pub vb_mean: f64,
    pub vb_sd: f64,
    pub mcmc_mean: f64,
    pub mcmc_sd: f64,
    pub abs_mean_delta: f64,
    pub sd_delta: f64,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v.sqrt())
}

/// Compares VB marginals with chain draws (`β` then `θ_Q` columns). For
/// `u = 1` the chain's `σ² = exp(−θ)` is compared with the VB `σ²` law.
pub fn compare(doc: &FitDocument, chain: &[Vec<f64>]) -> Result<Vec<ParameterComparison>> {
    let dq = doc.u * (doc.u + 1) / 2;
    if chain.is_empty() || chain.iter().any(|r| r.len() != doc.p + dq) {
        return Err(Error::Dimension(format!(
            "chain rows must have {} columns (beta then theta_Q)",
            doc.p + dq
        )));
    }
    let beta = doc.beta()?;
    let sds = beta.marginal_sds();
    let mut out = Vec::new();
    for k in 0..doc.p {
        let col: Vec<f64> = chain.iter().map(|r| r[k]).collect();
        let (mm, ms) = mean_sd(&col);
        out.push(ParameterComparison {
            parameter: format!("beta{}", k + 1),
            vb_mean: beta.mean()[k],
            vb_sd: sds[k],
            mcmc_mean: mm,
            mcmc_sd: ms,
            abs_mean_delta: (beta.mean()[k] - mm).abs(),
            sd_delta: sds[k] - ms,
        });
    }
    if doc.u == 1 {
        let col: Vec<f64> = chain.iter().map(|r| (-r[doc.p]).exp()).collect();
        let (mm, ms) = mean_sd(&col);
        let (vm, vs) = sigma2_moments(doc.nu_q, doc.s_q[0])?;
        out.push(ParameterComparison {
            parameter: "sigma2".into(),
            vb_mean: vm,
            vb_sd: vs,
            mcmc_mean: mm,
            mcmc_sd: ms,
            abs_mean_delta: (vm - mm).abs(),
            sd_delta: vs - ms,
        });
    }
    Ok(out)
}
