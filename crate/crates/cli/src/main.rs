use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use glmm_vb::density::{compare, fit_density_grids, histogram_on_grid, DensityGrid};
use glmm_vb::dnr::{self, make_partition, piece_count, DEFAULT_PIECE_SIZE};
use glmm_vb::mcmcref::{read_chain_csv, run_chain, ChainConfig};
use glmm_vb::modelsel::{cross_validated_lpds, enumerate_candidates, CandidateModel};
use glmm_vb::simulate::{generate, SimDesign, SimKind};
use glmm_vb::{Dataset, Family, FitConfig, FitDocument};

#[derive(Parser)]
#[command(name = "glmm-vb", version, about = "Variational Bayes for generalized linear mixed models")]
struct Cli {
    /// Worker threads for piece fits and candidate models (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a random-intercept dataset.
    Simulate(SimulateArgs),
    /// Fit a model, splitting the subjects into pieces of about --pieces-size.
    Fit(FitArgs),
    /// Recombine per-piece fit documents.
    Recombine(RecombineArgs),
    /// Cross-validated LPDS model selection.
    Select(SelectArgs),
    /// Reference posterior by pseudo-marginal MCMC.
    Mcmc(McmcArgs),
    /// Compare a fit with an MCMC chain.
    Compare(CompareArgs),
    /// Marginal density grids of a fit.
    Density(DensityArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// logistic, logistic-select or poisson.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Observations per subject (design default if omitted).
    #[arg(long = "n-i")]
    n_i: Option<usize>,
    /// Random-intercept variance (design default if omitted).
    #[arg(long)]
    sigma2: Option<f64>,
    /// Output CSV (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sidecar JSON with the design and true parameters.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Long-format CSV: subject_id,y,x1..xp,z1..zu[,offset].
    #[arg(long)]
    data: PathBuf,
    /// bernoulli or poisson.
    #[arg(long)]
    family: String,
    /// Link function; only the canonical link is accepted.
    #[arg(long)]
    link: Option<String>,
    /// Fixed-effect columns, e.g. x1,x2 (default: all).
    #[arg(long, value_delimiter = ',')]
    fixed: Vec<String>,
    /// Random-effect columns, e.g. z1 (default: all).
    #[arg(long, value_delimiter = ',')]
    random: Vec<String>,
}

#[derive(Args)]
struct VbArgs {
    #[arg(long = "inner-N", default_value_t = 100)]
    inner_n: usize,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long = "max-outer", default_value_t = 50)]
    max_outer: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl VbArgs {
    fn config(&self) -> FitConfig {
        FitConfig {
            inner_iterations: self.inner_n,
            epsilon: self.epsilon,
            max_outer: self.max_outer,
            rng_seed: self.seed,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    vb: VbArgs,
    #[arg(long = "pieces-size", default_value_t = DEFAULT_PIECE_SIZE)]
    pieces_size: usize,
    /// Output fit JSON (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the subject_id,piece partition CSV.
    #[arg(long)]
    partition: Option<PathBuf>,
    /// Also write each piece's fit as piece-<j>.json in this directory.
    #[arg(long = "pieces-dir")]
    pieces_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RecombineArgs {
    /// Per-piece fit documents, in piece order.
    #[arg(required = true)]
    fits: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    family: String,
    #[arg(long)]
    link: Option<String>,
    /// Optional fixed-effect covariates beyond the intercept x1, e.g. x2,x3.
    #[arg(long = "fixed-pool", value_delimiter = ',')]
    fixed_pool: Vec<String>,
    /// Optional random-effect covariates beyond the intercept z1, e.g. z2.
    #[arg(long = "random-pool", value_delimiter = ',')]
    random_pool: Vec<String>,
    #[command(flatten)]
    vb: VbArgs,
    #[arg(long = "pieces-size", default_value_t = DEFAULT_PIECE_SIZE)]
    pieces_size: usize,
    /// Report CSV: candidate,fixed_cols,random_cols,lpds.
    #[arg(long = "out-csv")]
    out_csv: Option<PathBuf>,
    /// Full report JSON.
    #[arg(long = "out-json")]
    out_json: Option<PathBuf>,
}

#[derive(Args)]
struct McmcArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "n-iter", default_value_t = 20_000)]
    n_iter: usize,
    #[arg(long, default_value_t = 20_000)]
    burnin: usize,
    #[arg(long = "is-samples", default_value_t = 10)]
    is_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Chain CSV, one row per draw (beta then theta_Q).
    #[arg(long)]
    out: PathBuf,
    /// Summary JSON with means, SDs and acceptance rate.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    chain: PathBuf,
    /// JSON with the comparison table and VB/MCMC density grids.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DensityArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_columns(names: &[String], prefix: char, available: usize) -> Result<Vec<usize>> {
    if names.is_empty() {
        return Ok((0..available).collect());
    }
    names
        .iter()
        .map(|n| {
            let k: usize = n
                .trim()
                .strip_prefix(prefix)
                .and_then(|d| d.parse().ok())
                .filter(|&k| k >= 1 && k <= available)
                .with_context(|| format!("column '{n}' is not one of {prefix}1..{prefix}{available}"))?;
            Ok(k - 1)
        })
        .collect()
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_model(args: &ModelArgs) -> Result<(Dataset, glmm_vb::GlmmModel)> {
    let family = Family::with_link(&args.family, args.link.as_deref()).context("GlmmModel")?;
    let data = Dataset::read_csv_path(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let fixed = parse_columns(&args.fixed, 'x', data.n_x)?;
    let random = parse_columns(&args.random, 'z', data.n_z)?;
    let model = data.model(family, &fixed, &random, None).context("GlmmModel")?;
    Ok((data, model))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let kind: SimKind = args.kind.parse().context("simulate")?;
    let mut design = SimDesign::new(kind, args.m, args.seed);
    if let Some(n) = args.n_i {
        design.n_i = n;
    }
    if let Some(s) = args.sigma2 {
        design.sigma2 = s;
    }
    let data = generate(&design).context("generate")?;
    let mut buf = Vec::new();
    data.write_csv(&mut buf).context("generate")?;
    write_output(args.out.as_deref(), &String::from_utf8(buf)?)?;
    if let Some(t) = args.truth {
        fs::write(&t, design.sidecar_json()? + "\n")?;
    }
    Ok(())
}

fn fit(args: FitArgs) -> Result<()> {
    let (_, model) = load_model(&args.model)?;
    let config = args.vb.config();
    config.validate().context("mfvb_fit")?;
    let ids: Vec<String> = model.subjects().iter().map(|s| s.id.clone()).collect();
    let partition = make_partition(&ids, args.pieces_size, config.rng_seed).context("make_partition")?;
    let fits = dnr::fit_pieces(&model, &partition, &config).context("fit_pieces")?;
    if let Some(p) = &args.partition {
        partition.write_csv_path(p).context("make_partition")?;
    }
    let prior = model.prior();
    if let Some(dir) = &args.pieces_dir {
        fs::create_dir_all(dir)?;
        for (j, f) in fits.iter().enumerate() {
            FitDocument::from_fit(f, prior).write_path(dir.join(format!("piece-{j}.json")))?;
        }
    }
    let doc = if fits.len() == 1 {
        FitDocument::from_fit(&fits[0], prior)
    } else {
        dnr::recombine(&fits, &model)
            .and_then(|c| c.to_document(prior, config.rng_seed))
            .context("recombine")?
    };
    for f in fits.iter().filter(|f| !f.converged) {
        eprintln!(
            "warning: a piece fit stopped at the outer-iteration limit ({}) without meeting the stopping rule",
            f.iterations_used
        );
    }
    write_output(args.out.as_deref(), &(doc.to_json()? + "\n"))
}

fn recombine(args: RecombineArgs) -> Result<()> {
    let docs = args
        .fits
        .iter()
        .map(|p| FitDocument::read_path(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let doc = dnr::recombine_documents(&docs, args.seed).context("recombine")?;
    write_output(args.out.as_deref(), &(doc.to_json()? + "\n"))
}

fn select(args: SelectArgs) -> Result<()> {
    let family = Family::with_link(&args.family, args.link.as_deref()).context("GlmmModel")?;
    let data = Dataset::read_csv_path(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let fixed_pool = parse_columns(&args.fixed_pool, 'x', data.n_x)?;
    let random_pool = parse_columns(&args.random_pool, 'z', data.n_z)?;
    let (fixed_pool, random_pool) = if args.fixed_pool.is_empty() && args.random_pool.is_empty() {
        (fixed_pool[1..].to_vec(), random_pool[1..].to_vec())
    } else {
        (
            if args.fixed_pool.is_empty() { Vec::new() } else { fixed_pool },
            if args.random_pool.is_empty() { Vec::new() } else { random_pool },
        )
    };
    let candidates: Vec<CandidateModel> =
        enumerate_candidates(&fixed_pool, &random_pool, family).context("enumerate_candidates")?;
    let config = args.vb.config();
    if piece_count(data.m(), args.pieces_size) < 2 {
        bail!(
            "cross_validated_lpds: {} subjects with --pieces-size {} give a single piece; cross-validation needs at least two",
            data.m(),
            args.pieces_size
        );
    }
    let partition = make_partition(&data.subject_ids(), args.pieces_size, config.rng_seed).context("make_partition")?;
    let report = cross_validated_lpds(&candidates, &data, &partition, &config).context("cross_validated_lpds")?;
    print!("{}", report.render_table());
    if let Some(p) = &args.out_csv {
        let f = fs::File::create(p).with_context(|| format!("writing {}", p.display()))?;
        report.write_csv(f)?;
    }
    if let Some(p) = &args.out_json {
        fs::write(p, report.to_json()? + "\n")?;
    }
    Ok(())
}

fn mcmc(args: McmcArgs) -> Result<()> {
    let (_, model) = load_model(&args.model)?;
    let config = ChainConfig {
        n_iter: args.n_iter,
        burnin: args.burnin,
        is_samples: args.is_samples,
        seed: args.seed,
    };
    let chain = run_chain(&model, &config).context("run_chain")?;
    if let Some(w) = &chain.warning {
        eprintln!("warning: {w}");
    }
    let f = fs::File::create(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    chain.write_csv(std::io::BufWriter::new(f))?;
    if let Some(p) = &args.summary {
        fs::write(p, serde_json::to_string_pretty(&chain.summary()?)? + "\n")?;
    }
    Ok(())
}

fn compare_cmd(args: CompareArgs) -> Result<()> {
    let doc = FitDocument::read_path(&args.fit).with_context(|| format!("reading {}", args.fit.display()))?;
    let f = fs::File::open(&args.chain).with_context(|| format!("reading {}", args.chain.display()))?;
    let (_, rows) = read_chain_csv(f).context("read_chain_csv")?;
    let table = compare(&doc, &rows).context("compare")?;
    println!("{:<10} {:>12} {:>12} {:>12} {:>12} {:>12}", "parameter", "vb_mean", "mcmc_mean", "|dmean|", "vb_sd", "mcmc_sd");
    for r in &table {
        println!(
            "{:<10} {:>12.5} {:>12.5} {:>12.5} {:>12.5} {:>12.5}",
            r.parameter, r.vb_mean, r.mcmc_mean, r.abs_mean_delta, r.vb_sd, r.mcmc_sd
        );
    }
    if let Some(out) = &args.out {
        let vb = fit_density_grids(&doc).context("density")?;
        let mcmc: Vec<DensityGrid> = vb
            .iter()
            .enumerate()
            .map(|(k, g)| {
                let draws: Vec<f64> = if k < doc.p {
                    rows.iter().map(|r| r[k]).collect()
                } else {
                    rows.iter().map(|r| (-r[doc.p]).exp()).collect()
                };
                histogram_on_grid(&draws, g)
            })
            .collect();
        let v = serde_json::json!({ "comparison": table, "vb_density": vb, "mcmc_density": mcmc });
        fs::write(out, serde_json::to_string_pretty(&v)? + "\n")?;
    }
    Ok(())
}

fn density(args: DensityArgs) -> Result<()> {
    let doc = FitDocument::read_path(&args.fit).with_context(|| format!("reading {}", args.fit.display()))?;
    let grids = fit_density_grids(&doc).context("density")?;
    write_output(args.out.as_deref(), &(serde_json::to_string_pretty(&grids)? + "\n"))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Recombine(a) => recombine(a),
        Command::Select(a) => select(a),
        Command::Mcmc(a) => mcmc(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Density(a) => density(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
