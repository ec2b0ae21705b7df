//! `psar` — simulate, fit, and run Monte Carlo studies from the shell.
//!
//! Exit codes: 0 success, 2 bad input or configuration, 3 estimation failure.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use psar::cle::FitOptions;
use psar::harness::{self, bench_timing, loglog_slope, run_mc_with_workers, timing_csv, ExperimentConfig, Generator};
use psar::inference::{bootstrap_se, fit_estimator, BootstrapMode, EstimatorKind};
use psar::network::{prepare, read_edge_list};
use psar::rng::{derive_seed, tag};
use psar::sim::{add_privacy_noise, assemble_observed, gen_covariates, read_data_csv, simulate_sar, write_data_csv};
use psar::{NoiseLaw, PrivacyConfig, PsarError, Result, Theta};

#[derive(Parser)]
#[command(name = "psar", version, about = "Estimation for privacy-protected spatial autoregressive data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a network and one noisy data set.
    Simulate(SimulateArgs),
    /// Fit one estimator to a data CSV and edge list.
    Fit(FitArgs),
    /// Run a Monte Carlo experiment from a config file.
    Mc(McArgs),
    /// Time the estimators over a grid of network sizes.
    Bench(BenchArgs),
}

#[derive(Args)]
struct NetArgs {
    /// dyad, sbm or powerlaw
    #[arg(long, default_value = "dyad")]
    generator: String,
    #[arg(long, default_value_t = 20)]
    sbm_blocks: usize,
    #[arg(long, default_value_t = 3.0)]
    powerlaw_alpha: f64,
}

impl NetArgs {
    fn generator(&self) -> Result<Generator> {
        match self.generator.as_str() {
            "dyad" => Ok(Generator::Dyad),
            "sbm" => Ok(Generator::Sbm { blocks: self.sbm_blocks }),
            "powerlaw" => Ok(Generator::PowerLaw { alpha: self.powerlaw_alpha }),
            other => Err(PsarError::Config(format!("unknown generator `{other}`"))),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 0.2, allow_hyphen_values = true)]
    rho: f64,
    #[arg(long, default_value = "0.3,0.3", value_delimiter = ',', allow_hyphen_values = true)]
    beta: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda2: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda2_x: f64,
    /// Number of trailing covariate columns that carry noise.
    #[arg(long, default_value_t = 1)]
    protected_cols: usize,
    #[arg(long, default_value = "normal")]
    noise_law: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out_data: PathBuf,
    #[arg(long)]
    out_edges: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// CSV with header `node_id,y,x1,...`
    #[arg(long)]
    data: PathBuf,
    /// CSV with header `src,dst` (node ids)
    #[arg(long)]
    edges: PathBuf,
    #[arg(long, default_value = "cle")]
    estimator: String,
    #[arg(long, default_value_t = 0.0)]
    lambda2: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda2_x: f64,
    #[arg(long, default_value_t = 0)]
    protected_cols: usize,
    #[arg(long, default_value = "normal")]
    noise_law: String,
    /// Bootstrap replicates for standard errors (0 = none).
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, default_value = "onestep")]
    bootstrap_mode: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Drop nodes without out-edges instead of failing.
    #[arg(long)]
    drop_isolated: bool,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct McArgs {
    config: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-parameter summary CSV (default: stdout).
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value = "500,1000,2000", value_delimiter = ',')]
    ns: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value = "cle,cls", value_delimiter = ',')]
    estimators: Vec<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn privacy(p: usize, lambda2: f64, lambda2_x: f64, protected: usize, law: &str) -> Result<PrivacyConfig> {
    if protected > p {
        return Err(PsarError::Config(format!("--protected-cols {protected} exceeds {p} covariates")));
    }
    let cfg = PrivacyConfig { lambda2, lambda2_x, p1: p - protected, p2: protected, noise_law: law.parse::<NoiseLaw>()? };
    cfg.validate(p)?;
    Ok(cfg)
}

fn create(path: &PathBuf) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let theta = Theta::new(a.rho, a.beta, a.sigma2);
    theta.validate().map_err(|e| PsarError::Config(e.to_string()))?;
    let cfg = privacy(theta.p(), a.lambda2, a.lambda2_x, a.protected_cols, &a.noise_law)?;
    let adj = a.net.generator()?.generate(a.n, derive_seed(a.seed, &[tag::NETWORK]))?;
    let prep = prepare(&adj)?;
    let w = Arc::new(prep.weights);
    let x = gen_covariates(w.n(), theta.p(), derive_seed(a.seed, &[tag::COVARIATES]));
    let t = simulate_sar(w, &theta, x, derive_seed(a.seed, &[tag::MODEL_ERROR]), cfg.noise_law)?;
    let d = add_privacy_noise(&t, &cfg, derive_seed(a.seed, &[tag::PRIVACY_NOISE]))?;
    let ids: Vec<usize> = (0..d.n()).collect();
    write_data_csv(create(&a.out_data)?, &ids, &d.y_star, &d.x_star)?;
    prep.adjacency.write_edge_csv(create(&a.out_edges)?)?;
    if prep.dropped > 0 {
        eprintln!("dropped {} nodes without out-edges; ids are re-indexed", prep.dropped);
    }
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let kind: EstimatorKind = a.estimator.parse()?;
    let mode: BootstrapMode = a.bootstrap_mode.parse()?;
    if a.bootstrap == 1 {
        return Err(PsarError::Config("--bootstrap needs at least 2 replicates".into()));
    }
    let table = read_data_csv(BufReader::new(File::open(&a.data)?))?;
    let edges = read_edge_list(BufReader::new(File::open(&a.edges)?))?;
    let cfg = privacy(table.x.ncols(), a.lambda2, a.lambda2_x, a.protected_cols, &a.noise_law)?;
    let (d, kept) = assemble_observed(&table, &edges, cfg, a.drop_isolated)?;
    if kept.len() < table.y.len() {
        eprintln!("dropped {} nodes without out-edges", table.y.len() - kept.len());
    }
    harness::single_threaded_kernels();
    let opts = FitOptions::default();
    let mut res = fit_estimator(kind, &d, None, &opts)?;
    if !res.converged {
        return Err(PsarError::MaxIterExceeded(res.iterations));
    }
    if a.bootstrap > 0 {
        let bs = bootstrap_se(&d, &res, a.bootstrap, a.seed, mode, &opts)?;
        res = res.with_se(bs.se, 0.95);
    }
    let json = serde_json::to_string_pretty(&res)?;
    match &a.out {
        Some(p) => writeln!(create(p)?, "{json}")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn mc(a: McArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if a.raw.is_some() {
        cfg.raw_output = a.raw;
    }
    if a.report.is_some() {
        cfg.report_output = a.report;
    }
    let workers = a.workers.unwrap_or_else(rayon::current_num_threads);
    let report = run_mc_with_workers(&cfg, workers)?;
    report.write_outputs()?;
    let summary = report.summary_csv();
    match &a.summary {
        Some(p) => create(p)?.write_all(summary.as_bytes())?,
        None => io::stdout().write_all(summary.as_bytes())?,
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let estimators = a.estimators.iter().map(|s| s.parse()).collect::<Result<Vec<EstimatorKind>>>()?;
    if a.reps == 0 || a.ns.is_empty() {
        return Err(PsarError::Config("need at least one N and one repetition".into()));
    }
    let base = ExperimentConfig {
        generator: a.net.generator()?,
        estimators: estimators.clone(),
        seed: a.seed,
        ..ExperimentConfig::default()
    };
    let rows = bench_timing(&base, &a.ns, a.reps)?;
    let csv = timing_csv(&rows);
    match &a.out {
        Some(p) => create(p)?.write_all(csv.as_bytes())?,
        None => io::stdout().write_all(csv.as_bytes())?,
    }
    if a.ns.len() >= 2 {
        let ns: Vec<f64> = a.ns.iter().map(|&n| n as f64).collect();
        for kind in estimators {
            let t: Vec<f64> = rows.iter().filter(|r| r.estimator == kind).map(|r| r.mean_secs).collect();
            eprintln!("{} log-log slope: {:.2}", kind.name(), loglog_slope(&ns, &t));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match cli.cmd {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Fit(a) => fit(a),
        Cmd::Mc(a) => mc(a),
        Cmd::Bench(a) => bench(a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
