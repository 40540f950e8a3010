use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use rflab::bounds::{bound_report, curve_csv, double_descent_curve, BoundInputs, CurveSpec};
use rflab::conc::{self, ConcReport, GramOptions};
use rflab::features::NoiseFamily;
use rflab::harness::{aggregate, emit_outputs, preset, run_point, run_sweep, ExperimentConfig, PRESETS};
use rflab::rng::seed_stream;
use rflab::spectrum::{make_spectrum, trace_and_rank, DecayKind, DecayParams};
use rflab::{Error, Result};

#[derive(Parser)]
#[command(name = "rflab", version, about = "Noisy random-feature regression laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a spectrum with its trace and effective rank.
    Spectrum(SpectrumArgs),
    /// Risk decomposition for one width and replicate.
    Risk(RiskArgs),
    /// Bound report at one width plus the bound curve over the grid.
    Bounds(BoundsArgs),
    /// Full seeded sweep; writes sweep.csv, manifest.json and bounds_curve.csv.
    Sweep(SweepArgs),
    /// Concentration experiments.
    Conc(ConcArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    FiniteRank,
    Exponential,
    Polynomial,
}

impl From<Kind> for DecayKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::FiniteRank => DecayKind::FiniteRank,
            Kind::Exponential => DecayKind::Exponential,
            Kind::Polynomial => DecayKind::Polynomial,
        }
    }
}

#[derive(Args)]
struct SpectrumArgs {
    #[arg(long, value_enum, default_value = "polynomial")]
    kind: Kind,
    #[arg(long, default_value_t = 2000)]
    p: usize,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    omega1: Option<f64>,
    /// number of leading eigenvalues to print
    #[arg(long, default_value_t = 10)]
    head: usize,
}

/// Config file or preset, then flag overrides.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config (a manifest.json is accepted too)
    #[arg(long)]
    config: Option<PathBuf>,
    /// named preset used when no config file is given
    #[arg(long, default_value = "double-descent")]
    preset: String,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    /// comma-separated widths
    #[arg(long, value_delimiter = ',')]
    s_grid: Option<Vec<usize>>,
    /// polynomial decay exponent
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    sigma_sq: Option<f64>,
    /// realizable-clean, realizable-noisy or unrealizable
    #[arg(long)]
    target_mode: Option<String>,
    #[arg(long)]
    test_points: Option<usize>,
    #[arg(long)]
    label_redraws: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    record_timing: bool,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self, seed: Option<u64>) -> Result<ExperimentConfig> {
        let mut value = match &self.config {
            Some(path) => serde_json::from_str::<Value>(&std::fs::read_to_string(path)?)?,
            None => {
                let cfg = preset(&self.preset).ok_or_else(|| {
                    Error::Config(vec![format!("unknown preset `{}`; known: {}", self.preset, PRESETS.join(", "))])
                })?;
                serde_json::to_value(cfg)?
            }
        };
        if value.get("artifact_version").is_some() {
            if let Some(inner) = value.get("config") {
                value = inner.clone();
            }
        }
        let obj = value.as_object_mut().ok_or_else(|| Error::Config(vec!["config must be a JSON object".into()]))?;
        let mut set = |key: &str, v: Value| {
            obj.insert(key.to_string(), v);
        };
        if let Some(v) = self.n {
            set("n", json!(v));
        }
        if let Some(v) = self.p {
            set("p", json!(v));
        }
        if let Some(v) = &self.s_grid {
            set("s_grid", json!(v));
        }
        if let Some(g) = self.gamma {
            set("spectrum", json!({ "kind": "polynomial", "gamma": g }));
        }
        if let Some(v) = self.alpha {
            set("alpha", json!(v));
        }
        if let Some(v) = self.sigma_sq {
            set("sigma_sq", json!(v));
        }
        if let Some(v) = &self.target_mode {
            set("target_mode", json!(v));
        }
        if let Some(v) = self.test_points {
            set("test_points", json!(v));
        }
        if let Some(v) = self.label_redraws {
            set("label_redraws", json!(v));
        }
        if let Some(v) = self.replicates {
            set("ensemble_replicates", json!(v));
        }
        if let Some(v) = self.workers {
            set("workers", json!(v));
        }
        if self.record_timing {
            set("record_timing", json!(true));
        }
        if let Some(v) = &self.out {
            set("output_dir", json!(v));
        }
        if let Some(v) = seed {
            set("master_seed", json!(v));
        }
        ExperimentConfig::from_json(&value.to_string())
    }
}

#[derive(Args)]
struct RiskArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    s: usize,
    #[arg(long, default_value_t = 0)]
    replicate: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct BoundsArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// width of the single-point report; the first grid width when absent
    #[arg(long)]
    s: Option<usize>,
    /// also write the curve as CSV
    #[arg(long)]
    curve_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: u64,
    /// print the resolved config and exit
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Gaussian,
    Rademacher,
    Uniform,
}

impl From<Family> for NoiseFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Gaussian => NoiseFamily::Gaussian,
            Family::Rademacher => NoiseFamily::Rademacher,
            Family::Uniform => NoiseFamily::Uniform,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Mgf,
    Norm,
    Subexp,
    Gram,
    Cross,
    Noisy,
}

#[derive(Args)]
struct ConcArgs {
    #[arg(value_enum)]
    experiment: Experiment,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    s: usize,
    #[arg(long, value_enum, default_value = "gaussian")]
    family: Family,
    /// comma-separated weights; `i^-2` for `i = 1..=n` when absent
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.5)]
    sigma0_sq: f64,
    /// tail offset for the gram experiment
    #[arg(long, default_value_t = 0)]
    k: usize,
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn cmd_spectrum(a: &SpectrumArgs) -> Result<ExitCode> {
    let params = DecayParams { d: a.d, gamma: a.gamma, omega1: a.omega1 };
    let spectrum = make_spectrum(a.kind.into(), a.p, params)?;
    let (trace, rank) = trace_and_rank(&spectrum)?;
    let head: Vec<f64> = spectrum.eigenvalues().iter().take(a.head).copied().collect();
    print_json(&json!({
        "kind": spectrum.kind(),
        "p": spectrum.p(),
        "params": spectrum.params(),
        "trace": trace,
        "operator_norm": spectrum.op_norm(),
        "effective_rank": rank,
        "head": head,
    }));
    Ok(ExitCode::SUCCESS)
}

fn cmd_risk(a: &RiskArgs) -> Result<ExitCode> {
    let cfg = a.config.resolve(Some(a.seed))?;
    let row = run_point(&cfg, a.s, a.replicate)?;
    print_json(&row);
    Ok(if row.error.is_some() { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn cmd_bounds(a: &BoundsArgs) -> Result<ExitCode> {
    let cfg = a.config.resolve(None)?;
    let spectrum = cfg.spectrum.build(cfg.p)?;
    let s = a.s.unwrap_or(cfg.s_grid[0]);
    let inputs = BoundInputs {
        n: cfg.n,
        s,
        p: cfg.p,
        lambda_hat: spectrum.eigenvalues().to_vec(),
        sigma0_sq: (s as f64).powf(-cfg.alpha),
        sigma_sq: cfg.sigma_sq,
        trace_sigma: spectrum.trace(),
        op_norm_sigma: spectrum.op_norm(),
        lambda_w: cfg.p as f64,
        pi_norm: 1.0,
        beta_norm: cfg.target_norm,
        delta: cfg.delta,
        constants: cfg.constants,
        inverse_noise_factor: false,
    };
    let report = bound_report(&inputs)?;
    let curve = double_descent_curve(&CurveSpec {
        n: cfg.n,
        p: cfg.p,
        spectrum: &spectrum,
        alpha: cfg.alpha,
        sigma_sq: cfg.sigma_sq,
        s_grid: &cfg.s_grid,
        delta: cfg.delta,
        constants: cfg.constants,
        lambda_hat: None,
    })?;
    if let Some(path) = &a.curve_csv {
        std::fs::write(path, curve_csv(&curve))?;
    }
    print_json(&json!({ "report": report, "curve": curve }));
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(a: &SweepArgs) -> Result<ExitCode> {
    let cfg = a.config.resolve(Some(a.seed))?;
    if a.print_config {
        println!("{}", cfg.to_json());
        return Ok(ExitCode::SUCCESS);
    }
    let rows = run_sweep(&cfg)?;
    let paths = emit_outputs(&rows, &cfg, &cfg.output_dir)?;
    println!("{:>8} {:>6} {:>12} {:>12} {:>12} {:>12}", "s", "ok", "R", "R_se", "B", "V");
    for w in aggregate(&rows) {
        let se = w.risk.stderr.map_or_else(|| "-".to_string(), |v| format!("{v:.4e}"));
        println!(
            "{:>8} {:>6} {:>12.4e} {:>12} {:>12.4e} {:>12.4e}",
            w.s, w.replicates, w.risk.mean, se, w.bias.mean, w.variance.mean
        );
    }
    eprintln!("wrote {}, {}, {}", paths.sweep.display(), paths.manifest.display(), paths.bounds_curve.display());
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} rows failed; see manifest.json", rows.len());
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_conc(a: &ConcArgs) -> Result<ExitCode> {
    let mut rng = seed_stream(a.seed, &[]);
    let lambda = a.lambda.clone().unwrap_or_else(|| (1..=a.n).map(|i| 1.0 / (i * i) as f64).collect());
    let report: ConcReport = match a.experiment {
        Experiment::Mgf => conc::mgf_product_check(a.t, a.trials.unwrap_or(100_000), &mut rng)?,
        Experiment::Norm => conc::norm_concentration_check(a.n, a.family.into(), a.trials.unwrap_or(10_000), &mut rng)?,
        Experiment::Subexp => conc::weighted_subexp_sum_check(&lambda, a.trials.unwrap_or(10_000), &mut rng)?,
        Experiment::Gram => {
            let opts = GramOptions { k: a.k, t: None };
            conc::gram_eigen_experiment(&lambda, a.n, a.s, a.trials.unwrap_or(200), opts, &mut rng)?
        }
        Experiment::Cross => conc::cross_outer_norm_check(&lambda, a.n, a.trials.unwrap_or(200), &mut rng)?,
        Experiment::Noisy => {
            conc::noisy_spectrum_identity_check(&lambda, a.sigma0_sq, a.n, a.s, a.trials.unwrap_or(500), &mut rng)?
        }
    };
    print_json(&report);
    Ok(if report.verdict.is_failure() { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Spectrum(a) => cmd_spectrum(a),
        Command::Risk(a) => cmd_risk(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Conc(a) => cmd_conc(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
