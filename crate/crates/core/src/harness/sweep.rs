use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::{regime_classify, thm1_bias_bound, BoundInputs, Regime};
use crate::error::{invalid, Result};
use crate::estimator::projector_diag_from_svd;
use crate::features::{make_noise_spec, sample_weights, FeatureEnsemble, TestFeatures, TestNoise};
use crate::linalg::top_gram_eigenvalue;
use crate::risk::{decompose_problem, make_target, LabelModel, RiskProblem, TargetSpec};
use crate::rng::{derive_seed, stream_from_key, Purpose};
use crate::spectrum::{empirical_covariance_cols, sample_covariates, CovarianceSource, Spectrum};
use crate::stats::{mean_sd, Estimate};

use super::config::ExperimentConfig;

/// Stream keys of one `(s, replicate)` row.
///
/// Covariates, weights and noise are keyed by replicate only, so widths of the
/// same replicate share covariates and nested weight and noise prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RowSeeds {
    pub covariates: u64,
    pub test_covariates: u64,
    pub weights: u64,
    pub train_noise: u64,
    pub test_noise: u64,
    pub target: u64,
    pub label_noise: u64,
}

impl RowSeeds {
    pub fn new(master: u64, s: usize, replicate: usize) -> Self {
        let r = replicate as u64;
        let per_rep = |p: Purpose| derive_seed(master, &[r, p.code()]);
        let per_row = |p: Purpose| derive_seed(master, &[r, p.code(), s as u64]);
        Self {
            covariates: per_rep(Purpose::Covariates),
            test_covariates: per_rep(Purpose::TestCovariates),
            weights: per_rep(Purpose::Weights),
            train_noise: per_rep(Purpose::TrainNoise),
            test_noise: per_rep(Purpose::TestNoise),
            target: per_row(Purpose::Target),
            label_noise: per_row(Purpose::LabelNoise),
        }
    }

    pub fn as_map(&self) -> BTreeMap<&'static str, u64> {
        BTreeMap::from([
            (Purpose::Covariates.name(), self.covariates),
            (Purpose::TestCovariates.name(), self.test_covariates),
            (Purpose::Weights.name(), self.weights),
            (Purpose::TrainNoise.name(), self.train_noise),
            (Purpose::TestNoise.name(), self.test_noise),
            (Purpose::Target.name(), self.target),
            (Purpose::LabelNoise.name(), self.label_noise),
        ])
    }
}

/// One `(s, replicate)` measurement. Failed rows carry NaN values and the
/// error text.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord {
    pub s: usize,
    pub replicate: usize,
    pub sigma0_sq: f64,
    pub k_star: Option<usize>,
    pub bias: Estimate,
    pub variance: Estimate,
    pub misspec: Estimate,
    pub risk: Estimate,
    /// NaN when the tail-index hypothesis fails
    pub bias_bound: f64,
    pub variance_bound: f64,
    pub regime: Regime,
    /// NaN unless timing is recorded
    pub wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SweepRecord {
    fn failed(s: usize, replicate: usize, sigma0_sq: f64, regime: Regime, error: String) -> Self {
        let nan = Estimate { value: f64::NAN, stderr: f64::NAN };
        Self {
            s,
            replicate,
            sigma0_sq,
            k_star: None,
            bias: nan,
            variance: nan,
            misspec: nan,
            risk: nan,
            bias_bound: f64::NAN,
            variance_bound: f64::NAN,
            regime,
            wall_ms: f64::NAN,
            error: Some(error),
        }
    }
}

/// Per-replicate draws shared by every width.
pub struct ReplicateContext {
    pub replicate: usize,
    pub spectrum: Spectrum,
    /// `p x n`
    pub phi_train: DMatrix<f64>,
    /// `m x p`
    pub phi_test: DMatrix<f64>,
    /// empirical eigenvalues of the training eigenfeatures, length `p`
    pub lambda_hat: Vec<f64>,
}

impl ReplicateContext {
    pub fn new(cfg: &ExperimentConfig, master: u64, replicate: usize) -> Result<Self> {
        let spectrum = cfg.spectrum.build(cfg.p)?;
        let seeds = RowSeeds::new(master, 0, replicate);
        let xs = sample_covariates(cfg.mode, cfg.n, cfg.p, &mut stream_from_key(seeds.covariates))?;
        let xt = sample_covariates(cfg.mode, cfg.test_points, cfg.p, &mut stream_from_key(seeds.test_covariates))?;
        let phi_train = xs.phi_columns(&spectrum)?;
        let phi_test = xt.phi_columns(&spectrum)?.transpose();
        let lambda_hat = empirical_covariance_cols(&phi_train, CovarianceSource::Empirical)?.eigenvalues;
        Ok(Self { replicate, spectrum, phi_train, phi_test, lambda_hat })
    }
}

fn master_seed(cfg: &ExperimentConfig) -> Result<u64> {
    cfg.master_seed.ok_or_else(|| invalid("master_seed", "a sweep needs an explicit master seed"))
}

fn measure(cfg: &ExperimentConfig, ctx: &ReplicateContext, seeds: &RowSeeds, s: usize) -> Result<SweepRecord> {
    let weights = sample_weights(cfg.p, s, &mut stream_from_key(seeds.weights))?;
    let noise = make_noise_spec(cfg.noise_family, cfg.alpha, s)?;
    let ensemble =
        FeatureEnsemble::noisy(weights, ctx.phi_train.clone(), noise, &mut stream_from_key(seeds.train_noise))?;
    let spec = TargetSpec { mode: cfg.target_mode, norm: cfg.target_norm, misspec_energy: cfg.misspec_energy, noise: cfg.target_noise };
    let target = make_target(&spec, &ensemble, &ctx.spectrum, &mut stream_from_key(seeds.target))?;
    let test_noise = match cfg.test_noise {
        TestNoise::Fresh => Some((noise, seeds.test_noise)),
        TestNoise::Clean => None,
    };
    let test = TestFeatures::new(&ctx.phi_test, &ensemble.weights, test_noise)?;
    let problem = RiskProblem::new(&ensemble, &target, &test, None)?;
    let label = LabelModel::new(cfg.sigma_sq)?;
    let dec = decompose_problem(&problem, &ensemble, &test, &label, cfg.label_redraws, seeds.label_noise)?;

    let inputs = BoundInputs {
        n: cfg.n,
        s,
        p: cfg.p,
        lambda_hat: ctx.lambda_hat.clone(),
        sigma0_sq: noise.sigma0_sq,
        sigma_sq: cfg.sigma_sq,
        trace_sigma: ctx.spectrum.trace(),
        op_norm_sigma: ctx.spectrum.op_norm(),
        lambda_w: top_gram_eigenvalue(ensemble.weights.matrix()),
        pi_norm: projector_diag_from_svd(&problem.pinv).pi_norm,
        beta_norm: cfg.target_norm,
        delta: cfg.delta,
        constants: cfg.constants,
        inverse_noise_factor: false,
    };
    Ok(SweepRecord {
        s,
        replicate: ctx.replicate,
        sigma0_sq: noise.sigma0_sq,
        k_star: inputs.k_star(),
        bias: dec.bias,
        variance: dec.variance,
        misspec: dec.misspec,
        risk: dec.total,
        bias_bound: thm1_bias_bound(&inputs).unwrap_or(f64::NAN),
        variance_bound: inputs.variance_bound(),
        regime: regime_classify(cfg.n.max(2), s)?.regime,
        wall_ms: f64::NAN,
        error: None,
    })
}

fn run_row(cfg: &ExperimentConfig, ctx: &ReplicateContext, master: u64, s: usize) -> SweepRecord {
    let start = Instant::now();
    let seeds = RowSeeds::new(master, s, ctx.replicate);
    let mut rec = measure(cfg, ctx, &seeds, s).unwrap_or_else(|e| {
        let sigma0_sq = (s as f64).powf(-cfg.alpha);
        let regime = regime_classify(cfg.n.max(2), s).map(|r| r.regime).unwrap_or(Regime::Classical);
        SweepRecord::failed(s, ctx.replicate, sigma0_sq, regime, e.to_string())
    });
    if cfg.record_timing {
        rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    }
    rec
}

/// A single row, computed from the config, seed, width and replicate alone.
pub fn run_point(cfg: &ExperimentConfig, s: usize, replicate: usize) -> Result<SweepRecord> {
    cfg.validate()?;
    let master = master_seed(cfg)?;
    let ctx = ReplicateContext::new(cfg, master, replicate)?;
    Ok(run_row(cfg, &ctx, master, s))
}

/// Every `(s, replicate)` row, ordered by width then replicate. Replicates run
/// one after another; the widths of a replicate run on the worker pool.
/// Row failures are recorded in the row and do not stop the sweep.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRecord>> {
    cfg.validate()?;
    let master = master_seed(cfg)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| invalid("workers", e.to_string()))?;
    let mut rows = Vec::with_capacity(cfg.s_grid.len() * cfg.ensemble_replicates);
    for replicate in 0..cfg.ensemble_replicates {
        match ReplicateContext::new(cfg, master, replicate) {
            Ok(ctx) => {
                let batch: Vec<SweepRecord> =
                    pool.install(|| cfg.s_grid.par_iter().map(|&s| run_row(cfg, &ctx, master, s)).collect());
                rows.extend(batch);
            }
            Err(e) => {
                for &s in &cfg.s_grid {
                    let regime = regime_classify(cfg.n.max(2), s).map(|r| r.regime).unwrap_or(Regime::Classical);
                    rows.push(SweepRecord::failed(s, replicate, (s as f64).powf(-cfg.alpha), regime, e.to_string()));
                }
            }
        }
    }
    rows.sort_by_key(|r| (r.s, r.replicate));
    Ok(rows)
}

/// Mean over replicates; the standard error is absent for a single value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stderr: Option<f64>,
}

impl Aggregate {
    fn of(xs: &[f64]) -> Self {
        let (mean, sd) = mean_sd(xs);
        let stderr = (xs.len() > 1).then(|| sd / (xs.len() as f64).sqrt());
        Self { mean, stderr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WidthSummary {
    pub s: usize,
    /// successful rows
    pub replicates: usize,
    pub failed: usize,
    pub bias: Aggregate,
    pub variance: Aggregate,
    pub misspec: Aggregate,
    pub risk: Aggregate,
}

/// Per-width summaries over the successful rows, in increasing `s`.
pub fn aggregate(records: &[SweepRecord]) -> Vec<WidthSummary> {
    let mut by_s: BTreeMap<usize, Vec<&SweepRecord>> = BTreeMap::new();
    for r in records {
        by_s.entry(r.s).or_default().push(r);
    }
    by_s.into_iter()
        .map(|(s, mut rows)| {
            rows.sort_by_key(|r| r.replicate);
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            let ok: Vec<&SweepRecord> = rows.into_iter().filter(|r| r.error.is_none()).collect();
            let col = |f: fn(&SweepRecord) -> f64| Aggregate::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            WidthSummary {
                s,
                replicates: ok.len(),
                failed,
                bias: col(|r| r.bias.value),
                variance: col(|r| r.variance.value),
                misspec: col(|r| r.misspec.value),
                risk: col(|r| r.risk.value),
            }
        })
        .collect()
}
