//! Seeded Monte Carlo experiments for the concentration inequalities behind the
//! bounds.
//!
//! Each experiment draws one key from the caller's stream and runs trial `i` on
//! the substream `derive_seed(key, [i])`, so results depend only on that key.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{invalid, Result};
use crate::features::{sample_weights, FeatureEnsemble, NoiseFamily, NoiseSpec};
use crate::linalg::{sym_eigenvalues_desc, top_gram_eigenvalue};
use crate::rng::{derive_seed, stream_from_key, Stream};
use crate::stats::{mean_sd, quantile_sorted};

/// Minimum trial count for experiments that assert.
pub const MIN_ASSERT_TRIALS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    AssertPass,
    AssertFail,
    ReportOnly,
}

impl Verdict {
    fn of(pass: bool) -> Self {
        if pass {
            Verdict::AssertPass
        } else {
            Verdict::AssertFail
        }
    }

    pub fn is_failure(self) -> bool {
        self == Verdict::AssertFail
    }
}

/// Outcome of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcReport {
    pub name: String,
    pub params: Value,
    pub trials: usize,
    pub stats: BTreeMap<String, f64>,
    /// bound the asserted statistic is compared against, if any
    pub stated_bound: Option<f64>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ConcReport {
    fn new(name: &str, params: Value, trials: usize) -> Self {
        Self {
            name: name.to_string(),
            params,
            trials,
            stats: BTreeMap::new(),
            stated_bound: None,
            verdict: Verdict::ReportOnly,
            notes: Vec::new(),
        }
    }

    fn stat(&mut self, key: &str, value: f64) {
        self.stats.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.stats.get(key).copied()
    }
}

fn trial_streams<R: Rng + ?Sized>(rng: &mut R) -> impl Fn(usize) -> Stream {
    let key: u64 = rng.random();
    move |i| stream_from_key(derive_seed(key, &[i as u64]))
}

fn check_assert_trials(trials: usize) -> Result<()> {
    if trials < MIN_ASSERT_TRIALS {
        return Err(invalid("trials", format!("asserting experiments need at least {MIN_ASSERT_TRIALS}, got {trials}")));
    }
    Ok(())
}

fn check_sequence(name: &'static str, lambda: &[f64]) -> Result<()> {
    if lambda.iter().any(|&l| !l.is_finite() || l < 0.0) {
        return Err(invalid(name, "entries must be finite and non-negative"));
    }
    if lambda.windows(2).any(|w| w[1] > w[0]) {
        return Err(invalid(name, "must be non-increasing"));
    }
    Ok(())
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn exceedance(values: &[f64], level: f64) -> f64 {
    values.iter().filter(|&&v| v > level).count() as f64 / values.len() as f64
}

/// Monte Carlo mean of `exp(t x y)` for independent standard normals against
/// `1 / sqrt(1 - t^2)`. Passes when within five standard errors.
pub fn mgf_product_check<R: Rng + ?Sized>(t: f64, trials: usize, rng: &mut R) -> Result<ConcReport> {
    if !(t.abs() < 1.0) {
        return Err(invalid("t", format!("need |t| < 1 for a finite moment generating function, got {t}")));
    }
    if trials < 10_000 {
        return Err(invalid("trials", format!("need at least 10000, got {trials}")));
    }
    let stream = trial_streams(rng);
    let values: Vec<f64> = (0..trials)
        .map(|i| {
            let mut r = stream(i);
            let x: f64 = r.sample(StandardNormal);
            let y: f64 = r.sample(StandardNormal);
            (t * x * y).exp()
        })
        .collect();
    let (m, sd) = mean_sd(&values);
    let stderr = sd / (trials as f64).sqrt();
    let target = 1.0 / (1.0 - t * t).sqrt();
    let mut rep = ConcReport::new("mgf_product", json!({ "t": t }), trials);
    rep.stat("mean", m);
    rep.stat("stderr", stderr);
    rep.stat("target", target);
    rep.stat("z_score", if stderr > 0.0 { (m - target) / stderr } else { 0.0 });
    rep.stated_bound = Some(target);
    rep.verdict = Verdict::of((m - target).abs() <= 5.0 * stderr);
    if t.abs() >= 0.5 {
        rep.notes.push("exp(txy) has infinite variance for |t| >= 0.5; the stderr is a sample estimate".into());
    }
    Ok(rep)
}

/// Distribution of `|w|^2 / n` for `w` with i.i.d. unit-variance entries.
/// Passes when the 0.999 quantile is at most `1 + 8 / sqrt(n)`.
pub fn norm_concentration_check<R: Rng + ?Sized>(
    n: usize,
    family: NoiseFamily,
    trials: usize,
    rng: &mut R,
) -> Result<ConcReport> {
    if n < 10 {
        return Err(invalid("n", format!("need n >= 10, got {n}")));
    }
    check_assert_trials(trials)?;
    let stream = trial_streams(rng);
    let values: Vec<f64> = (0..trials)
        .map(|i| {
            let mut r = stream(i);
            (0..n).map(|_| family.draw(&mut r).powi(2)).sum::<f64>() / n as f64
        })
        .collect();
    let (m, sd) = mean_sd(&values);
    let v = sorted(values);
    let bound = 1.0 + 8.0 / (n as f64).sqrt();
    let q999 = quantile_sorted(&v, 0.999);
    let mut rep = ConcReport::new("norm_concentration", json!({ "n": n, "family": family }), trials);
    rep.stat("mean", m);
    rep.stat("stderr", sd / (trials as f64).sqrt());
    rep.stat("q01", quantile_sorted(&v, 0.01));
    rep.stat("q50", quantile_sorted(&v, 0.5));
    rep.stat("q99", quantile_sorted(&v, 0.99));
    rep.stat("q999", q999);
    rep.stat("spread", quantile_sorted(&v, 0.99) - quantile_sorted(&v, 0.01));
    rep.stat("min", v[0]);
    rep.stat("max", v[v.len() - 1]);
    rep.stated_bound = Some(bound);
    rep.verdict = Verdict::of(q999 <= bound);
    Ok(rep)
}

/// Tail of `|sum_i lambda_i (w_i^2 - 1)|` against `b max(lambda_1 t, sqrt(t sum lambda^2))`
/// at `t = ln 40`. The `b = 1` exceedance is reported against its nominal `2 e^{-t}`;
/// the `b = 4` exceedance must stay at or below 0.25.
pub fn weighted_subexp_sum_check<R: Rng + ?Sized>(lambda: &[f64], trials: usize, rng: &mut R) -> Result<ConcReport> {
    weighted_subexp_sum_check_at(lambda, (2.0f64 / 0.05).ln(), trials, rng)
}

/// [`weighted_subexp_sum_check`] at a chosen `t > 0`.
pub fn weighted_subexp_sum_check_at<R: Rng + ?Sized>(
    lambda: &[f64],
    t: f64,
    trials: usize,
    rng: &mut R,
) -> Result<ConcReport> {
    check_sequence("lambda", lambda)?;
    if !(t > 0.0) {
        return Err(invalid("t", format!("must be positive, got {t}")));
    }
    check_assert_trials(trials)?;
    let stream = trial_streams(rng);
    let values: Vec<f64> = (0..trials)
        .map(|i| {
            let mut r = stream(i);
            lambda
                .iter()
                .map(|&l| {
                    let w: f64 = r.sample(StandardNormal);
                    l * (w * w - 1.0)
                })
                .sum::<f64>()
        })
        .collect();
    let (m, sd) = mean_sd(&values);
    let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let l1 = lambda.first().copied().unwrap_or(0.0);
    let l2: f64 = lambda.iter().map(|l| l * l).sum();
    let shape = (l1 * t).max((t * l2).sqrt());
    let b4 = exceedance(&abs, 4.0 * shape);
    let mut rep = ConcReport::new("weighted_subexp_sum", json!({ "lambda": lambda, "t": t }), trials);
    rep.stat("mean", m);
    rep.stat("sd", sd);
    rep.stat("shape", shape);
    rep.stat("nominal_tail", 2.0 * (-t).exp());
    rep.stat("exceedance_b1", exceedance(&abs, shape));
    rep.stat("exceedance_b4", b4);
    rep.stated_bound = Some(0.25);
    rep.verdict = Verdict::of(b4 <= 0.25);
    Ok(rep)
}

/// Options for [`gram_eigen_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GramOptions {
    /// drop the first `k` weights (tail operator)
    pub k: usize,
    /// deviation parameter of the stated interval; `ln 40` when `None`
    pub t: Option<f64>,
}

/// Report-only spectrum of `A = sum_i lambda_i w_i w_i^T` with `w_i` standard
/// normal in dimension `s >= n`.
///
/// Reports the extreme eigenvalues, the interval
/// `sum lambda +- Lambda` with
/// `Lambda = b (lambda_1 (t + n ln 9) + sqrt((t + n ln 9) sum lambda^2))` at `b = 1`,
/// the smallest `b` covering the observed extremes at level `1 - 2e^{-t}`, and the
/// mean ratios `mu_i / (lambda_i s)`.
pub fn gram_eigen_experiment<R: Rng + ?Sized>(
    lambda_hat: &[f64],
    n: usize,
    s: usize,
    trials: usize,
    opts: GramOptions,
    rng: &mut R,
) -> Result<ConcReport> {
    check_sequence("lambda_hat", lambda_hat)?;
    if n == 0 || lambda_hat.len() < n {
        return Err(invalid("n", format!("need 1 <= n <= {} weights, got {n}", lambda_hat.len())));
    }
    if s < n {
        return Err(invalid("s", format!("need s >= n = {n}, got {s}")));
    }
    if opts.k >= n {
        return Err(invalid("k", format!("need k < n = {n}, got {}", opts.k)));
    }
    if trials == 0 {
        return Err(invalid("trials", "need at least one trial"));
    }
    let lam = &lambda_hat[opts.k..n];
    let terms = lam.len();
    let t = opts.t.unwrap_or((2.0f64 / 0.05).ln());
    let sum: f64 = lam.iter().sum();
    let sum_sq: f64 = lam.iter().map(|l| l * l).sum();
    let tn = t + n as f64 * 9f64.ln();
    let half_width = lam[0] * tn + (tn * sum_sq).sqrt();

    let stream = trial_streams(rng);
    let mut top = Vec::with_capacity(trials);
    let mut bottom = Vec::with_capacity(trials);
    let mut cond = Vec::with_capacity(trials);
    let mut ratio_sums = vec![0.0; terms];
    for i in 0..trials {
        let mut r = stream(i);
        // columns are sqrt(lambda_i) w_i; the nonzero spectrum of A is that of G = C^T C
        let c = DMatrix::from_fn(s, terms, |_, j| lam[j].sqrt() * r.sample::<f64, _>(StandardNormal));
        let mu = sym_eigenvalues_desc(&c.tr_mul(&c));
        top.push(mu[0]);
        bottom.push(mu[terms - 1]);
        cond.push(mu[0] / mu[terms - 1]);
        for (j, acc) in ratio_sums.iter_mut().enumerate() {
            *acc += mu[j] / (lam[j] * s as f64);
        }
    }
    let deviation: Vec<f64> =
        top.iter().zip(&bottom).map(|(hi, lo)| (hi - sum).max(sum - lo) / half_width).collect();
    let level = (1.0 - 2.0 * (-t).exp()).max(0.0);
    let b_fit = quantile_sorted(&sorted(deviation), level);

    let mut rep = ConcReport::new(
        "gram_eigen",
        json!({ "lambda_hat": lambda_hat, "n": n, "s": s, "k": opts.k, "t": t }),
        trials,
    );
    rep.notes.push(
        "n weighted rank-one terms in dimension s >= n; the interval is centred on the weight sum \
         while the eigenvalues scale like lambda_i * s, so both centrings are reported"
            .into(),
    );
    let (top_mean, top_sd) = mean_sd(&top);
    let (bot_mean, bot_sd) = mean_sd(&bottom);
    let root = (trials as f64).sqrt();
    rep.stat("mu_top_mean", top_mean);
    rep.stat("mu_top_stderr", top_sd / root);
    rep.stat("mu_bottom_mean", bot_mean);
    rep.stat("mu_bottom_stderr", bot_sd / root);
    let ts = sorted(top);
    let bs = sorted(bottom);
    rep.stat("mu_top_q05", quantile_sorted(&ts, 0.05));
    rep.stat("mu_top_q95", quantile_sorted(&ts, 0.95));
    rep.stat("mu_bottom_q05", quantile_sorted(&bs, 0.05));
    rep.stat("mu_bottom_q95", quantile_sorted(&bs, 0.95));
    rep.stat("condition_median", quantile_sorted(&sorted(cond), 0.5));
    rep.stat("weight_sum", sum);
    rep.stat("interval_half_width", half_width);
    rep.stat("interval_lower", sum - half_width);
    rep.stat("interval_upper", sum + half_width);
    rep.stat("b_fit", b_fit);
    for (j, acc) in ratio_sums.iter().enumerate() {
        rep.stat(&format!("ratio_{:03}", j + 1), acc / trials as f64);
    }
    Ok(rep)
}

/// Operator norm of `A = sum_i lambda_i w_i u_i^T` with `w_i, u_i` standard normal
/// in dimension `n`. Passes when the 0.99 quantile of `|A| / n` is at most
/// `8 sqrt(sum lambda^2) + lambda_1`; for `n = 1` the scalar tail at `b = 4`,
/// `t = ln 40` must also exceed at most a quarter of the time.
pub fn cross_outer_norm_check<R: Rng + ?Sized>(
    lambda: &[f64],
    n: usize,
    trials: usize,
    rng: &mut R,
) -> Result<ConcReport> {
    if lambda.iter().any(|&l| !l.is_finite() || l < 0.0) {
        return Err(invalid("lambda", "entries must be finite and non-negative"));
    }
    if lambda.windows(2).any(|w| w[1] * w[1] > w[0] * w[0]) {
        return Err(invalid("lambda", "squares must be non-increasing"));
    }
    if n == 0 {
        return Err(invalid("n", "must be positive"));
    }
    check_assert_trials(trials)?;
    let terms = lambda.len();
    let stream = trial_streams(rng);
    let ratios: Vec<f64> = (0..trials)
        .map(|i| {
            if terms == 0 {
                return 0.0;
            }
            let mut r = stream(i);
            let w = DMatrix::from_fn(n, terms, |_, j| lambda[j] * r.sample::<f64, _>(StandardNormal));
            let u = DMatrix::from_fn(n, terms, |_, _| r.sample::<f64, _>(StandardNormal));
            let a = w * u.transpose();
            top_gram_eigenvalue(&a).max(0.0).sqrt() / n as f64
        })
        .collect();
    let l1 = lambda.first().copied().unwrap_or(0.0);
    let l2: f64 = lambda.iter().map(|l| l * l).sum();
    let bound = 8.0 * l2.sqrt() + l1;
    let (m, sd) = mean_sd(&ratios);
    let v = sorted(ratios);
    let q99 = quantile_sorted(&v, 0.99);
    let mut rep = ConcReport::new("cross_outer_norm", json!({ "lambda": lambda, "n": n }), trials);
    rep.stat("mean", m);
    rep.stat("stderr", sd / (trials as f64).sqrt());
    rep.stat("q50", quantile_sorted(&v, 0.5));
    rep.stat("q99", q99);
    rep.stat("max", v[v.len() - 1]);
    rep.stated_bound = Some(bound);
    let mut pass = q99 <= bound;
    if n == 1 {
        let t = (2.0f64 / 0.05).ln();
        let shape = l1 * t + (t * l2).sqrt();
        let tail = exceedance(&v, 4.0 * shape);
        rep.stat("scalar_shape", shape);
        rep.stat("scalar_exceedance_b4", tail);
        pass &= tail <= 0.25;
    }
    rep.verdict = Verdict::of(pass);
    Ok(rep)
}

/// Haar-distributed orthogonal matrix.
fn random_orthogonal(dim: usize, rng: &mut Stream) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Top eigenvalues of `(s/n) Z_xi^T Z_xi`, built from real random features with
/// Gaussian feature noise, against those of `sum_i (lambda_i + sigma0^2/n) w_i w_i^T`.
///
/// The eigenfeatures are `sqrt(n) Q diag(sqrt(lambda_hat))` for a random
/// orthogonal `Q`, so their empirical covariance has spectrum `lambda_hat`.
/// Passes when the mean of each of the top five eigenvalues agrees within three
/// joint standard errors.
pub fn noisy_spectrum_identity_check<R: Rng + ?Sized>(
    lambda_hat: &[f64],
    sigma0_sq: f64,
    n: usize,
    s: usize,
    trials: usize,
    rng: &mut R,
) -> Result<ConcReport> {
    check_sequence("lambda_hat", lambda_hat)?;
    if n == 0 || lambda_hat.len() < n {
        return Err(invalid("n", format!("need 1 <= n <= {} eigenvalues, got {n}", lambda_hat.len())));
    }
    if !(sigma0_sq >= 0.0) || !sigma0_sq.is_finite() {
        return Err(invalid("sigma0_sq", format!("must be finite and non-negative, got {sigma0_sq}")));
    }
    if s == 0 {
        return Err(invalid("s", "must be positive"));
    }
    check_assert_trials(trials)?;
    let lam = &lambda_hat[..n];
    let shifted: Vec<f64> = lam.iter().map(|l| l + sigma0_sq / n as f64).collect();
    let top = n.min(s).min(5);
    let scale = s as f64 / n as f64;
    let noise = NoiseSpec::with_level(NoiseFamily::Gaussian, sigma0_sq, s)?;

    let stream = trial_streams(rng);
    let mut feat = vec![Vec::with_capacity(trials); top];
    let mut direct = vec![Vec::with_capacity(trials); top];
    for i in 0..trials {
        let mut r = stream(i);
        let q = random_orthogonal(n, &mut r);
        let phi = DMatrix::from_fn(n, n, |a, b| (n as f64).sqrt() * q[(a, b)] * lam[b].sqrt());
        let w = sample_weights(n, s, &mut r)?;
        let ens = FeatureEnsemble::noisy(w, phi, noise, &mut r)?;
        let z = ens.design();
        let mu = sym_eigenvalues_desc(&((z * z.transpose()) * scale));

        let c = DMatrix::from_fn(s, n, |_, j| shifted[j].sqrt() * r.sample::<f64, _>(StandardNormal));
        let nu = sym_eigenvalues_desc(&c.tr_mul(&c));
        for j in 0..top {
            feat[j].push(mu[j]);
            direct[j].push(nu[j]);
        }
    }

    let mut rep = ConcReport::new(
        "noisy_spectrum_identity",
        json!({ "lambda_hat": lam, "sigma0_sq": sigma0_sq, "n": n, "s": s }),
        trials,
    );
    let root = (trials as f64).sqrt();
    let mut worst = 0.0f64;
    for j in 0..top {
        let (mf, sf) = mean_sd(&feat[j]);
        let (md, sd) = mean_sd(&direct[j]);
        let joint = ((sf * sf + sd * sd) / (trials as f64)).sqrt();
        let z = if joint > 0.0 { (mf - md).abs() / joint } else if mf == md { 0.0 } else { f64::INFINITY };
        worst = worst.max(z);
        rep.stat(&format!("features_mu{}", j + 1), mf);
        rep.stat(&format!("features_mu{}_stderr", j + 1), sf / root);
        rep.stat(&format!("direct_mu{}", j + 1), md);
        rep.stat(&format!("direct_mu{}_stderr", j + 1), sd / root);
    }
    rep.stat("max_z", worst);
    rep.stated_bound = Some(3.0);
    rep.verdict = Verdict::of(worst <= 3.0);
    Ok(rep)
}
