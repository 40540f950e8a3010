//! Effective tail index, risk bounds, and regime labels.
//!
//! Bound values are rate parts: the universal constants are unknown and enter
//! as multipliers (1 by default), so only ratios and shapes are meaningful.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spectrum::{trace_and_rank_of, Spectrum};
use crate::stats::format_float;

/// Multipliers standing in for the unspecified universal constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Constants {
    /// tail-index threshold constant, `> 1`
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub c_prime: f64,
    /// mis-specification proxy scale below the threshold, in units of `sigma^2`
    pub m0: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self { a: 2.0, b: 1.0, c: 1.0, c_prime: 1.0, m0: 0.1 }
    }
}

/// `lambda_hat` padded with zeros (or truncated) to length `n`, plus `sigma0_sq / n`.
pub fn noisy_eigenvalues(lambda_hat: &[f64], sigma0_sq: f64, n: usize) -> Vec<f64> {
    let shift = sigma0_sq / n as f64;
    (0..n).map(|i| lambda_hat.get(i).copied().unwrap_or(0.0) + shift).collect()
}

/// Smallest `k` in `0..n` with `sum_{i>k} lam_i / lam_{k+1} >= n / a` for the
/// shifted eigenvalues `lam = lambda_hat + sigma0_sq / n`; candidates with
/// `lam_{k+1} = 0` are skipped. `None` when no `k` qualifies.
pub fn k_star(lambda_hat: &[f64], sigma0_sq: f64, n: usize, a: f64) -> Option<usize> {
    let lam = noisy_eigenvalues(lambda_hat, sigma0_sq, n);
    let threshold = n as f64 / a;
    // suffix[k] = sum_{i >= k} lam[i] (0-based), i.e. the tail beyond index k
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + lam[i];
    }
    (0..n).find(|&k| lam[k] > 0.0 && suffix[k] / lam[k] >= threshold)
}

/// Tail sum of `lambda_hat` (zero-padded to `n`) beyond index `k`.
pub fn tail_sum(lambda_hat: &[f64], n: usize, k: usize) -> f64 {
    (k..n).map(|i| lambda_hat.get(i).copied().unwrap_or(0.0)).sum()
}

/// Everything the bound formulas need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub n: usize,
    pub s: usize,
    pub p: usize,
    /// empirical eigenvalues, non-increasing
    pub lambda_hat: Vec<f64>,
    pub sigma0_sq: f64,
    /// label-noise variance
    pub sigma_sq: f64,
    pub trace_sigma: f64,
    pub op_norm_sigma: f64,
    /// `|W^T W|`, or the surrogate `p`
    pub lambda_w: f64,
    pub pi_norm: f64,
    pub beta_norm: f64,
    pub delta: f64,
    pub constants: Constants,
    /// multiply the variance bound by `1 / sigma0`
    pub inverse_noise_factor: bool,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.s == 0 {
            return Err(invalid("n, s", "must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta", format!("confidence level must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.constants.a > 1.0) {
            return Err(invalid("a", format!("tail-index constant must exceed 1, got {}", self.constants.a)));
        }
        if self.lambda_hat.iter().any(|v| !(*v >= 0.0)) || self.lambda_hat.windows(2).any(|w| w[1] > w[0]) {
            return Err(invalid("lambda_hat", "must be non-negative and non-increasing"));
        }
        if !(self.op_norm_sigma > 0.0 && self.trace_sigma >= self.op_norm_sigma) {
            return Err(invalid("trace_sigma, op_norm_sigma", "need 0 < |Sigma| <= Tr(Sigma)"));
        }
        if !(self.sigma0_sq >= 0.0 && self.sigma_sq >= 0.0) {
            return Err(invalid("sigma0_sq, sigma_sq", "variances must be non-negative"));
        }
        Ok(())
    }

    pub fn effective_rank(&self) -> f64 {
        self.trace_sigma / self.op_norm_sigma
    }

    /// `sqrt(log(14 r / delta) / n)`
    fn concentration_rate(&self) -> f64 {
        ((14.0 * self.effective_rank() / self.delta).ln() / self.n as f64).sqrt()
    }

    pub fn k_star(&self) -> Option<usize> {
        k_star(&self.lambda_hat, self.sigma0_sq, self.n, self.constants.a)
    }

    pub fn k_star_noiseless(&self) -> Option<usize> {
        k_star(&self.lambda_hat, 0.0, self.n, self.constants.a)
    }

    /// Bias bound value, ignoring whether its tail-index hypothesis holds.
    pub fn bias_formula(&self) -> f64 {
        let sigma0 = self.sigma0_sq.sqrt();
        let spread = self.lambda_w / self.s as f64 * self.op_norm_sigma * self.concentration_rate();
        self.constants.b * (spread + sigma0 + self.sigma0_sq) * self.pi_norm.powi(2) * self.beta_norm.powi(2)
    }

    pub fn variance_bound(&self) -> f64 {
        let v = self.constants.c * thm1_variance_bound(self.sigma_sq, self.trace_sigma, self.s, self.n);
        if self.inverse_noise_factor {
            v / self.sigma0_sq.sqrt()
        } else {
            v
        }
    }
}

/// Bias bound; errors when no tail index exists for the noisy spectrum.
pub fn thm1_bias_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    if inputs.k_star().is_none() {
        return Err(Error::HypothesisViolated(format!(
            "no tail index k* exists for n = {}, a = {}, sigma0^2 = {}",
            inputs.n, inputs.constants.a, inputs.sigma0_sq
        )));
    }
    Ok(inputs.bias_formula())
}

/// `sigma^2 Tr(Sigma) s / n^2`.
pub fn thm1_variance_bound(sigma_sq: f64, trace_sigma: f64, s: usize, n: usize) -> f64 {
    sigma_sq * trace_sigma * s as f64 / (n as f64 * n as f64)
}

/// `(upper, lower)` with the tail index from the noiseless spectrum.
pub fn prop1_bounds(inputs: &BoundInputs) -> Result<(f64, f64)> {
    inputs.validate()?;
    let k = inputs.k_star_noiseless().ok_or_else(|| {
        Error::HypothesisViolated(format!(
            "no tail index k* exists for the noiseless spectrum at n = {}, a = {}",
            inputs.n, inputs.constants.a
        ))
    })?;
    let tail = tail_sum(&inputs.lambda_hat, inputs.n, k);
    let k_cst = &inputs.constants;
    let rate = inputs.sigma_sq * (inputs.s as f64 / inputs.n as f64) * inputs.trace_sigma / tail;
    let bias = k_cst.b * inputs.lambda_w / inputs.s as f64
        * inputs.pi_norm.powi(2)
        * inputs.beta_norm.powi(2)
        * inputs.op_norm_sigma
        * inputs.concentration_rate();
    Ok((bias + k_cst.c * rate, k_cst.c_prime * rate))
}

/// `|Sigma| sqrt(log(14 r / delta) / n)` with unit constant. The formula is
/// evaluated as written for any positive `delta`.
pub fn cov_concentration_bound(op_norm: f64, r_sigma: f64, n: usize, delta: f64) -> f64 {
    op_norm * ((14.0 * r_sigma / delta).ln() / n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Classical,
    Threshold,
    Benign,
    Explosive,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::Classical => "classical",
            Regime::Threshold => "threshold",
            Regime::Benign => "benign",
            Regime::Explosive => "explosive",
        }
    }

    /// Inverse of [`Regime::label`].
    pub fn from_label(text: &str) -> Option<Self> {
        [Regime::Classical, Regime::Threshold, Regime::Benign, Regime::Explosive]
            .into_iter()
            .find(|r| r.label() == text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeReport {
    pub regime: Regime,
    /// `log s / log n`
    pub gamma: f64,
    /// exponent `e` in a variance rate `n^e`; NaN below the threshold
    pub variance_exponent: f64,
    pub variance_rate: String,
    pub bias_rate: String,
}

fn exponent_text(e: f64) -> String {
    let r = (e * 1e6).round() / 1e6;
    if r == r.trunc() {
        format!("{}", r as i64)
    } else {
        format!("{r}")
    }
}

/// Map `(n, s)` to its growth regime. `s = n^2` counts as benign.
pub fn regime_classify(n: usize, s: usize) -> Result<RegimeReport> {
    if n < 2 || s == 0 {
        return Err(invalid("n, s", format!("need n >= 2 and s >= 1, got n = {n}, s = {s}")));
    }
    let gamma = (s as f64).ln() / (n as f64).ln();
    let report = |regime, variance_exponent: f64, variance_rate: String, bias_rate: &str| RegimeReport {
        regime,
        gamma,
        variance_exponent,
        variance_rate,
        bias_rate: bias_rate.to_string(),
    };
    Ok(if s < n {
        report(Regime::Classical, f64::NAN, "U-shaped; mis-specification dominated".into(), "mis-specification dominated")
    } else if s == n {
        report(Regime::Threshold, -1.0, "O(n^-1)".into(), "O(p/n^(3/2)) + O(n^-alpha)")
    } else if (s as u128) <= (n as u128) * (n as u128) {
        let e = gamma - 2.0;
        report(Regime::Benign, e, format!("O(n^{})", exponent_text(e)), "O(p/(s sqrt n)) + O(s^(-alpha/2))")
    } else {
        let e = gamma - 2.0;
        report(Regime::Explosive, e, format!("Theta(n^{})", exponent_text(e)), "O(p/(s sqrt n)) + O(s^(-alpha/2))")
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub n: usize,
    pub s: usize,
    pub p: usize,
    pub sigma0_sq: f64,
    pub k_star: Option<usize>,
    pub k_star_noiseless: Option<usize>,
    /// absent when the tail-index hypothesis fails
    pub bias_bound: Option<f64>,
    pub variance_bound: f64,
    pub prop1_upper: Option<f64>,
    pub prop1_lower: Option<f64>,
    pub cov_concentration: f64,
    pub regime: RegimeReport,
    pub constants: Constants,
    pub notes: Vec<String>,
}

pub fn bound_report(inputs: &BoundInputs) -> Result<BoundReport> {
    inputs.validate()?;
    let mut notes = Vec::new();
    let bias_bound = match thm1_bias_bound(inputs) {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(e.to_string());
            None
        }
    };
    let (prop1_upper, prop1_lower) = match prop1_bounds(inputs) {
        Ok((u, l)) => (Some(u), Some(l)),
        Err(e) => {
            notes.push(e.to_string());
            (None, None)
        }
    };
    if inputs.inverse_noise_factor {
        notes.push("variance bound includes the 1/sigma0 factor".into());
    }
    Ok(BoundReport {
        n: inputs.n,
        s: inputs.s,
        p: inputs.p,
        sigma0_sq: inputs.sigma0_sq,
        k_star: inputs.k_star(),
        k_star_noiseless: inputs.k_star_noiseless(),
        bias_bound,
        variance_bound: inputs.variance_bound(),
        prop1_upper,
        prop1_lower,
        cov_concentration: cov_concentration_bound(inputs.op_norm_sigma, inputs.effective_rank(), inputs.n, inputs.delta),
        regime: regime_classify(inputs.n.max(2), inputs.s)?,
        constants: inputs.constants,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub s: usize,
    pub sigma0_sq: f64,
    pub k_star: Option<usize>,
    pub bias_bound: f64,
    pub variance_bound: f64,
    pub total: f64,
    pub regime: Regime,
}

/// Parameters of the bound curve over a width grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSpec<'a> {
    pub n: usize,
    pub p: usize,
    pub spectrum: &'a Spectrum,
    pub alpha: f64,
    pub sigma_sq: f64,
    pub s_grid: &'a [usize],
    pub delta: f64,
    pub constants: Constants,
    /// empirical eigenvalues; population eigenvalues when absent
    pub lambda_hat: Option<&'a [f64]>,
}

/// Bound curve with per-width `sigma0^2 = s^-alpha`, `|Pi| = |beta| = 1` and
/// `lambda_W = p`. Below the threshold the bias is replaced by the
/// illustrative proxy `m0 sigma^2 n / s`. The bias formula is evaluated even
/// where no tail index exists; such points report `k_star = None`.
pub fn double_descent_curve(spec: &CurveSpec<'_>) -> Result<Vec<CurvePoint>> {
    if spec.s_grid.windows(2).any(|w| w[1] <= w[0]) || spec.s_grid.first() == Some(&0) {
        return Err(invalid("s_grid", "must be strictly increasing and positive"));
    }
    if !(spec.alpha >= 0.0) {
        return Err(invalid("alpha", "noise exponent must satisfy alpha >= 0"));
    }
    let (trace, _) = trace_and_rank_of(spec.spectrum.eigenvalues())?;
    let lambda_hat = spec.lambda_hat.unwrap_or(spec.spectrum.eigenvalues()).to_vec();
    let mut out = Vec::with_capacity(spec.s_grid.len());
    for &s in spec.s_grid {
        let sigma0_sq = (s as f64).powf(-spec.alpha);
        let inputs = BoundInputs {
            n: spec.n,
            s,
            p: spec.p,
            lambda_hat: lambda_hat.clone(),
            sigma0_sq,
            sigma_sq: spec.sigma_sq,
            trace_sigma: trace,
            op_norm_sigma: spec.spectrum.op_norm(),
            lambda_w: spec.p as f64,
            pi_norm: 1.0,
            beta_norm: 1.0,
            delta: spec.delta,
            constants: spec.constants,
            inverse_noise_factor: false,
        };
        inputs.validate()?;
        let bias_bound = if s < spec.n {
            spec.constants.m0 * spec.sigma_sq * spec.n as f64 / s as f64
        } else {
            inputs.bias_formula()
        };
        let variance_bound = inputs.variance_bound();
        out.push(CurvePoint {
            s,
            sigma0_sq,
            k_star: inputs.k_star(),
            bias_bound,
            variance_bound,
            total: bias_bound + variance_bound,
            regime: regime_classify(spec.n.max(2), s)?.regime,
        });
    }
    Ok(out)
}

pub const CURVE_HEADER: &str = "s,sigma0_sq,k_star,bias_bound,variance_bound,total,regime";

/// CSV text of a curve; a missing tail index is written as `nan`.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for pt in points {
        let k = pt.k_star.map_or_else(|| "nan".to_string(), |k| k.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            pt.s,
            format_float(pt.sigma0_sq),
            k,
            format_float(pt.bias_bound),
            format_float(pt.variance_bound),
            format_float(pt.total),
            pt.regime.label()
        ));
    }
    out
}
