//! Eigenvalue spectra, eigenfeature maps and covariance summaries.
//!
//! Eigenvalues are stored 0-based: `eigenvalues[i]` is the `(i+1)`-th Mercer
//! eigenvalue.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::sym_eigenvalues_desc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayKind {
    FiniteRank,
    Exponential,
    Polynomial,
    Custom,
}

/// Decay parameters. `omega1` defaults to 1.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega1: Option<f64>,
}

impl DecayParams {
    pub fn finite_rank(d: usize) -> Self {
        Self { d: Some(d), ..Self::default() }
    }

    pub fn polynomial(gamma: f64) -> Self {
        Self { gamma: Some(gamma), ..Self::default() }
    }

    pub fn with_scale(mut self, omega1: f64) -> Self {
        self.omega1 = Some(omega1);
        self
    }

    pub fn scale(&self) -> f64 {
        self.omega1.unwrap_or(1.0)
    }
}

/// A truncated Mercer spectrum: non-negative, non-increasing, finite sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpectrumRepr", into = "SpectrumRepr")]
pub struct Spectrum {
    kind: DecayKind,
    params: DecayParams,
    eigenvalues: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpectrumRepr {
    kind: DecayKind,
    p: usize,
    #[serde(default)]
    params: DecayParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eigenvalues: Option<Vec<f64>>,
}

impl TryFrom<SpectrumRepr> for Spectrum {
    type Error = Error;

    fn try_from(r: SpectrumRepr) -> Result<Self> {
        match (r.kind, r.eigenvalues) {
            (DecayKind::Custom, Some(ev)) => {
                if ev.len() != r.p {
                    return Err(Error::DimensionMismatch {
                        context: "custom spectrum eigenvalues",
                        expected: r.p,
                        got: ev.len(),
                    });
                }
                Spectrum::custom(ev)
            }
            (DecayKind::Custom, None) => Err(invalid("eigenvalues", "custom spectra must list their eigenvalues")),
            (kind, given) => {
                let s = make_spectrum(kind, r.p, r.params)?;
                if let Some(ev) = given {
                    let agrees = ev.len() == s.eigenvalues.len()
                        && ev.iter().zip(&s.eigenvalues).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1e-300));
                    if !agrees {
                        return Err(invalid("eigenvalues", "listed eigenvalues disagree with the decay parameters"));
                    }
                }
                Ok(s)
            }
        }
    }
}

impl From<Spectrum> for SpectrumRepr {
    fn from(s: Spectrum) -> Self {
        let eigenvalues = (s.kind == DecayKind::Custom).then(|| s.eigenvalues.clone());
        SpectrumRepr { kind: s.kind, p: s.eigenvalues.len(), params: s.params, eigenvalues }
    }
}

/// Build a spectrum of one of the parametric kinds.
pub fn make_spectrum(kind: DecayKind, p: usize, params: DecayParams) -> Result<Spectrum> {
    if p == 0 {
        return Err(invalid("p", "truncation rank must be at least 1"));
    }
    let w = params.scale();
    if !(w > 0.0 && w.is_finite()) {
        return Err(invalid("omega1", format!("scale must be positive and finite, got {w}")));
    }
    let eigenvalues: Vec<f64> = match kind {
        DecayKind::FiniteRank => {
            let d = params.d.ok_or_else(|| invalid("d", "finite-rank spectra need a rank d"))?;
            if d == 0 || d > p {
                return Err(invalid("d", format!("need 1 <= d <= p = {p}, got {d}")));
            }
            (0..p).map(|i| if i < d { w } else { 0.0 }).collect()
        }
        DecayKind::Exponential => (0..p).map(|i| w * (-((i + 1) as f64)).exp()).collect(),
        DecayKind::Polynomial => {
            let g = params.gamma.ok_or_else(|| invalid("gamma", "polynomial spectra need an exponent gamma"))?;
            if !(g > 1.0) || !g.is_finite() {
                return Err(invalid(
                    "gamma",
                    format!("decay exponent must exceed 1 (otherwise the trace diverges), got {g}"),
                ));
            }
            (0..p).map(|i| w * ((i + 1) as f64).powf(-g)).collect()
        }
        DecayKind::Custom => {
            return Err(invalid("kind", "custom spectra are built with Spectrum::custom"));
        }
    };
    Ok(Spectrum { kind, params, eigenvalues })
}

impl Spectrum {
    /// Spectrum from an explicit sequence.
    pub fn custom(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(invalid("eigenvalues", "need at least one eigenvalue"));
        }
        if let Some(bad) = eigenvalues.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid("eigenvalues", format!("must be finite and non-negative, found {bad}")));
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(invalid("eigenvalues", "must be non-increasing"));
        }
        Ok(Self { kind: DecayKind::Custom, params: DecayParams::default(), eigenvalues })
    }

    pub fn kind(&self) -> DecayKind {
        self.kind
    }

    pub fn params(&self) -> DecayParams {
        self.params
    }

    pub fn p(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn op_norm(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    pub fn summary(&self) -> CovarianceSummary {
        CovarianceSummary::from_eigenvalues(self.eigenvalues.clone(), CovarianceSource::Population)
    }
}

/// `(trace, trace / largest eigenvalue)`.
pub fn trace_and_rank(spectrum: &Spectrum) -> Result<(f64, f64)> {
    trace_and_rank_of(spectrum.eigenvalues())
}

/// [`trace_and_rank`] on a raw non-increasing sequence.
pub fn trace_and_rank_of(eigenvalues: &[f64]) -> Result<(f64, f64)> {
    let top = eigenvalues.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return Err(Error::DegenerateSpectrum);
    }
    let tr: f64 = eigenvalues.iter().sum();
    Ok((tr, tr / top))
}

const TAIL_FRACTION: f64 = 1e-4;
const MAX_TRUNCATION: f64 = 1e12;

/// Smallest `p` whose discarded tail mass is at most `1e-4` of the full trace,
/// from the closed-form decay.
pub fn suggest_truncation(kind: DecayKind, params: DecayParams) -> Result<usize> {
    match kind {
        DecayKind::FiniteRank => params.d.filter(|&d| d >= 1).ok_or_else(|| invalid("d", "need d >= 1")),
        // tail / trace = e^{-p}
        DecayKind::Exponential => Ok((-(TAIL_FRACTION.ln())).ceil() as usize),
        DecayKind::Polynomial => {
            let g = params.gamma.ok_or_else(|| invalid("gamma", "missing"))?;
            if !(g > 1.0) {
                return Err(invalid("gamma", format!("decay exponent must exceed 1, got {g}")));
            }
            let total = zeta_tail(g, 1.0);
            let ok = |p: f64| zeta_tail(g, p + 1.0) <= TAIL_FRACTION * total;
            if !ok(MAX_TRUNCATION) {
                return Err(invalid("gamma", format!("decay {g} needs more than {MAX_TRUNCATION:e} terms")));
            }
            let (mut lo, mut hi) = (0.0f64, MAX_TRUNCATION);
            while hi - lo > 1.0 {
                let mid = ((lo + hi) / 2.0).floor();
                if ok(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(hi as usize)
        }
        DecayKind::Custom => Err(invalid("kind", "no closed form for a custom spectrum")),
    }
}

/// `sum_{i >= a} i^{-g}` for integer `a >= 1`: explicit head then Euler-Maclaurin.
fn zeta_tail(g: f64, a: f64) -> f64 {
    let mut head = 0.0;
    let mut i = a;
    while i < 20.0 {
        head += i.powf(-g);
        i += 1.0;
    }
    let f = i.powf(-g);
    let d1 = -g * i.powf(-g - 1.0);
    let d3 = -g * (g + 1.0) * (g + 2.0) * i.powf(-g - 3.0);
    head + i.powf(1.0 - g) / (g - 1.0) + f / 2.0 - d1 / 12.0 + d3 / 720.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceSource {
    Population,
    Empirical,
    FeatureApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceSummary {
    pub eigenvalues: Vec<f64>,
    pub trace: f64,
    pub operator_norm: f64,
    pub source: CovarianceSource,
}

impl CovarianceSummary {
    pub fn from_eigenvalues(eigenvalues: Vec<f64>, source: CovarianceSource) -> Self {
        let trace = eigenvalues.iter().sum();
        let operator_norm = eigenvalues.first().copied().unwrap_or(0.0);
        Self { eigenvalues, trace, operator_norm, source }
    }
}

/// How covariates enter the features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// `phi(x) = D^{1/2} g` with `g` standard normal.
    #[default]
    Eigencoordinate,
    /// Trigonometric basis on `[0, 1]` under the uniform law.
    Fourier,
}

/// A sample of covariates.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateSet {
    Fourier(Vec<f64>),
    /// `dim x n`, one column per draw of `g`.
    Eigencoordinate(DMatrix<f64>),
}

/// A single covariate.
#[derive(Debug, Clone, Copy)]
pub enum Covariate<'a> {
    Point(f64),
    Coords(&'a [f64]),
}

/// Draw `n` covariates. `dim` is the eigencoordinate dimension (ignored in
/// fourier mode).
pub fn sample_covariates<R: Rng + ?Sized>(mode: FeatureMode, n: usize, dim: usize, rng: &mut R) -> Result<CovariateSet> {
    if n == 0 {
        return Err(invalid("n", "need at least one covariate"));
    }
    Ok(match mode {
        FeatureMode::Fourier => CovariateSet::Fourier((0..n).map(|_| rng.random::<f64>()).collect()),
        FeatureMode::Eigencoordinate => {
            if dim == 0 {
                return Err(invalid("p", "eigencoordinate dimension must be positive"));
            }
            let mut g = DMatrix::zeros(dim, n);
            for v in g.as_mut_slice() {
                *v = rng.sample(StandardNormal);
            }
            CovariateSet::Eigencoordinate(g)
        }
    })
}

impl CovariateSet {
    pub fn len(&self) -> usize {
        match self {
            CovariateSet::Fourier(x) => x.len(),
            CovariateSet::Eigencoordinate(g) => g.ncols(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> FeatureMode {
        match self {
            CovariateSet::Fourier(_) => FeatureMode::Fourier,
            CovariateSet::Eigencoordinate(_) => FeatureMode::Eigencoordinate,
        }
    }

    pub fn get(&self, i: usize) -> Covariate<'_> {
        match self {
            CovariateSet::Fourier(x) => Covariate::Point(x[i]),
            CovariateSet::Eigencoordinate(g) => {
                let dim = g.nrows();
                Covariate::Coords(&g.as_slice()[i * dim..(i + 1) * dim])
            }
        }
    }

    /// Eigenfeatures as a `p x n` matrix, column `i` holding `phi(x_i)`.
    pub fn phi_columns(&self, spectrum: &Spectrum) -> Result<DMatrix<f64>> {
        let p = spectrum.p();
        if let CovariateSet::Eigencoordinate(g) = self {
            if g.nrows() != p {
                return Err(Error::DimensionMismatch { context: "eigencoordinates", expected: p, got: g.nrows() });
            }
        }
        let mut out = DMatrix::zeros(p, self.len());
        for i in 0..self.len() {
            let phi = eigenfeature_map(spectrum, self.get(i))?;
            out.column_mut(i).copy_from_slice(&phi);
        }
        Ok(out)
    }
}

/// First `p` trigonometric basis functions at `x`:
/// `1, sqrt2 cos(2 pi x), sqrt2 sin(2 pi x), sqrt2 cos(4 pi x), ...`.
pub fn fourier_basis(p: usize, x: f64) -> Vec<f64> {
    (0..p)
        .map(|i| {
            if i == 0 {
                1.0
            } else {
                let k = i.div_ceil(2) as f64;
                let arg = 2.0 * PI * k * x;
                if i % 2 == 1 {
                    SQRT_2 * arg.cos()
                } else {
                    SQRT_2 * arg.sin()
                }
            }
        })
        .collect()
}

fn basis_values(p: usize, x: Covariate<'_>) -> Result<Vec<f64>> {
    match x {
        Covariate::Point(t) => Ok(fourier_basis(p, t)),
        Covariate::Coords(g) => {
            if g.len() != p {
                return Err(Error::DimensionMismatch { context: "eigencoordinates", expected: p, got: g.len() });
            }
            Ok(g.to_vec())
        }
    }
}

/// `phi(x) = D^{1/2} e(x)`.
pub fn eigenfeature_map(spectrum: &Spectrum, x: Covariate<'_>) -> Result<Vec<f64>> {
    let mut e = basis_values(spectrum.p(), x)?;
    for (v, lam) in e.iter_mut().zip(spectrum.eigenvalues()) {
        *v *= lam.sqrt();
    }
    Ok(e)
}

/// `k(x, y) = sum_i lambda_i e_i(x) e_i(y)`.
pub fn kernel_eval(spectrum: &Spectrum, x: Covariate<'_>, y: Covariate<'_>) -> Result<f64> {
    let ex = basis_values(spectrum.p(), x)?;
    let ey = basis_values(spectrum.p(), y)?;
    Ok(spectrum.eigenvalues().iter().zip(ex.iter().zip(&ey)).map(|(l, (a, b))| l * a * b).sum())
}

/// Eigen-summary of `(1/n) sum_i r_i r_i^T` for `n x dim` rows.
pub fn empirical_covariance(rows: &DMatrix<f64>, source: CovarianceSource) -> Result<CovarianceSummary> {
    if rows.nrows() == 0 {
        return Err(invalid("rows", "need at least one row"));
    }
    empirical_covariance_cols(&rows.transpose(), source)
}

/// Same as [`empirical_covariance`] for `dim x n` input (one sample per column).
pub fn empirical_covariance_cols(cols: &DMatrix<f64>, source: CovarianceSource) -> Result<CovarianceSummary> {
    let (dim, n) = cols.shape();
    if n == 0 {
        return Err(invalid("rows", "need at least one row"));
    }
    let scale = 1.0 / n as f64;
    let gram = if n < dim { cols.transpose() * cols } else { cols * cols.transpose() };
    let mut ev = sym_eigenvalues_desc(&(gram * scale));
    for v in ev.iter_mut() {
        *v = v.max(0.0);
    }
    ev.resize(dim, 0.0);
    Ok(CovarianceSummary::from_eigenvalues(ev, source))
}
