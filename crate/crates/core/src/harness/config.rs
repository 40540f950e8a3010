use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bounds::Constants;
use crate::error::{Error, Result};
use crate::features::{NoiseFamily, TestNoise};
use crate::risk::{TargetMode, TargetNoise};
use crate::spectrum::{make_spectrum, DecayKind, DecayParams, FeatureMode, Spectrum};

/// Population spectrum of an experiment; `eigenvalues` only for `custom`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    pub kind: DecayKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigenvalues: Option<Vec<f64>>,
}

impl SpectrumConfig {
    pub fn polynomial(gamma: f64) -> Self {
        Self { kind: DecayKind::Polynomial, d: None, gamma: Some(gamma), omega1: None, eigenvalues: None }
    }

    pub fn params(&self) -> DecayParams {
        DecayParams { d: self.d, gamma: self.gamma, omega1: self.omega1 }
    }

    /// Spectrum truncated at `p`.
    pub fn build(&self, p: usize) -> Result<Spectrum> {
        match (self.kind, &self.eigenvalues) {
            (DecayKind::Custom, Some(ev)) => {
                if ev.len() != p {
                    return Err(Error::DimensionMismatch { context: "custom eigenvalues", expected: p, got: ev.len() });
                }
                Spectrum::custom(ev.clone())
            }
            (DecayKind::Custom, None) => Err(crate::error::invalid("spectrum.eigenvalues", "custom spectra need eigenvalues")),
            (_, Some(_)) => Err(crate::error::invalid("spectrum.eigenvalues", "only custom spectra take explicit eigenvalues")),
            (kind, None) => make_spectrum(kind, p, self.params()),
        }
    }
}

/// Everything a sweep needs. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub n: usize,
    pub p: usize,
    pub s_grid: Vec<usize>,
    pub spectrum: SpectrumConfig,
    pub mode: FeatureMode,
    pub noise_family: NoiseFamily,
    /// feature-noise exponent, `sigma0^2 = s^-alpha`
    pub alpha: f64,
    /// label-noise variance
    pub sigma_sq: f64,
    pub target_mode: TargetMode,
    pub target_norm: f64,
    pub target_noise: TargetNoise,
    pub misspec_energy: f64,
    pub test_noise: TestNoise,
    pub test_points: usize,
    pub label_redraws: usize,
    pub ensemble_replicates: usize,
    pub master_seed: Option<u64>,
    pub delta: f64,
    pub constants: Constants,
    /// worker threads for the width jobs of a replicate; all cores when absent
    pub workers: Option<usize>,
    /// fill `wall_ms`; off by default so outputs are reproducible byte for byte
    pub record_timing: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 100,
            p: 2000,
            s_grid: log_grid(10, 10_000, 25),
            spectrum: SpectrumConfig::polynomial(2.0),
            mode: FeatureMode::Eigencoordinate,
            noise_family: NoiseFamily::Gaussian,
            alpha: 0.5,
            sigma_sq: 0.5,
            target_mode: TargetMode::RealizableNoisy,
            target_norm: 1.0,
            target_noise: TargetNoise::SharedTraining,
            misspec_energy: 1.0,
            test_noise: TestNoise::Fresh,
            test_points: 4096,
            label_redraws: 500,
            ensemble_replicates: 20,
            master_seed: None,
            delta: 0.05,
            constants: Constants::default(),
            workers: None,
            record_timing: false,
            output_dir: PathBuf::from("out"),
        }
    }
}

/// `count` integers spaced evenly on a log scale from `lo` to `hi`,
/// rounded and de-duplicated.
pub fn log_grid(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    if count <= 1 || lo >= hi {
        return vec![lo];
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let mut out: Vec<usize> = (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp().round() as usize)
        .collect();
    out.dedup();
    out
}

/// Named configurations.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    match name {
        "double-descent" => Some(ExperimentConfig::default()),
        "smoke" => Some(ExperimentConfig {
            n: 20,
            p: 100,
            s_grid: vec![10, 20, 40, 80],
            test_points: 256,
            label_redraws: 50,
            ensemble_replicates: 2,
            ..ExperimentConfig::default()
        }),
        _ => None,
    }
}

pub const PRESETS: [&str; 2] = ["double-descent", "smoke"];

const TOP_KEYS: [&str; 22] = [
    "n",
    "p",
    "s_grid",
    "spectrum",
    "mode",
    "noise_family",
    "alpha",
    "sigma_sq",
    "target_mode",
    "target_norm",
    "target_noise",
    "misspec_energy",
    "test_noise",
    "test_points",
    "label_redraws",
    "ensemble_replicates",
    "master_seed",
    "delta",
    "constants",
    "workers",
    "record_timing",
    "output_dir",
];
const SPECTRUM_KEYS: [&str; 5] = ["kind", "d", "gamma", "omega1", "eigenvalues"];
const CONSTANT_KEYS: [&str; 5] = ["a", "b", "c", "c_prime", "m0"];

fn unknown_keys(value: &Value) -> Vec<String> {
    let mut out = Vec::new();
    let Some(obj) = value.as_object() else {
        return out;
    };
    let scan = |obj: &serde_json::Map<String, Value>, allowed: &[&str], prefix: &str, out: &mut Vec<String>| {
        let allowed: BTreeSet<&str> = allowed.iter().copied().collect();
        for key in obj.keys() {
            if !allowed.contains(key.as_str()) {
                out.push(format!("unknown key `{prefix}{key}`"));
            }
        }
    };
    scan(obj, &TOP_KEYS, "", &mut out);
    if let Some(Value::Object(sp)) = obj.get("spectrum") {
        scan(sp, &SPECTRUM_KEYS, "spectrum.", &mut out);
    }
    if let Some(Value::Object(c)) = obj.get("constants") {
        scan(c, &CONSTANT_KEYS, "constants.", &mut out);
    }
    out
}

impl ExperimentConfig {
    /// Parse JSON text: a config object, or a manifest whose `config` entry
    /// is one. Every unknown key is reported, then every invalid field.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)?;
        if let Some(inner) = value.get("config").filter(|_| value.get("artifact_version").is_some()) {
            value = inner.clone();
        }
        let unknown = unknown_keys(&value);
        if !unknown.is_empty() {
            return Err(Error::Config(unknown));
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Check every field; all problems are collected into one error.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("n", self.n),
            ("p", self.p),
            ("test_points", self.test_points),
            ("ensemble_replicates", self.ensemble_replicates),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be at least 1"));
            }
        }
        if self.label_redraws < 2 {
            errs.push(format!("label_redraws must be at least 2, got {}", self.label_redraws));
        }
        if self.workers == Some(0) {
            errs.push("workers must be at least 1".into());
        }
        if self.s_grid.is_empty() {
            errs.push("s_grid must not be empty".into());
        }
        if self.s_grid.first() == Some(&0) {
            errs.push("s_grid entries must be positive".into());
        }
        if self.s_grid.windows(2).any(|w| w[1] <= w[0]) {
            errs.push(format!("s_grid must be strictly increasing, got {:?}", self.s_grid));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            errs.push(format!("alpha must satisfy alpha >= 0 (feature-noise variance s^-alpha), got {}", self.alpha));
        }
        if !(self.sigma_sq >= 0.0) || !self.sigma_sq.is_finite() {
            errs.push(format!("sigma_sq must be finite and non-negative, got {}", self.sigma_sq));
        }
        if !(self.target_norm > 0.0) || !self.target_norm.is_finite() {
            errs.push(format!("target_norm must be positive, got {}", self.target_norm));
        }
        if !(self.misspec_energy > 0.0) || !self.misspec_energy.is_finite() {
            errs.push(format!("misspec_energy must be positive, got {}", self.misspec_energy));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            errs.push(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.constants.a > 1.0) {
            errs.push(format!("constants.a must exceed 1, got {}", self.constants.a));
        }
        if self.target_mode == TargetMode::Unrealizable {
            if let Some(&s_max) = self.s_grid.last() {
                if self.p <= s_max {
                    errs.push(format!("unrealizable targets need p > every s, got p = {} and s = {s_max}", self.p));
                }
            }
        }
        if self.p > 0 {
            if let Err(e) = self.spectrum.build(self.p) {
                errs.push(format!("spectrum: {e}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}
