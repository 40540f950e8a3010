use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::bounds::{curve_csv, double_descent_curve, CurveSpec, Regime};
use crate::error::{Error, Result};
use crate::stats::{format_float, parse_float, Estimate};

use super::config::ExperimentConfig;
use super::sweep::{RowSeeds, SweepRecord};

pub const SWEEP_HEADER: &str =
    "s,replicate,sigma0_sq,k_star,B,B_se,V,V_se,M,M_se,R,R_se,bias_bound,variance_bound,regime,wall_ms";

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// CSV text of sweep rows: fixed columns, shortest round-trip decimals,
/// `nan` for missing values.
pub fn sweep_csv(records: &[SweepRecord]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in records {
        let k = r.k_star.map_or_else(|| "nan".to_string(), |k| k.to_string());
        let fields = [
            r.s.to_string(),
            r.replicate.to_string(),
            format_float(r.sigma0_sq),
            k,
            format_float(r.bias.value),
            format_float(r.bias.stderr),
            format_float(r.variance.value),
            format_float(r.variance.stderr),
            format_float(r.misspec.value),
            format_float(r.misspec.stderr),
            format_float(r.risk.value),
            format_float(r.risk.stderr),
            format_float(r.bias_bound),
            format_float(r.variance_bound),
            r.regime.label().to_string(),
            format_float(r.wall_ms),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Parse text written by [`sweep_csv`]. Error texts are not part of the CSV,
/// so parsed rows have none.
pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRecord>> {
    let bad = |line: usize, what: &str| Error::Config(vec![format!("sweep.csv line {line}: {what}")]);
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let ln = i + 2;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 16 {
            return Err(bad(ln, "expected 16 columns"));
        }
        let int = |c: &str| c.parse::<usize>().map_err(|_| bad(ln, "bad integer"));
        let num = |c: &str| parse_float(c).ok_or_else(|| bad(ln, "bad number"));
        let est = |v: &str, se: &str| -> Result<Estimate> { Ok(Estimate { value: num(v)?, stderr: num(se)? }) };
        out.push(SweepRecord {
            s: int(cols[0])?,
            replicate: int(cols[1])?,
            sigma0_sq: num(cols[2])?,
            k_star: if cols[3] == "nan" { None } else { Some(int(cols[3])?) },
            bias: est(cols[4], cols[5])?,
            variance: est(cols[6], cols[7])?,
            misspec: est(cols[8], cols[9])?,
            risk: est(cols[10], cols[11])?,
            bias_bound: num(cols[12])?,
            variance_bound: num(cols[13])?,
            regime: Regime::from_label(cols[14]).ok_or_else(|| bad(ln, "unknown regime"))?,
            wall_ms: num(cols[15])?,
            error: None,
        });
    }
    Ok(out)
}

/// Resolved config, seed, version and per-row stream keys and errors.
pub fn manifest_json(records: &[SweepRecord], cfg: &ExperimentConfig) -> String {
    let master = cfg.master_seed.unwrap_or_default();
    let rows: Vec<_> = records
        .iter()
        .map(|r| {
            let mut row = json!({
                "s": r.s,
                "replicate": r.replicate,
                "seeds": RowSeeds::new(master, r.s, r.replicate).as_map(),
            });
            if let Some(e) = &r.error {
                row["error"] = json!(e);
            }
            row
        })
        .collect();
    let manifest = json!({
        "artifact_version": ARTIFACT_VERSION,
        "master_seed": cfg.master_seed,
        "config": cfg,
        "rows": rows,
    });
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    text
}

/// Write through a `.tmp` sibling and rename, so a named output is never
/// left truncated.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp)?;
    f.write_all(contents)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputPaths {
    pub sweep: PathBuf,
    pub manifest: PathBuf,
    pub bounds_curve: PathBuf,
}

/// Write `sweep.csv`, `manifest.json` and `bounds_curve.csv` into `dir`.
pub fn emit_outputs(records: &[SweepRecord], cfg: &ExperimentConfig, dir: &Path) -> Result<OutputPaths> {
    fs::create_dir_all(dir)?;
    let spectrum = cfg.spectrum.build(cfg.p)?;
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
    let paths = OutputPaths {
        sweep: dir.join("sweep.csv"),
        manifest: dir.join("manifest.json"),
        bounds_curve: dir.join("bounds_curve.csv"),
    };
    write_atomic(&paths.sweep, sweep_csv(records).as_bytes())?;
    write_atomic(&paths.manifest, manifest_json(records, cfg).as_bytes())?;
    write_atomic(&paths.bounds_curve, curve_csv(&curve).as_bytes())?;
    Ok(paths)
}
