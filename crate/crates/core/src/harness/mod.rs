//! Experiment configuration, seeded sweeps, aggregation and output files.

mod config;
mod output;
mod sweep;

pub use config::{log_grid, preset, ExperimentConfig, SpectrumConfig, PRESETS};
pub use output::{
    emit_outputs, manifest_json, parse_sweep_csv, sweep_csv, write_atomic, OutputPaths, ARTIFACT_VERSION, SWEEP_HEADER,
};
pub use sweep::{aggregate, run_point, run_sweep, Aggregate, ReplicateContext, RowSeeds, SweepRecord, WidthSummary};
