//! Experiment runner: configs, datasets, presets, metrics and comparisons.

mod compare;
mod config;
mod dataset;
mod presets;
mod runner;

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::idx::IdxError;
use crate::model::ModelError;
use crate::protocol::ProtocolError;

pub use compare::{compare, global_accuracy, GapReport};
pub use config::{ConfigError, DatasetConfig, LocalIterations, ScenarioConfig};
pub use dataset::{load_dataset, split_iid, synthetic, Samples};
pub use presets::{preset, presets, Preset};
pub use runner::{
    run_central, run_observed, run_scenario, write_csv, MetricRow, Prepared, RunOutput, CSV_HEADER,
};

/// Environment variable naming the directory relative dataset paths resolve
/// against.
pub const DATA_DIR_ENV: &str = "IPLS_DATA_DIR";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("dataset: {0}")]
    Data(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

impl HarnessError {
    /// 1 for configuration problems, 2 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Idx(IdxError::Io { .. }) | Self::Io { .. } | Self::Csv(_) => 2,
            _ => 1,
        }
    }
}

pub fn data_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

/// Result of running a set of variants.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub runs: Vec<RunOutput>,
    pub references: Vec<RunOutput>,
    pub text: String,
}

/// Runs every variant (plus its central reference when requested) and
/// renders a short text summary.
pub fn run_variants(variants: &[ScenarioConfig], data_dir: Option<&Path>) -> Result<Summary, HarnessError> {
    let mut runs = Vec::new();
    let mut references = Vec::new();
    let mut text = String::from("variant,rounds,final_accuracy,final_loss,total_bytes_sent,gap_vs_central_final,gap_vs_central_max\n");
    for cfg in variants {
        let prepared = Prepared::new(cfg, data_dir)?;
        let run = run_observed(&prepared, |_, _| {})?;
        let last = run.global().last().cloned();
        let sent: u64 = run.global().map(|r| r.bytes_sent).sum();
        let (gap_final, gap_max) = if cfg.baseline {
            let central = run_central(&prepared)?;
            let report = compare(&run.csv(), &central.csv())?;
            references.push(central);
            (
                report.final_gap().map(|g| g.to_string()).unwrap_or_default(),
                report.max_abs_gap.to_string(),
            )
        } else {
            (String::new(), String::new())
        };
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{}",
            cfg.name,
            cfg.rounds,
            last.as_ref().map_or(f64::NAN, |r| r.accuracy),
            last.as_ref().map_or(f64::NAN, |r| r.loss),
            sent,
            gap_final,
            gap_max
        );
        runs.push(run);
    }
    Ok(Summary {
        runs,
        references,
        text,
    })
}

fn write_file(path: PathBuf, contents: &str) -> Result<(), HarnessError> {
    fs::write(&path, contents).map_err(|source| HarnessError::Io { path, source })
}

/// Writes `<name>.csv` per run and reference plus `summary.csv` into `dir`.
pub fn write_outputs(summary: &Summary, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    for run in summary.runs.iter().chain(&summary.references) {
        let path = dir.join(format!("{}.csv", run.name));
        write_file(path.clone(), &run.csv())?;
        written.push(path);
    }
    let path = dir.join("summary.csv");
    write_file(path.clone(), &summary.text)?;
    written.push(path);
    Ok(written)
}
