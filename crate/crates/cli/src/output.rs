//! Files the commands emit. Every JSON document carries `schema_version`;
//! CSV headers are fixed per schema version, which the manifest records.

use std::path::{Path, PathBuf};

use hlstcm_core::fsutil::write_atomic;
use hlstcm_core::{EpochMetrics, Evaluation};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::RunConfig;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub const CURVE_CSV_HEADER: &str = "ratio,observed_steps,accuracy";

/// Observation ratios of the prediction curve, `i / 10` for `i = 1..=10`.
pub fn curve_ratios() -> Vec<f64> {
    (1..=10).map(|i| f64::from(i) / 10.0).collect()
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_file: Option<PathBuf>,
    /// Every resolved setting, defaults included.
    pub config: Map<String, Value>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(rc: &RunConfig, outputs: &[&str]) -> Manifest {
        Manifest {
            schema_version: SCHEMA_VERSION,
            tool: "hlstcm",
            version: env!("CARGO_PKG_VERSION"),
            command: rc.command.clone(),
            config_file: rc.file.clone(),
            config: rc.values.iter().map(|(k, v)| (k.to_string(), Value::String(v.clone()))).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub n: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub n: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub per_class: Vec<ClassAccuracy>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn new(ev: &Evaluation, class_names: &[String]) -> EvalReport {
        EvalReport {
            schema_version: SCHEMA_VERSION,
            n: ev.n,
            accuracy: ev.accuracy,
            mean_loss: ev.mean_loss,
            per_class: class_names
                .iter()
                .zip(&ev.confusion)
                .zip(&ev.per_class_accuracy)
                .map(|((c, row), acc)| ClassAccuracy { class: c.clone(), n: row.iter().sum(), accuracy: *acc })
                .collect(),
            confusion: ev.confusion.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub epochs_done: usize,
    pub resumed_from_epoch: usize,
    pub last_epoch: Option<EpochMetrics>,
    pub train: EvalReport,
    pub test: Option<EvalReport>,
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output types serialize");
    s.push('\n');
    s
}

pub fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    write_atomic(&dir.join(name), contents.as_bytes())?;
    Ok(())
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))
}

pub fn write_manifest(dir: &Path, rc: &RunConfig, outputs: &[&str]) -> Result<(), CliError> {
    write(dir, "manifest.json", &to_json(&Manifest::new(rc, outputs)))
}
