//! Metrics CSV, run manifest and parameter hashing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamTree;

use super::config::RunConfig;
use super::eval::EvalMetrics;

/// One logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    #[serde(rename = "L_task")]
    pub task: f64,
    #[serde(rename = "L_cog")]
    pub cog: f64,
    #[serde(rename = "L_lb")]
    pub lb: f64,
    pub total: f64,
    pub eval_mse: f64,
    pub flops: f64,
    pub usage_entropy: f64,
}

pub const CSV_COLUMNS: [&str; 8] = ["step", "L_task", "L_cog", "L_lb", "total", "eval_mse", "flops", "usage_entropy"];

pub fn write_csv(history: &[LogRow], out: impl std::io::Write) -> Result<()> {
    if history.is_empty() {
        return Err(Error::Input("no metrics rows to export".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    for row in history {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(input: impl std::io::Read) -> Result<Vec<LogRow>> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(csv_error)).collect()
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Serde(format!("{other:?}")),
    }
}

/// Git-blob-style SHA-256 over every parameter's name, shape and
/// little-endian values, in tree order.
pub fn params_hash<T: ParamTree>(params: &T) -> String {
    let mut body = Vec::new();
    params.visit("", &mut |name, t| {
        body.extend_from_slice(name.as_bytes());
        body.push(0);
        for &s in t.shape() {
            body.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for &v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    });
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(&body);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub steps_run: usize,
    pub param_count: usize,
    pub params_sha256: String,
    pub final_eval: Option<EvalMetrics>,
    pub notes: Vec<String>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Fixed notes recorded with every run.
pub fn standard_notes(config: &RunConfig) -> Vec<String> {
    vec![
        format!(
            "learning rate {} is raised from the large-model 2e-5 because the toy width is small",
            config.lr
        ),
        "constant learning rate; warmup only when warmup_steps > 0".into(),
        "eval metric is action MSE and gripper accuracy on the synthetic task".into(),
    ]
}
