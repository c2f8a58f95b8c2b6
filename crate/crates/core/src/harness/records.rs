//! Result rows and the `results.csv` format.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Bumped whenever the column set or order changes.
pub const RESULTS_SCHEMA_VERSION: u32 = 1;

pub const RESULTS_HEADER: [&str; 23] = [
    "run_id",
    "status",
    "rate_bits",
    "dim",
    "L",
    "sigma",
    "beta",
    "lambda",
    "mu",
    "P",
    "seed",
    "stage",
    "epoch",
    "split",
    "accuracy",
    "error_rate",
    "mse",
    "perception_est",
    "perception_gated_frac",
    "ce",
    "rate_kl",
    "total_loss",
    "wall_seconds",
];

/// Columns that a rerun must reproduce exactly.
pub const METRIC_COLUMNS: [&str; 9] = [
    "accuracy",
    "error_rate",
    "mse",
    "perception_est",
    "perception_gated_frac",
    "ce",
    "rate_kl",
    "total_loss",
    "epoch",
];

pub const STATUS_OK: &str = "ok";
pub const STATUS_FAILED: &str = "failed";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub run_id: String,
    pub status: String,
    pub rate_bits: f64,
    pub dim: usize,
    pub levels: u64,
    pub sigma: f64,
    pub beta: f64,
    pub lambda: f64,
    pub mu: f64,
    /// Perception threshold; `inf` for the unconstrained setting.
    pub threshold: f64,
    pub seed: u64,
    pub stage: u8,
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub error_rate: f64,
    pub mse: f64,
    pub perception_est: f64,
    /// Share of training steps in the epoch where the gate held the
    /// perception term at zero.
    pub perception_gated_frac: f64,
    pub ce: f64,
    pub rate_kl: f64,
    pub total_loss: f64,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_ok() {
            return Ok(());
        }
        let metrics = [
            self.accuracy,
            self.error_rate,
            self.mse,
            self.perception_est,
            self.perception_gated_frac,
            self.ce,
            self.rate_kl,
            self.total_loss,
            self.wall_seconds,
        ];
        if metrics.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("run {} has a non-finite metric", self.run_id)));
        }
        if (self.error_rate - (1.0 - self.accuracy)).abs() > 1e-12 {
            return Err(Error::Schema(format!(
                "run {}: error_rate {} != 1 - accuracy {}",
                self.run_id, self.error_rate, self.accuracy
            )));
        }
        Ok(())
    }

    pub fn to_row(&self) -> Vec<String> {
        let mut row = vec![
            self.run_id.clone(),
            self.status.clone(),
            self.rate_bits.to_string(),
            self.dim.to_string(),
            self.levels.to_string(),
            self.sigma.to_string(),
            self.beta.to_string(),
            self.lambda.to_string(),
            self.mu.to_string(),
            self.threshold.to_string(),
            self.seed.to_string(),
            self.stage.to_string(),
        ];
        if self.is_ok() {
            row.extend([
                self.epoch.to_string(),
                self.split.clone(),
                self.accuracy.to_string(),
                self.error_rate.to_string(),
                self.mse.to_string(),
                self.perception_est.to_string(),
                self.perception_gated_frac.to_string(),
                self.ce.to_string(),
                self.rate_kl.to_string(),
                self.total_loss.to_string(),
                self.wall_seconds.to_string(),
            ]);
        } else {
            row.extend([String::new(), self.split.clone()]);
            row.extend(std::iter::repeat_n(String::new(), 9));
        }
        row
    }

    /// Parses one data row; `line` is used in error messages.
    pub fn from_row(row: &csv::StringRecord, line: u64) -> Result<Self> {
        if row.len() != RESULTS_HEADER.len() {
            return Err(Error::Schema(format!(
                "row {line}: {} fields, expected {}",
                row.len(),
                RESULTS_HEADER.len()
            )));
        }
        let field = |i: usize| &row[i];
        let status = field(1).to_string();
        let ok = status == STATUS_OK;
        fn num<T: std::str::FromStr>(s: &str, col: &str, line: u64) -> Result<T> {
            s.trim()
                .parse()
                .map_err(|_| Error::Schema(format!("row {line}: column {col} has bad value {s:?}")))
        }
        let metric = |i: usize| -> Result<f64> {
            if ok {
                num(field(i), RESULTS_HEADER[i], line)
            } else {
                Ok(f64::NAN)
            }
        };
        let rec = RunRecord {
            run_id: field(0).to_string(),
            status,
            rate_bits: num(field(2), "rate_bits", line)?,
            dim: num(field(3), "dim", line)?,
            levels: num(field(4), "L", line)?,
            sigma: num(field(5), "sigma", line)?,
            beta: num(field(6), "beta", line)?,
            lambda: num(field(7), "lambda", line)?,
            mu: num(field(8), "mu", line)?,
            threshold: num(field(9), "P", line)?,
            seed: num(field(10), "seed", line)?,
            stage: num(field(11), "stage", line)?,
            epoch: if ok { num(field(12), "epoch", line)? } else { 0 },
            split: field(13).to_string(),
            accuracy: metric(14)?,
            error_rate: metric(15)?,
            mse: metric(16)?,
            perception_est: metric(17)?,
            perception_gated_frac: metric(18)?,
            ce: metric(19)?,
            rate_kl: metric(20)?,
            total_loss: metric(21)?,
            wall_seconds: metric(22)?,
        };
        rec.validate()
            .map_err(|e| Error::Schema(format!("row {line}: {e}")))?;
        Ok(rec)
    }
}

/// Appends rows to `path`, writing the header first when the file is new.
pub fn append_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path).map_err(Error::path(path))?.len() == 0;
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(Error::path(path))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(RESULTS_HEADER)?;
    }
    for r in records {
        r.validate()?;
        w.write_record(r.to_row())?;
    }
    w.flush().map_err(Error::path(path))?;
    Ok(())
}

/// Creates `path` with only the header row.
pub fn write_header(path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(Error::path(path))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    f.write_all(&bytes).map_err(Error::path(path))?;
    Ok(())
}

/// Reads every row, checking the header and each metric.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().ne(RESULTS_HEADER.iter().copied()) {
        return Err(Error::Schema(format!(
            "{}: header does not match schema version {RESULTS_SCHEMA_VERSION}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| Error::Schema(format!("row {}: {e}", i + 2)))?;
        out.push(RunRecord::from_row(&row, i as u64 + 2)?);
    }
    Ok(out)
}
