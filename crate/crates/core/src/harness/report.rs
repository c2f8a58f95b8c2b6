//! Plot-ready panel files and a JSON summary built from `results.csv`.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

use super::records::{read_records, RunRecord, RESULTS_SCHEMA_VERSION};
use super::train::RESULTS_FILE;

/// Perception value at which unconstrained (`P = inf`) runs are drawn.
pub const SHANNON_PLOT_PERCEPTION: f64 = 0.15;
/// Relative half-width of the distortion band around the median MSE.
pub const DISTORTION_BAND: f64 = 0.5;

pub const REPORT_DIR: &str = "report";
pub const EMBEDDING_FILE: &str = "embedding.csv";

pub const PANEL_DISTORTION_PERCEPTION: &str = "distortion_perception.csv";
pub const PANEL_PERCEPTION_RATE: &str = "perception_rate.csv";
pub const PANEL_ERROR_MSE: &str = "error_mse.csv";
pub const PANEL_EMBEDDING: &str = "embedding.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Perception coordinate used on plots.
pub fn plotted_perception(r: &RunRecord) -> f64 {
    if r.threshold.is_infinite() {
        SHANNON_PLOT_PERCEPTION
    } else {
        r.perception_est
    }
}

fn final_rows(records: &[RunRecord]) -> Vec<&RunRecord> {
    let mut rows: Vec<&RunRecord> = records
        .iter()
        .filter(|r| r.is_ok() && r.stage == 2 && r.split == "test")
        .collect();
    rows.sort_by(|a, b| {
        a.rate_bits
            .total_cmp(&b.rate_bits)
            .then(a.threshold.total_cmp(&b.threshold))
            .then(a.seed.cmp(&b.seed))
            .then(a.run_id.cmp(&b.run_id))
    });
    rows
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(Error::path(path))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BestRun {
    pub run_id: String,
    pub stage: u8,
    pub rate_bits: f64,
    /// `"inf"` for unconstrained runs.
    pub threshold: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportSummary {
    pub schema_version: u32,
    pub rows: usize,
    pub ok_rows: usize,
    pub failed_rows: usize,
    pub best_accuracy: Option<BestRun>,
    pub lowest_mse: Option<BestRun>,
    pub lowest_perception: Option<BestRun>,
    /// Highest test accuracy for each rate.
    pub best_accuracy_by_rate: Vec<BestRun>,
    pub distortion_band: Option<(f64, f64)>,
}

fn best(rows: &[&RunRecord], value: impl Fn(&RunRecord) -> f64, maximize: bool) -> Option<BestRun> {
    let pick = rows.iter().copied().reduce(|a, b| {
        let (va, vb) = (value(a), value(b));
        if (maximize && vb > va) || (!maximize && vb < va) {
            b
        } else {
            a
        }
    })?;
    Some(BestRun {
        run_id: pick.run_id.clone(),
        stage: pick.stage,
        rate_bits: pick.rate_bits,
        threshold: pick.threshold.to_string(),
        value: value(pick),
    })
}

/// Writes the panel CSVs and `summary.json` under `<run_dir>/report` and
/// returns that directory.
pub fn emit_report(run_dir: &Path) -> Result<PathBuf> {
    let records = read_records(&run_dir.join(RESULTS_FILE))?;
    let out = run_dir.join(REPORT_DIR);
    std::fs::create_dir_all(&out).map_err(Error::path(&out))?;
    let finals = final_rows(&records);

    write_csv(
        &out.join(PANEL_DISTORTION_PERCEPTION),
        &["rate_bits", "P", "seed", "run_id", "mse", "perception_plot", "perception_raw"],
        finals
            .iter()
            .map(|r| {
                vec![
                    r.rate_bits.to_string(),
                    r.threshold.to_string(),
                    r.seed.to_string(),
                    r.run_id.clone(),
                    r.mse.to_string(),
                    plotted_perception(r).to_string(),
                    r.perception_est.to_string(),
                ]
            })
            .collect(),
    )?;

    let band = if finals.is_empty() {
        None
    } else {
        let mut m: Vec<f64> = finals.iter().map(|r| r.mse).collect();
        m.sort_by(f64::total_cmp);
        let median = if m.len() % 2 == 1 {
            m[m.len() / 2]
        } else {
            (m[m.len() / 2 - 1] + m[m.len() / 2]) / 2.0
        };
        Some((median * (1.0 - DISTORTION_BAND), median * (1.0 + DISTORTION_BAND)))
    };
    let mut by_rate: Vec<(f64, Vec<&RunRecord>)> = Vec::new();
    if let Some((lo, hi)) = band {
        for r in finals.iter().filter(|r| r.mse >= lo && r.mse <= hi) {
            match by_rate.iter_mut().find(|(rate, _)| *rate == r.rate_bits) {
                Some((_, v)) => v.push(r),
                None => by_rate.push((r.rate_bits, vec![r])),
            }
        }
    }
    write_csv(
        &out.join(PANEL_PERCEPTION_RATE),
        &["rate_bits", "n", "mean_perception_plot", "mean_mse", "band_lo", "band_hi"],
        by_rate
            .iter()
            .map(|(rate, rows)| {
                let n = rows.len() as f64;
                let (lo, hi) = band.expect("rows imply a band");
                vec![
                    rate.to_string(),
                    rows.len().to_string(),
                    (rows.iter().map(|r| plotted_perception(r)).sum::<f64>() / n).to_string(),
                    (rows.iter().map(|r| r.mse).sum::<f64>() / n).to_string(),
                    lo.to_string(),
                    hi.to_string(),
                ]
            })
            .collect(),
    )?;

    write_csv(
        &out.join(PANEL_ERROR_MSE),
        &["rate_bits", "P", "seed", "run_id", "error_rate", "mse"],
        finals
            .iter()
            .map(|r| {
                vec![
                    r.rate_bits.to_string(),
                    r.threshold.to_string(),
                    r.seed.to_string(),
                    r.run_id.clone(),
                    r.error_rate.to_string(),
                    r.mse.to_string(),
                ]
            })
            .collect(),
    )?;

    let embedding_rows = match run_dir.join(EMBEDDING_FILE) {
        p if p.is_file() => {
            let mut r = csv::Reader::from_path(&p)?;
            let mut rows = Vec::new();
            for (i, rec) in r.records().enumerate() {
                let rec = rec.map_err(|e| Error::Schema(format!("{} row {}: {e}", p.display(), i + 2)))?;
                if rec.len() != 3 {
                    return Err(Error::Schema(format!("{} row {}: expected x,y,label", p.display(), i + 2)));
                }
                rows.push(rec.iter().map(str::to_string).collect());
            }
            rows
        }
        _ => Vec::new(),
    };
    write_csv(&out.join(PANEL_EMBEDDING), &["x", "y", "label"], embedding_rows)?;

    let tests: Vec<&RunRecord> = records.iter().filter(|r| r.is_ok() && r.split == "test").collect();
    let mut rates: Vec<f64> = tests.iter().map(|r| r.rate_bits).collect();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let summary = ReportSummary {
        schema_version: RESULTS_SCHEMA_VERSION,
        rows: records.len(),
        ok_rows: records.iter().filter(|r| r.is_ok()).count(),
        failed_rows: records.iter().filter(|r| !r.is_ok()).count(),
        best_accuracy: best(&tests, |r| r.accuracy, true),
        lowest_mse: best(&finals, |r| r.mse, false),
        lowest_perception: best(&finals, |r| r.perception_est, false),
        best_accuracy_by_rate: rates
            .iter()
            .filter_map(|&rate| {
                let rows: Vec<&RunRecord> = tests.iter().copied().filter(|r| r.rate_bits == rate).collect();
                best(&rows, |r| r.accuracy, true)
            })
            .collect(),
        distortion_band: band,
    };
    let path = out.join(SUMMARY_FILE);
    let mut body = serde_json::to_string_pretty(&summary)?;
    body.push('\n');
    std::fs::write(&path, body).map_err(Error::path(&path))?;
    Ok(out)
}
