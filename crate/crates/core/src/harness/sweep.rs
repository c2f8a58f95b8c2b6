//! Grid sweeps over channel settings, weights and seeds.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dataset::MnistSplits;
use crate::error::{Error, Result};
use crate::objective::Stage;

use super::config::{apply_override, RunConfig, Seeds};
use super::records::{append_records, read_records, write_header, RunRecord, STATUS_FAILED};
use super::train::{train_stage1, train_stage2, CONFIG_SNAPSHOT, RESULTS_FILE};

pub const SWEEP_SNAPSHOT: &str = "sweep.toml";

/// Axes of the grid. An empty axis keeps the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub dim: Vec<usize>,
    pub levels: Vec<u64>,
    pub sigma: Vec<f64>,
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub perception_threshold: Vec<f64>,
    /// Base seeds; every stream is derived from each.
    pub seeds: Vec<u64>,
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl Grid {
    /// Cartesian product in a fixed order, seeds varying fastest.
    pub fn cells(&self, base: &RunConfig) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &dim in &axis(&self.dim, base.channel.dim) {
            for &levels in &axis(&self.levels, base.channel.levels) {
                for &sigma in &axis(&self.sigma, base.channel.sigma) {
                    for &beta in &axis(&self.beta, base.weights.beta) {
                        for &lambda in &axis(&self.lambda, base.weights.lambda) {
                            for &mu in &axis(&self.mu, base.weights.mu) {
                                for &p in &axis(&self.perception_threshold, base.weights.threshold) {
                                    for &seed in &axis(&self.seeds, base.seeds.base) {
                                        let mut c = base.clone();
                                        c.channel.dim = dim;
                                        c.channel.levels = levels;
                                        c.channel.sigma = sigma;
                                        c.weights.beta = beta;
                                        c.weights.lambda = lambda;
                                        c.weights.mu = mu;
                                        c.weights.threshold = p;
                                        if !self.seeds.is_empty() {
                                            c.seeds = Seeds::from_base(seed);
                                        }
                                        out.push(c);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: RunConfig,
    pub grid: Grid,
    /// 1 trains classifiers only; 2 adds the reconstruction stage.
    pub stage: u8,
}

impl SweepConfig {
    /// Reads a run config whose `[grid]` table lists the axes and whose
    /// optional top-level `stage` selects the last stage to train.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let grid: Grid = match table.remove("grid") {
            Some(v) => v.try_into().map_err(|e| Error::Config(format!("[grid]: {e}")))?,
            None => Grid::default(),
        };
        let stage = match table.remove("stage") {
            Some(toml::Value::Integer(n)) => u8::try_from(n).map_err(|_| Error::Config(format!("bad stage {n}")))?,
            Some(v) => return Err(Error::Config(format!("stage must be an integer, got {v}"))),
            None => 2,
        };
        Stage::from_number(stage)?;
        let base: RunConfig = table.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        base.validate()?;
        Ok(Self { base, grid, stage })
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::path(path))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        let mut t = toml::Table::try_from(&self.base).expect("run config serializes");
        t.insert("stage".into(), toml::Value::Integer(self.stage as i64));
        t.insert("grid".into(), toml::Value::try_from(&self.grid).expect("grid serializes"));
        toml::to_string(&t).expect("table serializes")
    }
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub run_id: String,
    pub config: RunConfig,
    pub error: Option<String>,
    pub stage1_cached: bool,
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub dir: PathBuf,
    pub results: PathBuf,
    pub cells: Vec<CellOutcome>,
}

/// Key under which a stage-1 checkpoint can be shared: everything except
/// the stage-2 weights and epochs.
fn stage1_key(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.weights.lambda = 0.0;
    c.weights.mu = 0.0;
    c.weights.threshold = 0.0;
    c.train.stage2_epochs = 0;
    c.train.stage1_checkpoint = None;
    c.hash()
}

fn failed_record(cfg: &RunConfig, run_id: &str, stage: u8) -> RunRecord {
    RunRecord {
        run_id: run_id.into(),
        status: STATUS_FAILED.into(),
        rate_bits: cfg.channel.rate_bits(),
        dim: cfg.channel.dim,
        levels: cfg.channel.levels,
        sigma: cfg.channel.sigma,
        beta: cfg.weights.beta,
        lambda: cfg.weights.lambda,
        mu: cfg.weights.mu,
        threshold: cfg.weights.threshold,
        seed: cfg.seeds.base,
        stage,
        epoch: 0,
        split: String::new(),
        accuracy: f64::NAN,
        error_rate: f64::NAN,
        mse: f64::NAN,
        perception_est: f64::NAN,
        perception_gated_frac: f64::NAN,
        ce: f64::NAN,
        rate_kl: f64::NAN,
        total_loss: f64::NAN,
        wall_seconds: f64::NAN,
    }
}

/// Runs every cell in `dir`, which must not exist yet. Each cell trains in
/// its own subdirectory; rows are appended to `dir/results.csv` as cells
/// finish. A failing cell is recorded with status `failed`.
pub fn sweep_into(sweep: &SweepConfig, data: &MnistSplits, dir: &Path) -> Result<SweepOutput> {
    let cells = sweep.grid.cells(&sweep.base);
    if cells.is_empty() {
        return Err(Error::Contract("grid has no cells".into()));
    }
    std::fs::create_dir_all(dir).map_err(Error::path(dir))?;
    let snap = dir.join(SWEEP_SNAPSHOT);
    std::fs::write(&snap, sweep.to_toml()).map_err(Error::path(&snap))?;
    let results = dir.join(RESULTS_FILE);
    write_header(&results)?;
    let mut cache: HashMap<String, PathBuf> = HashMap::new();
    let mut outcomes = Vec::new();
    for (i, cfg) in cells.into_iter().enumerate() {
        let run_id = format!("cell-{i:04}-{}", cfg.hash());
        let cell_dir = dir.join(&run_id);
        info!("sweep cell {i}: {run_id}");
        let key = stage1_key(&cfg);
        let cached = cache.get(&key).cloned();
        let stage1_cached = cached.is_some();
        let result = (|| -> Result<()> {
            cfg.validate()?;
            std::fs::create_dir_all(&cell_dir).map_err(Error::path(&cell_dir))?;
            let mut snapshot = cfg.clone();
            snapshot.train.stage1_checkpoint = cached.clone();
            let snap = cell_dir.join(CONFIG_SNAPSHOT);
            std::fs::write(&snap, snapshot.to_toml()).map_err(Error::path(&snap))?;
            write_header(&cell_dir.join(RESULTS_FILE))?;
            let ckpt = match &cached {
                Some(p) => p.clone(),
                None => {
                    let s1 = train_stage1(&cfg, data, &cell_dir, &run_id)?;
                    cache.insert(key.clone(), s1.checkpoint.clone());
                    s1.checkpoint
                }
            };
            if sweep.stage == 2 {
                train_stage2(&cfg, data, &ckpt, &cell_dir, &run_id)?;
            }
            Ok(())
        })();
        let error = result.err().map(|e| e.to_string());
        let rows = match &error {
            None => read_records(&cell_dir.join(RESULTS_FILE))?,
            Some(msg) => {
                warn!("sweep cell {run_id} failed: {msg}");
                let mut rows = if cell_dir.join(RESULTS_FILE).exists() {
                    read_records(&cell_dir.join(RESULTS_FILE)).unwrap_or_default()
                } else {
                    Vec::new()
                };
                rows.push(failed_record(&cfg, &run_id, sweep.stage));
                rows
            }
        };
        append_records(&results, &rows)?;
        outcomes.push(CellOutcome {
            run_id,
            config: cfg,
            error,
            stage1_cached,
        });
    }
    Ok(SweepOutput {
        dir: dir.to_path_buf(),
        results,
        cells: outcomes,
    })
}

/// Runs the sweep in `<output_dir>/sweep-<unix millis>-<hash>`.
pub fn sweep(sweep: &SweepConfig, data: &MnistSplits) -> Result<SweepOutput> {
    let millis = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let tag = hex::encode(&<sha2::Sha256 as sha2::Digest>::digest(sweep.to_toml().as_bytes())[..8]);
    let mut dir = sweep.base.output_dir.join(format!("sweep-{millis}-{tag}"));
    let mut k = 1;
    while dir.exists() {
        dir = sweep.base.output_dir.join(format!("sweep-{millis}-{tag}-{k}"));
        k += 1;
    }
    sweep_into(sweep, data, &dir)
}
