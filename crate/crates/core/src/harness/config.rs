//! Run configuration, read from TOML with `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::model::Arch;
use crate::objective::RdpbWeights;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with the four IDX files; see [`crate::dataset::resolve_data_dir`].
    pub dir: Option<PathBuf>,
    /// Keep only the first `n` records of each split.
    pub train_limit: Option<usize>,
    pub validation_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub algorithm: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            algorithm: "adam".into(),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How the perception gate reads the estimate it compares against `P`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum GateMode {
    /// The current minibatch estimate.
    Batch,
    /// An exponential moving average of minibatch estimates.
    Ema { decay: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub mc_samples: usize,
    pub gate: GateMode,
    /// Rows per forward pass during evaluation.
    pub eval_batch: usize,
    /// Stage 2 starts from this checkpoint; when absent stage 1 runs first.
    pub stage1_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            stage1_epochs: 10,
            stage2_epochs: 10,
            mc_samples: 1,
            gate: GateMode::Batch,
            eval_batch: 1000,
            stage1_checkpoint: None,
        }
    }
}

/// Independent random streams. `base` identifies the run in result rows;
/// streams missing from a config file are derived from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "SeedsFile")]
pub struct Seeds {
    pub base: u64,
    pub params: u64,
    pub batching: u64,
    pub channel: u64,
    pub reparam: u64,
    /// Channel noise used during evaluation, fixed across epochs.
    pub eval: u64,
}

impl Seeds {
    /// Derives every stream from one number with SplitMix64 steps, kept to
    /// 63 bits so they fit a TOML integer.
    pub fn from_base(base: u64) -> Self {
        let mut state = base;
        let mut next = || {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            (z ^ (z >> 31)) >> 1
        };
        Self {
            base,
            params: next(),
            batching: next(),
            channel: next(),
            reparam: next(),
            eval: next(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SeedsFile {
    #[serde(default)]
    base: u64,
    params: Option<u64>,
    batching: Option<u64>,
    channel: Option<u64>,
    reparam: Option<u64>,
    eval: Option<u64>,
}

impl From<SeedsFile> for Seeds {
    fn from(f: SeedsFile) -> Self {
        let d = Seeds::from_base(f.base);
        Seeds {
            base: f.base,
            params: f.params.unwrap_or(d.params),
            batching: f.batching.unwrap_or(d.batching),
            channel: f.channel.unwrap_or(d.channel),
            reparam: f.reparam.unwrap_or(d.reparam),
            eval: f.eval.unwrap_or(d.eval),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_base(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub channel: ChannelConfig,
    pub weights: RdpbWeights,
    pub arch: Arch,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub seeds: Seeds,
    /// Only `"f64"` is supported.
    pub precision: String,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            channel: ChannelConfig::default(),
            weights: RdpbWeights::default(),
            arch: Arch::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            seeds: Seeds::default(),
            precision: "f64".into(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.weights.validate()?;
        if self.precision != "f64" {
            return Err(Error::Config(format!(
                "precision {:?} is not supported; use \"f64\"",
                self.precision
            )));
        }
        if self.optim.algorithm != "adam" {
            return Err(Error::Config(format!("unknown optimizer {:?}", self.optim.algorithm)));
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.train.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.train.mc_samples == 0 || self.train.eval_batch == 0 {
            return Err(Error::Config("mc_samples and eval_batch must be positive".into()));
        }
        if let GateMode::Ema { decay } = self.train.gate {
            if !(0.0..1.0).contains(&decay) {
                return Err(Error::Config(format!("gate decay must lie in [0, 1), got {decay}")));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::path(path))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// First 8 bytes of the SHA-256 of the TOML snapshot, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..8])
    }
}

/// Sets a dotted key in a TOML table. The value is parsed as a TOML value
/// and kept as a string when that fails.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
