//! Two-stage training, evaluation and run directories.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::transmit;
use crate::dataset::{batches, load_mnist, resolve_data_dir, LabeledImageSet, MnistSplits, Split, PIXELS};
use crate::error::{Error, Result};
use crate::model::{self, init_params, load_checkpoint, save_checkpoint, ModelParams, Trainable};
use crate::objective::{
    cross_entropy, gated_perception, gaussian_moment_kl, mse, rate_kl, rdpvb_forward, ColumnMoments, LossBreakdown,
    LossOptions, NoiseStreams, Stage,
};
use crate::tensor::{Graph, Tensor};

use super::config::{DataConfig, GateMode, RunConfig};
use super::optim::Adam;
use super::records::{append_records, write_header, RunRecord, STATUS_OK};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const RESULTS_FILE: &str = "results.csv";
pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt";
pub const LAST_FINITE_FILE: &str = "last_finite_breakdown.json";

/// Loads the splits named by `cfg` and truncates them to the configured
/// limits. Returns the directory that was read.
pub fn load_data(cfg: &DataConfig) -> Result<(MnistSplits, PathBuf)> {
    let dir = resolve_data_dir(cfg.dir.as_deref());
    let mut s = load_mnist(&dir)?;
    let cut = |set: &mut LabeledImageSet, limit: Option<usize>| {
        if let Some(n) = limit {
            *set = set.head(n);
        }
    };
    cut(&mut s.train, cfg.train_limit);
    cut(&mut s.validation, cfg.validation_limit);
    cut(&mut s.test, cfg.test_limit);
    Ok((s, dir))
}

/// Metrics of one split, computed from the encoder mean sent through the
/// channel with the fixed evaluation noise stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub ce: f64,
    pub rate_kl: f64,
    /// Zero in stage 1.
    pub mse: f64,
    /// Moment-matched KL over the whole split; zero in stage 1.
    pub perception: f64,
    pub perception_gated: bool,
    pub total: f64,
}

pub fn evaluate(params: &ModelParams, set: &LabeledImageSet, cfg: &RunConfig, stage: Stage) -> Result<EvalMetrics> {
    if set.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.eval);
    let n = set.len();
    let (mut correct, mut ce, mut rate, mut sq) = (0usize, 0.0, 0.0, 0.0);
    let mut mx = ColumnMoments::new(PIXELS);
    let mut mh = ColumnMoments::new(PIXELS);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(cfg.train.eval_batch) {
        let x = set.gather(chunk);
        let labels = set.gather_labels(chunk);
        let rows = chunk.len() as f64;
        let (mu, logvar) = model::encode(&x, params)?;
        rate += rate_kl(&mu, &logvar, cfg.channel.sigma)? * rows;
        let zhat = transmit(&mu, &cfg.channel, &mut rng)?;
        let lp = model::infer(&zhat, params)?;
        ce += cross_entropy(&lp, &labels)? * rows;
        correct += lp
            .argmax_rows()
            .iter()
            .zip(&labels)
            .filter(|(p, &y)| **p == y as usize)
            .count();
        if stage == Stage::Full {
            let xhat = model::reconstruct(&zhat, params)?;
            sq += mse(&x, &xhat)? * rows;
            mx.push(&x);
            mh.push(&xhat);
        }
    }
    let nf = n as f64;
    let (ce, rate, mse_v) = (ce / nf, rate / nf, sq / nf);
    let w = &cfg.weights;
    let (perception, gated_term, gated) = if stage == Stage::Full {
        let (a, b) = mx.finish();
        let (c, d) = mh.finish();
        let p = gaussian_moment_kl(&a, &b, &c, &d);
        let (term, gated) = gated_perception(p, w.mu, w.threshold);
        (p, term, gated)
    } else {
        (0.0, 0.0, true)
    };
    let total = ce + w.beta * rate + w.lambda * mse_v + gated_term;
    let m = EvalMetrics {
        accuracy: correct as f64 / nf,
        ce,
        rate_kl: rate,
        mse: mse_v,
        perception,
        perception_gated: gated,
        total,
    };
    if ![m.ce, m.rate_kl, m.mse, m.perception, m.total].iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric {
            msg: format!("evaluation on {} produced {m:?}", set.split.as_str()),
        });
    }
    Ok(m)
}

/// Received features `ẑ` for the first `n` records of `set`.
pub fn received_features(params: &ModelParams, set: &LabeledImageSet, n: usize, cfg: &RunConfig) -> Result<Tensor> {
    let n = n.min(set.len());
    let idx: Vec<usize> = (0..n).collect();
    let (mu, _) = model::encode(&set.gather(&idx), params)?;
    transmit(&mu, &cfg.channel, &mut ChaCha8Rng::seed_from_u64(cfg.seeds.eval))
}

/// One stage's result.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub checkpoint: PathBuf,
    pub params: ModelParams,
    pub records: Vec<RunRecord>,
    /// Epoch whose parameters were kept.
    pub epoch: usize,
    pub validation: EvalMetrics,
    pub test: EvalMetrics,
    /// `(epoch, gated)` for every step where the gate changed state.
    pub gate_transitions: Vec<(usize, bool)>,
}

#[allow(clippy::too_many_arguments)]
pub fn make_record(
    cfg: &RunConfig,
    run_id: &str,
    stage: Stage,
    epoch: usize,
    split: Split,
    m: &EvalMetrics,
    gated_frac: f64,
    wall_seconds: f64,
) -> RunRecord {
    RunRecord {
        run_id: run_id.to_string(),
        status: STATUS_OK.into(),
        rate_bits: cfg.channel.rate_bits(),
        dim: cfg.channel.dim,
        levels: cfg.channel.levels,
        sigma: cfg.channel.sigma,
        beta: cfg.weights.beta,
        lambda: cfg.weights.lambda,
        mu: cfg.weights.mu,
        threshold: cfg.weights.threshold,
        seed: cfg.seeds.base,
        stage: stage.number(),
        epoch,
        split: split.as_str().into(),
        accuracy: m.accuracy,
        error_rate: 1.0 - m.accuracy,
        mse: m.mse,
        perception_est: m.perception,
        perception_gated_frac: gated_frac,
        ce: m.ce,
        rate_kl: m.rate_kl,
        total_loss: m.total,
        wall_seconds,
    }
}

struct EpochStats {
    gated_steps: usize,
    steps: usize,
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    data: &'a MnistSplits,
    run_dir: &'a Path,
    stage: Stage,
    adam: Adam,
    noise: NoiseStreams,
    ema: Option<f64>,
    last_gated: Option<bool>,
    transitions: Vec<(usize, bool)>,
    last_finite: Option<LossBreakdown>,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a RunConfig, data: &'a MnistSplits, run_dir: &'a Path, stage: Stage) -> Self {
        let salt = stage.number() as u64;
        Self {
            cfg,
            data,
            run_dir,
            stage,
            adam: Adam::new(&cfg.optim),
            noise: NoiseStreams {
                reparam: ChaCha8Rng::seed_from_u64(cfg.seeds.reparam.wrapping_add(salt)),
                channel: ChaCha8Rng::seed_from_u64(cfg.seeds.channel.wrapping_add(salt)),
            },
            ema: None,
            last_gated: None,
            transitions: Vec::new(),
            last_finite: None,
        }
    }

    fn trainable(&self) -> Trainable {
        match self.stage {
            Stage::Classifier => Trainable::Classifier,
            Stage::Full => Trainable::All,
        }
    }

    fn epoch(&mut self, params: &mut ModelParams, epoch: usize) -> Result<EpochStats> {
        let cfg = self.cfg;
        let seed = cfg
            .seeds
            .batching
            .wrapping_add((self.stage.number() as u64) << 32)
            .wrapping_add(epoch as u64);
        let mut stats = EpochStats { gated_steps: 0, steps: 0 };
        for batch in batches(&self.data.train, cfg.train.batch_size, seed)? {
            let mut g = Graph::new();
            let model = params.bind(&mut g, self.trainable());
            let gate_estimate = match cfg.train.gate {
                GateMode::Batch => None,
                GateMode::Ema { .. } => self.ema,
            };
            let opts = LossOptions {
                mc_samples: cfg.train.mc_samples,
                gate_estimate,
                surrogate_channel: false,
            };
            let forward = rdpvb_forward(
                &mut g,
                &model,
                &batch.x,
                &batch.labels,
                &cfg.channel,
                &cfg.weights,
                &mut self.noise,
                self.stage,
                &opts,
            );
            let (loss, br) = match forward {
                Ok(v) => v,
                Err(e @ Error::Numeric { .. }) => {
                    self.persist_last_finite()?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            g.backward(loss)?;
            let grads = model
                .vars()
                .into_iter()
                .map(|v| g.take_grad(v).ok_or_else(|| Error::State("missing parameter gradient".into())))
                .collect::<Result<Vec<_>>>()?;
            let mut named = params.named_tensors_mut();
            named.truncate(grads.len());
            let mut slots: Vec<&mut Tensor> = named.into_iter().map(|(_, t)| t).collect();
            self.adam.update(&mut slots, &grads)?;
            if !params.all_finite() {
                self.persist_last_finite()?;
                return Err(Error::Numeric {
                    msg: format!("parameters diverged at epoch {epoch}"),
                });
            }
            self.last_finite = Some(br);

            if self.stage == Stage::Full {
                if let GateMode::Ema { decay } = cfg.train.gate {
                    self.ema = Some(match self.ema {
                        Some(e) => decay * e + (1.0 - decay) * br.perception,
                        None => br.perception,
                    });
                }
                if self.last_gated != Some(br.perception_gated) {
                    info!(
                        "epoch {epoch} step {}: perception gate {} (estimate {:.5}, P = {})",
                        stats.steps,
                        if br.perception_gated { "closed" } else { "open" },
                        br.perception,
                        cfg.weights.threshold
                    );
                    self.transitions.push((epoch, br.perception_gated));
                    self.last_gated = Some(br.perception_gated);
                }
                stats.gated_steps += br.perception_gated as usize;
            }
            stats.steps += 1;
        }
        Ok(stats)
    }

    fn persist_last_finite(&self) -> Result<()> {
        let path = self.run_dir.join(LAST_FINITE_FILE);
        let body = serde_json::to_string_pretty(&self.last_finite)?;
        std::fs::write(&path, body).map_err(Error::path(&path))
    }
}

fn gated_frac(stats: &EpochStats) -> f64 {
    if stats.steps == 0 {
        0.0
    } else {
        stats.gated_steps as f64 / stats.steps as f64
    }
}

/// Optimizes `ce + β·rate` and keeps the parameters with the best
/// validation accuracy (epoch 0 is the initialization).
pub fn train_stage1(cfg: &RunConfig, data: &MnistSplits, run_dir: &Path, run_id: &str) -> Result<StageOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let stage = Stage::Classifier;
    let ckpt = run_dir.join(STAGE1_CHECKPOINT);
    let results = run_dir.join(RESULTS_FILE);
    let mut params = init_params(cfg.seeds.params, &cfg.arch, cfg.channel.dim)?;
    let mut trainer = Trainer::new(cfg, data, run_dir, stage);
    let mut records = Vec::new();

    let mut best = evaluate(&params, &data.validation, cfg, stage)?;
    let mut best_epoch = 0;
    let mut best_params = params.clone();
    save_checkpoint(&params, &ckpt)?;
    let rec = make_record(cfg, run_id, stage, 0, Split::Validation, &best, 0.0, start.elapsed().as_secs_f64());
    append_records(&results, std::slice::from_ref(&rec))?;
    records.push(rec);

    for epoch in 1..=cfg.train.stage1_epochs {
        trainer.epoch(&mut params, epoch)?;
        let m = evaluate(&params, &data.validation, cfg, stage)?;
        info!("stage 1 epoch {epoch}: validation accuracy {:.4}", m.accuracy);
        let rec = make_record(cfg, run_id, stage, epoch, Split::Validation, &m, 0.0, start.elapsed().as_secs_f64());
        append_records(&results, std::slice::from_ref(&rec))?;
        records.push(rec);
        if m.accuracy > best.accuracy {
            best = m;
            best_epoch = epoch;
            best_params = params.clone();
            save_checkpoint(&params, &ckpt)?;
        }
    }
    let test = evaluate(&best_params, &data.test, cfg, stage)?;
    let rec = make_record(cfg, run_id, stage, best_epoch, Split::Test, &test, 0.0, start.elapsed().as_secs_f64());
    append_records(&results, std::slice::from_ref(&rec))?;
    records.push(rec);
    Ok(StageOutcome {
        checkpoint: ckpt,
        params: best_params,
        records,
        epoch: best_epoch,
        validation: best,
        test,
        gate_transitions: Vec::new(),
    })
}

/// Optimizes the full objective from a stage-1 checkpoint and keeps the
/// final parameters.
pub fn train_stage2(
    cfg: &RunConfig,
    data: &MnistSplits,
    stage1_checkpoint: &Path,
    run_dir: &Path,
    run_id: &str,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let stage = Stage::Full;
    let mut params = load_checkpoint(stage1_checkpoint)?;
    if params.dim != cfg.channel.dim || params.reconstruction.is_none() {
        return Err(Error::Contract(format!(
            "{} does not match the configured model",
            stage1_checkpoint.display()
        )));
    }
    let ckpt = run_dir.join(STAGE2_CHECKPOINT);
    let results = run_dir.join(RESULTS_FILE);
    let mut trainer = Trainer::new(cfg, data, run_dir, stage);
    let mut records = Vec::new();
    let mut validation = evaluate(&params, &data.validation, cfg, stage)?;
    let rec = make_record(cfg, run_id, stage, 0, Split::Validation, &validation, 0.0, start.elapsed().as_secs_f64());
    append_records(&results, std::slice::from_ref(&rec))?;
    records.push(rec);
    let mut frac = 0.0;
    for epoch in 1..=cfg.train.stage2_epochs {
        let stats = trainer.epoch(&mut params, epoch)?;
        frac = gated_frac(&stats);
        validation = evaluate(&params, &data.validation, cfg, stage)?;
        info!(
            "stage 2 epoch {epoch}: accuracy {:.4} mse {:.5} perception {:.5} gated {:.2}",
            validation.accuracy, validation.mse, validation.perception, frac
        );
        let rec = make_record(cfg, run_id, stage, epoch, Split::Validation, &validation, frac, start.elapsed().as_secs_f64());
        append_records(&results, std::slice::from_ref(&rec))?;
        records.push(rec);
    }
    save_checkpoint(&params, &ckpt)?;
    let test = evaluate(&params, &data.test, cfg, stage)?;
    let epoch = cfg.train.stage2_epochs;
    let rec = make_record(cfg, run_id, stage, epoch, Split::Test, &test, frac, start.elapsed().as_secs_f64());
    append_records(&results, std::slice::from_ref(&rec))?;
    records.push(rec);
    Ok(StageOutcome {
        checkpoint: ckpt,
        params,
        records,
        epoch,
        validation,
        test,
        gate_transitions: trainer.transitions,
    })
}

/// Creates `<output_dir>/run-<unix millis>-<config hash>` holding the
/// config snapshot and an empty results file.
pub fn create_run_dir(cfg: &RunConfig) -> Result<(PathBuf, String)> {
    let millis = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let stem = format!("run-{millis}-{}", cfg.hash());
    std::fs::create_dir_all(&cfg.output_dir).map_err(Error::path(&cfg.output_dir))?;
    let mut name = stem.clone();
    let mut k = 1;
    while cfg.output_dir.join(&name).exists() {
        name = format!("{stem}-{k}");
        k += 1;
    }
    let dir = cfg.output_dir.join(&name);
    std::fs::create_dir(&dir).map_err(Error::path(&dir))?;
    let snap = dir.join(CONFIG_SNAPSHOT);
    std::fs::write(&snap, cfg.to_toml()).map_err(Error::path(&snap))?;
    write_header(&dir.join(RESULTS_FILE))?;
    Ok((dir, name))
}

#[derive(Debug)]
pub struct RunOutput {
    pub run_dir: PathBuf,
    pub run_id: String,
    pub data_dir: PathBuf,
    pub stage1: Option<StageOutcome>,
    pub stage2: Option<StageOutcome>,
}

/// Runs stage 1, or stage 2 from `train.stage1_checkpoint` (running stage 1
/// first when that is unset), in a fresh run directory.
pub fn run_training(cfg: &RunConfig, stage: Stage) -> Result<RunOutput> {
    cfg.validate()?;
    let (data, data_dir) = load_data(&cfg.data)?;
    let (run_dir, run_id) = create_run_dir(cfg)?;
    info!("run {run_id}: data from {}", data_dir.display());
    let mut out = RunOutput {
        run_dir: run_dir.clone(),
        run_id: run_id.clone(),
        data_dir,
        stage1: None,
        stage2: None,
    };
    let stage1_ckpt = match (stage, &cfg.train.stage1_checkpoint) {
        (Stage::Full, Some(p)) => p.clone(),
        _ => {
            let s1 = train_stage1(cfg, &data, &run_dir, &run_id)?;
            let p = s1.checkpoint.clone();
            out.stage1 = Some(s1);
            p
        }
    };
    if stage == Stage::Full {
        out.stage2 = Some(train_stage2(cfg, &data, &stage1_ckpt, &run_dir, &run_id)?);
    }
    Ok(out)
}
