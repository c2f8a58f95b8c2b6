use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rdpb::dataset::{load_mnist, resolve_data_dir, FetchManifest, FetchOptions, Split};
use rdpb::harness::report::{emit_report, EMBEDDING_FILE};
use rdpb::harness::sweep::{sweep, SweepConfig};
use rdpb::harness::train::received_features;
use rdpb::harness::tsne::tsne_embed;
use rdpb::harness::{load_data, run_training, RunConfig};
use rdpb::model::load_checkpoint;
use rdpb::objective::Stage;
use rdpb::oracle;
use rdpb::Error;

#[derive(Parser)]
#[command(name = "rdpb", version, about = "Semantic communication over a quantized AWGN channel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download or describe the MNIST files.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Train one run; stage 2 runs stage 1 first unless
    /// `train.stage1_checkpoint` is set.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Override a config key, e.g. `--set channel.dim=2`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train every cell of the `[grid]` in a config file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Exact checks on small discrete systems.
    Oracle {
        #[command(subcommand)]
        action: OracleAction,
    },
    /// Embed received features of a trained model in two dimensions.
    Tsne {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config for the channel and evaluation seed; defaults to the
        /// `config.toml` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write panel CSVs and a summary for a run or sweep directory.
    Report { run_dir: PathBuf },
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Download the files listed in a manifest, checking each SHA-256.
    Fetch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "data/mnist")]
        dest: PathBuf,
        #[arg(long, default_value_t = 3)]
        attempts: u32,
    },
    /// Print split sizes and label counts.
    Inspect {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum OracleAction {
    /// Check the variational bound decomposition on random systems.
    Verify {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&PathBuf>, overrides: &[String]) -> rdpb::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p, overrides),
        None => RunConfig::from_toml_str("", overrides),
    }
}

fn run(cli: Cli) -> rdpb::Result<()> {
    match cli.command {
        Command::Dataset { action: DatasetAction::Fetch { manifest, dest, attempts } } => {
            let m = FetchManifest::load(&manifest)?;
            let opts = FetchOptions { attempts, ..FetchOptions::default() };
            for p in m.fetch_all(&dest, &opts)? {
                println!("{}", p.display());
            }
        }
        Command::Dataset { action: DatasetAction::Inspect { dir } } => {
            let dir = resolve_data_dir(dir.as_deref());
            let s = load_mnist(&dir)?;
            let splits: Vec<_> = [Split::Train, Split::Validation, Split::Test]
                .into_iter()
                .map(|split| {
                    let set = s.get(split);
                    serde_json::json!({
                        "split": split.as_str(),
                        "records": set.len(),
                        "label_counts": set.label_histogram(),
                    })
                })
                .collect();
            let summary = serde_json::json!({ "dir": dir, "splits": splits });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Train { config, stage, overrides } => {
            let cfg = load_config(config.as_ref(), &overrides)?;
            let out = run_training(&cfg, Stage::from_number(stage)?)?;
            println!("run directory: {}", out.run_dir.display());
            for (n, s) in [(1, &out.stage1), (2, &out.stage2)] {
                if let Some(s) = s {
                    println!(
                        "stage {n}: epoch {} validation accuracy {:.4}, test accuracy {:.4}, test mse {:.5}, perception {:.5}",
                        s.epoch, s.validation.accuracy, s.test.accuracy, s.test.mse, s.test.perception
                    );
                }
            }
        }
        Command::Sweep { config, overrides } => {
            let s = SweepConfig::load(&config, &overrides)?;
            let (data, _) = load_data(&s.base.data)?;
            let out = sweep(&s, &data)?;
            let failed = out.cells.iter().filter(|c| c.error.is_some()).count();
            println!("{} cells ({failed} failed): {}", out.cells.len(), out.results.display());
        }
        Command::Oracle { action: OracleAction::Verify { instances, seed } } => {
            let summary = oracle::verify(instances, seed)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if !summary.passed {
                return Err(Error::Consistency("bound decomposition check failed".into()));
            }
        }
        Command::Tsne { checkpoint, config, split, n, perplexity, iters, seed, out } => {
            let ckpt_dir = checkpoint.parent().map(PathBuf::from).unwrap_or_default();
            let cfg_path = config.unwrap_or_else(|| ckpt_dir.join("config.toml"));
            let cfg = if cfg_path.is_file() { RunConfig::load(&cfg_path, &[])? } else { RunConfig::default() };
            let params = load_checkpoint(&checkpoint)?;
            let mut cfg = cfg;
            cfg.channel.dim = params.dim;
            let (data, _) = load_data(&cfg.data)?;
            let set = data.get(split);
            let features = received_features(&params, set, n, &cfg)?;
            let e = tsne_embed(&features, perplexity, iters, seed)?;
            let out = out.unwrap_or(ckpt_dir);
            std::fs::create_dir_all(&out)?;
            let mut w = csv::Writer::from_path(out.join(EMBEDDING_FILE))?;
            w.write_record(["x", "y", "label"])?;
            for (i, &label) in set.labels()[..e.coords.rows()].iter().enumerate() {
                let r = e.coords.row(i);
                w.write_record([r[0].to_string(), r[1].to_string(), label.to_string()])?;
            }
            w.flush()?;
            let trace = out.join("tsne_trace.json");
            std::fs::write(&trace, serde_json::to_string_pretty(&e.trace)?)?;
            let (first, last) = (e.trace[0].kl, e.trace[e.trace.len() - 1].kl);
            println!("{} points, KL {first:.4} -> {last:.4}: {}", e.coords.rows(), out.display());
        }
        Command::Report { run_dir } => {
            println!("{}", emit_report(&run_dir)?.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
