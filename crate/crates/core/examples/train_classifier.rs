//! Stage-1 training of the encoder and classifier at the default operating
//! point (dim 8, 4 levels, noise 0.1), then the test accuracy of the best
//! validation checkpoint.
//!
//! ```text
//! cargo run --release --example train_classifier -- [epochs]
//! ```

use rdpb::harness::{load_data, train_stage1, RunConfig};

fn main() -> rdpb::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let epochs = std::env::args().nth(1).map_or(Ok(10), |s| s.parse()).expect("epochs must be an integer");
    let mut cfg = RunConfig::default();
    cfg.train.stage1_epochs = epochs;
    cfg.output_dir = std::env::temp_dir().join("rdpb-examples");

    let (data, dir) = load_data(&cfg.data)?;
    println!("data: {} ({} train / {} validation / {} test)", dir.display(), data.train.len(), data.validation.len(), data.test.len());
    let (run_dir, run_id) = rdpb::harness::train::create_run_dir(&cfg)?;
    let out = train_stage1(&cfg, &data, &run_dir, &run_id)?;
    println!(
        "rate {} bits: best validation accuracy {:.4} at epoch {}, test accuracy {:.4}",
        cfg.channel.rate_bits(),
        out.validation.accuracy,
        out.epoch,
        out.test.accuracy
    );
    println!("checkpoint: {}", out.checkpoint.display());
    Ok(())
}
