//! A short two-cell sweep over the perception threshold on a slice of the
//! data, followed by the report panels.
//!
//! ```text
//! cargo run --release --example sweep_report
//! ```

use rdpb::harness::report::emit_report;
use rdpb::harness::sweep::{sweep, Grid, SweepConfig};
use rdpb::harness::{load_data, RunConfig};

fn main() -> rdpb::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut base = RunConfig::default();
    base.data.train_limit = Some(2000);
    base.data.validation_limit = Some(500);
    base.data.test_limit = Some(500);
    base.train.stage1_epochs = 2;
    base.train.stage2_epochs = 2;
    base.output_dir = std::env::temp_dir().join("rdpb-examples");
    let cfg = SweepConfig {
        base,
        grid: Grid {
            perception_threshold: vec![0.06, f64::INFINITY],
            ..Grid::default()
        },
        stage: 2,
    };
    let (data, _) = load_data(&cfg.base.data)?;
    let out = sweep(&cfg, &data)?;
    println!("results: {}", out.results.display());
    let report = emit_report(&out.dir)?;
    for entry in std::fs::read_dir(&report)? {
        let p = entry?.path();
        println!("---- {}\n{}", p.display(), std::fs::read_to_string(&p)?);
    }
    Ok(())
}
