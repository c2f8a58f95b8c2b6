use std::path::Path;

use rdpb::harness::records::{read_records, RunRecord, METRIC_COLUMNS, STATUS_FAILED};
use rdpb::harness::sweep::{sweep_into, Grid, SweepConfig};
use rdpb::harness::train::{CONFIG_SNAPSHOT, LAST_FINITE_FILE, RESULTS_FILE, STAGE1_CHECKPOINT};
use rdpb::harness::{load_data, run_training, RunConfig};
use rdpb::objective::Stage;
use rdpb::Error;

fn small(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.train_limit = Some(512);
    cfg.data.validation_limit = Some(256);
    cfg.data.test_limit = Some(256);
    cfg.train.stage1_epochs = 1;
    cfg.train.stage2_epochs = 1;
    cfg.train.batch_size = 64;
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn final_test_row(rows: &[RunRecord], stage: u8) -> &RunRecord {
    rows.iter()
        .rfind(|r| r.stage == stage && r.split == "test")
        .expect("a test row")
}

fn metrics(r: &RunRecord) -> Vec<u64> {
    [
        r.accuracy,
        r.error_rate,
        r.mse,
        r.perception_est,
        r.perception_gated_frac,
        r.ce,
        r.rate_kl,
        r.total_loss,
    ]
    .iter()
    .map(|v| v.to_bits())
    .collect()
}

#[test]
fn zero_epochs_is_chance_level() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.train.stage1_epochs = 0;
    let out = run_training(&cfg, Stage::Classifier).unwrap();
    let s1 = out.stage1.unwrap();
    assert_eq!(s1.epoch, 0);
    assert!((s1.test.accuracy - 0.1).abs() < 0.08, "accuracy {}", s1.test.accuracy);
    assert!(out.run_dir.join(STAGE1_CHECKPOINT).exists());
}

#[test]
fn noiseless_fine_channel_learns() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.channel.sigma = 0.0;
    cfg.channel.levels = 1 << 20;
    cfg.train.stage1_epochs = 2;
    let out = run_training(&cfg, Stage::Classifier).unwrap();
    let s1 = out.stage1.unwrap();
    assert!(s1.test.ce < 10f64.ln(), "ce {}", s1.test.ce);
}

#[test]
fn rows_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_training(&small(dir.path()), Stage::Full).unwrap();
    let rows = read_records(&out.run_dir.join(RESULTS_FILE)).unwrap();
    assert!(rows.iter().any(|r| r.stage == 1));
    assert!(rows.iter().any(|r| r.stage == 2));
    for r in &rows {
        r.validate().unwrap();
        assert_eq!(r.error_rate + r.accuracy, 1.0);
        assert_eq!(r.run_id, out.run_id);
        if r.stage == 1 {
            assert_eq!((r.mse, r.perception_est), (0.0, 0.0));
        }
    }
    let name = out.run_dir.file_name().unwrap().to_str().unwrap();
    assert!(name.starts_with("run-") && name.ends_with(&small(dir.path()).hash()));
}

#[test]
fn zero_mu_reports_but_ignores_perception() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.weights.mu = 0.0;
    cfg.weights.lambda = 1.0;
    cfg.weights.threshold = 0.0;
    let out = run_training(&cfg, Stage::Full).unwrap();
    let rows = read_records(&out.run_dir.join(RESULTS_FILE)).unwrap();
    let r = final_test_row(&rows, 2);
    assert!(r.perception_est > 0.0);
    let expected = r.ce + cfg.weights.beta * r.rate_kl + cfg.weights.lambda * r.mse;
    assert!((r.total_loss - expected).abs() < 1e-9 * expected.abs().max(1.0));
}

#[test]
fn rerun_from_snapshot_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_training(&small(dir.path()), Stage::Full).unwrap();
    let snap = RunConfig::load(&first.run_dir.join(CONFIG_SNAPSHOT), &[]).unwrap();
    let second = run_training(&snap, Stage::Full).unwrap();
    assert_ne!(first.run_dir, second.run_dir);
    let a = read_records(&first.run_dir.join(RESULTS_FILE)).unwrap();
    let b = read_records(&second.run_dir.join(RESULTS_FILE)).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(metrics(x), metrics(y));
        assert_eq!((x.stage, x.epoch, &x.split), (y.stage, y.epoch, &y.split));
    }
    assert_eq!(METRIC_COLUMNS.len(), 9);
}

#[test]
fn divergence_aborts_and_keeps_last_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.optim.lr = 1e200;
    let err = run_training(&cfg, Stage::Classifier).unwrap_err();
    assert!(matches!(err, Error::Numeric { .. }), "{err}");
    let run_dir = std::fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
    assert!(run_dir.join(LAST_FINITE_FILE).exists());
}

fn sweep_cfg(out: &Path, grid: Grid) -> SweepConfig {
    SweepConfig {
        base: small(out),
        grid,
        stage: 2,
    }
}

fn strip_wall(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let wall = r.headers().unwrap().iter().position(|h| h == "wall_seconds").unwrap();
    r.records()
        .map(|row| {
            let mut v: Vec<String> = row.unwrap().iter().map(String::from).collect();
            v.remove(wall);
            v
        })
        .collect()
}

#[test]
fn one_cell_sweep_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_cfg(dir.path(), Grid::default());
    let (data, _) = load_data(&cfg.base.data).unwrap();
    let a = sweep_into(&cfg, &data, &dir.path().join("a")).unwrap();
    let b = sweep_into(&cfg, &data, &dir.path().join("b")).unwrap();
    assert_eq!(a.cells.len(), 1);
    let text = std::fs::read_to_string(&a.results).unwrap();
    assert!(text.starts_with("run_id,status,rate_bits"));
    assert!(text.lines().count() >= 2);
    assert_eq!(strip_wall(&a.results), strip_wall(&b.results));
}

#[test]
fn failed_cell_is_recorded_and_sweep_continues() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = sweep_cfg(
        dir.path(),
        Grid {
            levels: vec![1, 4],
            ..Grid::default()
        },
    );
    cfg.base.train.stage1_epochs = 0;
    cfg.base.train.stage2_epochs = 0;
    let (data, _) = load_data(&cfg.base.data).unwrap();
    let out = sweep_into(&cfg, &data, &dir.path().join("s")).unwrap();
    assert!(out.cells[0].error.is_some());
    assert!(out.cells[1].error.is_none());
    let rows = read_records(&out.results).unwrap();
    let failed: Vec<_> = rows.iter().filter(|r| r.status == STATUS_FAILED).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].levels, 1);
    assert!(rows.iter().any(|r| r.is_ok() && r.levels == 4 && r.stage == 2));
}

#[test]
fn stage1_is_shared_across_stage2_settings() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = sweep_cfg(
        dir.path(),
        Grid {
            perception_threshold: vec![0.06, f64::INFINITY],
            ..Grid::default()
        },
    );
    cfg.base.train.stage2_epochs = 0;
    let (data, _) = load_data(&cfg.base.data).unwrap();
    let out = sweep_into(&cfg, &data, &dir.path().join("s")).unwrap();
    assert!(!out.cells[0].stage1_cached);
    assert!(out.cells[1].stage1_cached);
    // A cached cell's snapshot points at the shared checkpoint.
    let snap = RunConfig::load(&out.dir.join(&out.cells[1].run_id).join(CONFIG_SNAPSHOT), &[]).unwrap();
    assert!(snap.train.stage1_checkpoint.unwrap().exists());
}
