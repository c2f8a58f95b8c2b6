use std::path::Path;

use rdpb::dataset::FetchManifest;
use rdpb::harness::sweep::SweepConfig;
use rdpb::harness::RunConfig;

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/configs"))
}

#[test]
fn documented_defaults_match_the_code() {
    let cfg = RunConfig::load(&configs().join("default.toml"), &[]).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn overrides_apply_on_top_of_the_file() {
    let cfg = RunConfig::load(
        &configs().join("default.toml"),
        &["channel.dim=2".into(), "weights.perception_threshold=0.06".into()],
    )
    .unwrap();
    assert_eq!(cfg.channel.dim, 2);
    assert_eq!(cfg.weights.threshold, 0.06);
}

#[test]
fn sweep_configs_parse() {
    let t = SweepConfig::load(&configs().join("sweep-tradeoff.toml"), &[]).unwrap();
    assert_eq!(t.grid.cells(&t.base).len(), 6);
    let r = SweepConfig::load(&configs().join("sweep-rate.toml"), &[]).unwrap();
    assert_eq!(r.grid.cells(&r.base).len(), 18);
}

#[test]
fn manifest_template_needs_real_digests() {
    let text = std::fs::read_to_string(configs().join("mnist-manifest.toml.example")).unwrap();
    assert!(FetchManifest::from_toml_str(&text).is_err());
    let filled = text.replace("<64 hex digits>", &"ab".repeat(32));
    assert_eq!(FetchManifest::from_toml_str(&filled).unwrap().file.len(), 4);
}
