//! Trains a classifier briefly, embeds the received features of test images
//! in two dimensions and prints the objective trace.
//!
//! ```text
//! cargo run --release --example tsne -- [points]
//! ```

use rdpb::harness::train::{create_run_dir, received_features};
use rdpb::harness::tsne::tsne_embed;
use rdpb::harness::{load_data, train_stage1, RunConfig};

fn main() -> rdpb::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(Ok(500), |s| s.parse()).expect("points must be an integer");
    let mut cfg = RunConfig::default();
    cfg.train.stage1_epochs = 2;
    cfg.output_dir = std::env::temp_dir().join("rdpb-examples");
    let (data, _) = load_data(&cfg.data)?;
    let (run_dir, run_id) = create_run_dir(&cfg)?;
    let s1 = train_stage1(&cfg, &data, &run_dir, &run_id)?;
    println!("test accuracy {:.4}", s1.test.accuracy);

    let feats = received_features(&s1.params, &data.test, n, &cfg)?;
    let emb = tsne_embed(&feats, 30.0, 1000, 0)?;
    for p in &emb.trace {
        println!("iteration {:>4}: KL {:.4}", p.iter, p.kl);
    }
    let labels = &data.test.labels()[..feats.rows()];
    for (i, label) in labels.iter().enumerate().take(5) {
        let r = emb.coords.row(i);
        println!("point {i}: ({:.2}, {:.2}) label {label}", r[0], r[1]);
    }
    Ok(())
}
