//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Training criteria use the dataset found by
//! `resolve_data_dir` (set `RDPB_DATA_DIR` to point at the full files).

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use rdpb::channel::{awgn, quantize_value, transmit_node, transmit_surrogate_node, ChannelConfig};
use rdpb::harness::records::{read_records, RunRecord};
use rdpb::harness::sweep::{sweep_into, Grid, SweepConfig};
use rdpb::harness::train::{received_features, CONFIG_SNAPSHOT, RESULTS_FILE};
use rdpb::harness::tsne::tsne_embed;
use rdpb::harness::{load_data, run_training, RunConfig};
use rdpb::model::{init_params_for_input, Arch, ModelParams};
use rdpb::objective::{perception_hist_kl, perception_moment_kl, rdpvb_grad_check, RdpbWeights, Stage};
use rdpb::oracle::{exact_rdpb, random_system, verify};
use rdpb::{grad_check, Graph, Tensor, Var};

#[allow(dead_code)]
#[path = "common/brute.rs"]
mod brute;

/// Reference test accuracy at two bits per feature vector.
const REFERENCE_ACCURACY_R2: f64 = 0.9765;

/// Criteria that cannot pass as stated. They still run and print FAIL; only
/// other failures make the run exit nonzero.
const KNOWN_RED: &[&str] = &["5b"];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, detail: String) -> Outcome {
    let t = start.elapsed();
    check(t < limit, format!("{detail}; {:.1}s (limit {}s)", t.as_secs_f64(), limit.as_secs()))
}

fn seeded(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn c1_variational_bound() -> Outcome {
    let start = Instant::now();
    let s = verify(1000, 20_240_601).map_err(|e| e.to_string())?;
    let ok = s.instances == 1000 && s.max_negative_gap <= 1e-12 && s.max_identity_residual <= 1e-10;
    let detail = format!(
        "{} systems, max negative gap {:.2e}, max identity residual {:.2e}",
        s.instances, s.max_negative_gap, s.max_identity_residual
    );
    if !ok {
        return Err(detail);
    }
    within(Duration::from_secs(10), start, detail)
}

fn c2_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let w = RdpbWeights {
        beta: 0.3,
        lambda: 0.9,
        mu: 1.7,
        threshold: f64::INFINITY,
    };
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let sys = random_system(&mut rng);
        let r = exact_rdpb(&sys, &w).map_err(|e| e.to_string())?;
        let b = brute::brute_force(&sys);
        for (a, e) in [
            (r.terms.cond_entropy, b.cond_entropy),
            (r.terms.rate, b.rate),
            (r.terms.distortion, b.distortion),
            (r.terms.perception, b.perception),
            (r.terms.h_y, b.h_y),
        ] {
            worst = worst.max((a - e).abs());
        }
    }
    if worst >= 1e-12 {
        return Err(format!("max term difference {worst:.2e} on 100 systems"));
    }
    within(Duration::from_secs(5), start, format!("max term difference {worst:.2e} on 100 systems"))
}

fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> rdpb::Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn c3_gradients() -> Outcome {
    let start = Instant::now();
    let eps = 1e-5;
    // Inputs kept away from the relu kink at 0 and the clamp edges at ±1.5.
    let x = seeded(&[3, 4], 1, -2.5, 2.5).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let x = x.map(|v| if (v.abs() - 1.5).abs() < 0.05 { v * 1.1 } else { v });
    let w = seeded(&[3, 4], 2, -1.0, 1.0);
    let other = seeded(&[3, 4], 3, -2.0, 2.0);
    let right = seeded(&[4, 2], 4, -1.0, 1.0);
    let w32 = seeded(&[3, 2], 5, -1.0, 1.0);
    let bias = seeded(&[4], 6, -1.0, 1.0);
    let positive = x.map(|v| v.abs() + 0.2);

    type F<'a> = Box<dyn Fn(&mut Graph, Var) -> rdpb::Result<Var> + 'a>;
    let cases: Vec<(&str, &Tensor, F)> = vec![
        ("add", &x, Box::new(|g, v| { let c = g.constant(other.clone()); let y = g.add(v, c)?; weighted_sum(g, y, &w) })),
        ("sub", &x, Box::new(|g, v| { let c = g.constant(other.clone()); let y = g.sub(c, v)?; weighted_sum(g, y, &w) })),
        ("mul", &x, Box::new(|g, v| { let c = g.constant(other.clone()); let y = g.mul(v, c)?; weighted_sum(g, y, &w) })),
        ("scale", &x, Box::new(|g, v| { let y = g.scale(v, -0.7)?; weighted_sum(g, y, &w) })),
        ("add_scalar", &x, Box::new(|g, v| { let y = g.add_scalar(v, 0.3)?; let s = g.square(y); weighted_sum(g, s, &w) })),
        ("matmul (left)", &x, Box::new(|g, v| { let c = g.constant(right.clone()); let y = g.matmul(v, c)?; weighted_sum(g, y, &w32) })),
        ("matmul (right)", &right, Box::new(|g, v| { let c = g.constant(x.clone()); let y = g.matmul(c, v)?; weighted_sum(g, y, &w32) })),
        ("relu", &x, Box::new(|g, v| { let y = g.relu(v); weighted_sum(g, y, &w) })),
        ("sigmoid", &x, Box::new(|g, v| { let y = g.sigmoid(v); weighted_sum(g, y, &w) })),
        ("exp", &x, Box::new(|g, v| { let y = g.exp(v); weighted_sum(g, y, &w) })),
        ("log", &positive, Box::new(|g, v| { let y = g.log(v)?; weighted_sum(g, y, &w) })),
        ("square", &x, Box::new(|g, v| { let y = g.square(v); weighted_sum(g, y, &w) })),
        ("sum", &x, Box::new(|g, v| { let s = g.sum(v); Ok(g.square(s)) })),
        ("mean", &x, Box::new(|g, v| { let m = g.mean(v)?; Ok(g.square(m)) })),
        ("log_softmax", &x, Box::new(|g, v| { let y = g.log_softmax(v)?; weighted_sum(g, y, &w) })),
        ("add_bias (input)", &x, Box::new(|g, v| { let b = g.constant(bias.clone()); let y = g.add_bias(v, b)?; let s = g.square(y); weighted_sum(g, s, &w) })),
        ("add_bias (bias)", &bias, Box::new(|g, v| { let c = g.constant(x.clone()); let y = g.add_bias(c, v)?; let s = g.square(y); weighted_sum(g, s, &w) })),
        ("clamp", &x, Box::new(|g, v| { let y = g.clamp(v, -1.5, 1.5)?; weighted_sum(g, y, &w) })),
    ];
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for (name, at, f) in &cases {
        let err = grad_check(f, at, eps).map_err(|e| format!("{name}: {e}"))?;
        if err >= 1e-4 {
            failed.push(format!("{name} {err:.2e}"));
        }
        worst = worst.max(err);
    }

    // The straight-through quantizer: its gradient must equal the one of the
    // clamp surrogate, which in turn passes the finite-difference check.
    let cfg = ChannelConfig { dim: 4, levels: 4, clip: 1.5, sigma: 0.1 };
    let st_grad = |surrogate: bool| {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let out = if surrogate {
            transmit_surrogate_node(&mut g, v, &cfg, &mut rng).unwrap()
        } else {
            transmit_node(&mut g, v, &cfg, &mut rng).unwrap()
        };
        let s = weighted_sum(&mut g, out, &w).unwrap();
        g.backward(s).unwrap();
        g.grad(v).unwrap().clone()
    };
    if st_grad(false) != st_grad(true) {
        failed.push("clamp_straight_through differs from surrogate".into());
    }
    let st = grad_check(
        |g, v| {
            let out = transmit_surrogate_node(g, v, &cfg, &mut ChaCha8Rng::seed_from_u64(8))?;
            weighted_sum(g, out, &w)
        },
        &x,
        eps,
    )
    .map_err(|e| e.to_string())?;
    worst = worst.max(st);
    if st >= 1e-4 {
        failed.push(format!("channel surrogate {st:.2e}"));
    }

    let arch = Arch {
        encoder_hidden: vec![],
        inference_hidden: vec![],
        reconstruction_hidden: vec![],
    };
    let params: ModelParams = init_params_for_input(5, &arch, 1, 3).map_err(|e| e.to_string())?;
    let toy_x = seeded(&[4, 3], 6, 0.0, 1.0);
    let channel = ChannelConfig { dim: 1, levels: 4, clip: 2.5, sigma: 0.1 };
    let weights = RdpbWeights {
        beta: 0.5,
        lambda: 1.5,
        mu: 0.8,
        threshold: 0.0,
    };
    let loss_err = rdpvb_grad_check(&params, &toy_x, &[1, 7, 3, 1], &channel, &weights, Stage::Full, 9, eps)
        .map_err(|e| e.to_string())?;
    if loss_err >= 1e-4 {
        failed.push(format!("stage-2 loss {loss_err:.2e}"));
    }
    let detail = format!(
        "{} primitives + straight-through, max rel err {worst:.2e}; stage-2 loss on {} params, max rel err {loss_err:.2e}",
        cases.len(),
        params.param_count()
    );
    if !failed.is_empty() || params.param_count() > 50 {
        return Err(format!("{detail}; failing: {}", failed.join(", ")));
    }
    within(Duration::from_secs(120), start, detail)
}

fn c4_channel() -> Outcome {
    let start = Instant::now();
    let n = 1_000_000;
    let sigma = 0.1;
    let z = Tensor::zeros(&[n]);
    let y = awgn(&z, sigma, &mut ChaCha8Rng::seed_from_u64(4)).map_err(|e| e.to_string())?;
    let nf = n as f64;
    let mean = y.data().iter().sum::<f64>() / nf;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let target = sigma * sigma;
    let se_var = (2.0 * target * target / (nf - 1.0)).sqrt();
    let stats_ok = mean.abs() <= 5e-4 && (var - target).abs() <= 5.0 * se_var;

    let (levels, clip) = (4u64, 2.5);
    let step = 2.0 * clip / levels as f64;
    let points = 100_000;
    let (mut worst, mut idempotent) = (0.0f64, true);
    for i in 0..points {
        let v = -4.0 + 8.0 * i as f64 / (points - 1) as f64;
        let q = quantize_value(v, levels, clip);
        worst = worst.max((q - v.clamp(-clip, clip)).abs());
        idempotent &= quantize_value(q, levels, clip) == q;
    }
    let quant_ok = worst <= step / 2.0 + 1e-12 && idempotent;
    let detail = format!(
        "mean {mean:.2e}, variance {var:.6} ({:.2} SE from 0.01); quantizer max |q - clamp| {worst:.4} (bound {:.4}), idempotent {idempotent}",
        (var - target).abs() / se_var,
        step / 2.0
    );
    if !(stats_ok && quant_ok) {
        return Err(detail);
    }
    within(Duration::from_secs(30), start, detail)
}

/// Per-pixel KL between the generating Gaussians, from 64-bin histograms
/// of their exact bin probabilities, averaged over pixels.
fn histogram_oracle(mx: &[f64], sx: &[f64], mh: &[f64], sh: &[f64]) -> f64 {
    let bins = 64;
    let mut total = 0.0;
    for j in 0..mx.len() {
        let lo = (mx[j] - 6.0 * sx[j]).min(mh[j] - 6.0 * sh[j]);
        let hi = (mx[j] + 6.0 * sx[j]).max(mh[j] + 6.0 * sh[j]);
        let p = NormalDist::new(mx[j], sx[j]).unwrap();
        let q = NormalDist::new(mh[j], sh[j]).unwrap();
        let edges: Vec<f64> = (0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect();
        let mass = |d: &NormalDist| -> Vec<f64> {
            (0..bins)
                .map(|k| {
                    let a = if k == 0 { 0.0 } else { d.cdf(edges[k]) };
                    let b = if k == bins - 1 { 1.0 } else { d.cdf(edges[k + 1]) };
                    b - a
                })
                .collect()
        };
        total += perception_hist_kl(&mass(&p), &mass(&q)).unwrap();
    }
    total / mx.len() as f64
}

fn c8_perception_estimator() -> Outcome {
    let (m, d) = (512, 784);
    let mut worst: f64 = 0.0;
    let mut range = (f64::INFINITY, 0.0f64);
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + case);
        let mx: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..0.8)).collect();
        let sx: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..0.2)).collect();
        let mh: Vec<f64> = (0..d)
            .map(|j| {
                let e: f64 = StandardNormal.sample(&mut rng);
                mx[j] + sx[j] * 0.5 * e
            })
            .collect();
        let sh: Vec<f64> = (0..d).map(|j| sx[j] * rng.random_range(-0.3f64..0.3).exp()).collect();
        let draw = |mean: &[f64], sd: &[f64], rng: &mut ChaCha8Rng| {
            let mut data = Vec::with_capacity(m * d);
            for _ in 0..m {
                for j in 0..d {
                    data.push(Normal::new(mean[j], sd[j]).unwrap().sample(rng));
                }
            }
            Tensor::matrix(m, d, data).unwrap()
        };
        let x = draw(&mx, &sx, &mut rng);
        let xhat = draw(&mh, &sh, &mut rng);
        let est = perception_moment_kl(&x, &xhat).map_err(|e| e.to_string())?;
        let oracle = histogram_oracle(&mx, &sx, &mh, &sh);
        worst = worst.max((est - oracle).abs() / oracle);
        range = (range.0.min(oracle), range.1.max(oracle));
    }
    check(
        worst <= 0.10,
        format!(
            "20 cases (M={m}, D={d}), oracle KL in [{:.3}, {:.3}], max relative error {:.2}%",
            range.0,
            range.1,
            100.0 * worst
        ),
    )
}

struct Shared {
    work: PathBuf,
    stage1_model: Option<(ModelParams, RunConfig)>,
    r16_cells: Option<(PathBuf, Vec<RunRecord>)>,
}

fn base_config(work: &Path) -> RunConfig {
    RunConfig {
        output_dir: work.join("runs"),
        ..RunConfig::default()
    }
}

/// Best accuracy any classifier can reach when the received feature carries
/// at most `2^rate` distinct channel inputs: it can name at most that many
/// classes, so it is right at most on the most frequent ones.
fn codeword_ceiling(labels: &[u8], rate_bits: f64) -> f64 {
    let mut counts = [0usize; 10];
    for &y in labels {
        counts[y as usize] += 1;
    }
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let k = (rate_bits.exp2() as usize).min(10);
    counts[..k].iter().sum::<usize>() as f64 / labels.len() as f64
}

fn c5a_accuracy(shared: &mut Shared) -> Outcome {
    let cfg = base_config(&shared.work);
    let start = Instant::now();
    let out = run_training(&cfg, Stage::Classifier).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let s1 = out.stage1.expect("stage 1 ran");
    let (data, _) = load_data(&cfg.data).map_err(|e| e.to_string())?;
    shared.stage1_model = Some((s1.params.clone(), cfg.clone()));
    check(
        s1.test.accuracy >= 0.95 && t < Duration::from_secs(30 * 60),
        format!(
            "data {} ({}/{}/{} records); dim 8, L 4 (R=16), 10 epochs: test accuracy {:.4} (gate 0.95), {:.0}s",
            out.data_dir.display(),
            data.train.len(),
            data.validation.len(),
            data.test.len(),
            s1.test.accuracy,
            t.as_secs_f64()
        ),
    )
}

fn c5b_low_rate_accuracy(shared: &mut Shared) -> Outcome {
    let mut cfg = base_config(&shared.work);
    cfg.channel.dim = 2;
    cfg.channel.levels = 2;
    cfg.train.stage1_epochs = 30;
    let start = Instant::now();
    let out = run_training(&cfg, Stage::Classifier).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let s1 = out.stage1.expect("stage 1 ran");
    let (data, _) = load_data(&cfg.data).map_err(|e| e.to_string())?;
    let ceiling = codeword_ceiling(data.test.labels(), cfg.channel.rate_bits());
    check(
        s1.test.accuracy >= 0.90 && t < Duration::from_secs(30 * 60),
        format!(
            "dim 2, L 2 (R=2), 30 epochs: test accuracy {:.4} (gate 0.90, reference {:.4}), {:.0}s; \
             {} distinct channel inputs cap any classifier at {:.4} on this test split",
            s1.test.accuracy,
            REFERENCE_ACCURACY_R2,
            t.as_secs_f64(),
            cfg.channel.rate_bits().exp2(),
            ceiling
        ),
    )
}

fn c9_tsne(shared: &Shared) -> Outcome {
    let (params, cfg) = shared.stage1_model.as_ref().ok_or("needs the criterion 5a model")?;
    let (data, _) = load_data(&cfg.data).map_err(|e| e.to_string())?;
    let feats = received_features(params, &data.test, 1000, cfg).map_err(|e| e.to_string())?;
    let emb = tsne_embed(&feats, 30.0, 1000, 9).map_err(|e| e.to_string())?;
    let first = emb.trace.first().ok_or("empty trace")?.kl;
    let last = emb.trace.last().ok_or("empty trace")?.kl;
    check(
        emb.coords.shape() == [1000, 2] && last < first,
        format!(
            "shape {:?}, KL {first:.4} at iteration {} -> {last:.4} at iteration {}",
            emb.coords.shape(),
            emb.trace[0].iter,
            emb.trace.last().unwrap().iter
        ),
    )
}

fn final_rows(rows: &[RunRecord]) -> Vec<&RunRecord> {
    let mut out: Vec<&RunRecord> = Vec::new();
    for r in rows.iter().filter(|r| r.is_ok() && r.stage == 2 && r.split == "test") {
        match out.iter_mut().find(|o| o.run_id == r.run_id) {
            Some(o) if r.epoch >= o.epoch => *o = r,
            Some(_) => {}
            None => out.push(r),
        }
    }
    out
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn short_sweep(work: &Path, name: &str, grid: Grid) -> Result<(PathBuf, Vec<RunRecord>), String> {
    let mut base = base_config(work);
    base.train.stage1_epochs = 5;
    base.train.stage2_epochs = 5;
    let sweep = SweepConfig { base, grid, stage: 2 };
    let (data, _) = load_data(&sweep.base.data).map_err(|e| e.to_string())?;
    let out = sweep_into(&sweep, &data, &work.join(name)).map_err(|e| e.to_string())?;
    if let Some(c) = out.cells.iter().find(|c| c.error.is_some()) {
        return Err(format!("cell {} failed: {}", c.run_id, c.error.as_deref().unwrap_or("")));
    }
    let rows = read_records(&out.results).map_err(|e| e.to_string())?;
    Ok((out.dir, rows))
}

fn c6_tradeoff(shared: &mut Shared) -> Outcome {
    let grid = Grid {
        dim: vec![8],
        levels: vec![4],
        perception_threshold: vec![0.06, f64::INFINITY],
        seeds: vec![0, 1, 2],
        ..Grid::default()
    };
    let (dir, rows) = short_sweep(&shared.work, "tradeoff", grid)?;
    let finals = final_rows(&rows);
    let pick = |inf: bool| finals.iter().copied().filter(move |r| r.threshold.is_infinite() == inf);
    let (n_active, n_free) = (pick(false).count(), pick(true).count());
    if n_active != 3 || n_free != 3 {
        return Err(format!("expected 3 + 3 final rows, got {n_active} + {n_free}"));
    }
    let mse_active = mean(pick(false).map(|r| r.mse));
    let mse_free = mean(pick(true).map(|r| r.mse));
    let p_active = mean(pick(false).map(|r| r.perception_est));
    let p_free = mean(pick(true).map(|r| r.perception_est));
    shared.r16_cells = Some((dir, rows.clone()));
    check(
        mse_active >= mse_free - 1e-4 && p_active <= p_free,
        format!(
            "R=16, 3 seeds, 5+5 epochs: mean MSE {mse_active:.5} (P=0.06) vs {mse_free:.5} (P=inf); \
             mean perception {p_active:.4} (P=0.06) vs {p_free:.4} (P=inf)"
        ),
    )
}

fn c7_rate_helps_perception(shared: &Shared) -> Outcome {
    let (_, r16_rows) = shared.r16_cells.as_ref().ok_or("needs the criterion 6 sweep")?;
    let r16 = final_rows(r16_rows);
    let p16: Vec<f64> = r16
        .iter()
        .filter(|r| r.threshold == 0.06)
        .map(|r| r.perception_est)
        .collect();
    let grid = Grid {
        dim: vec![2],
        levels: vec![2],
        perception_threshold: vec![0.06],
        seeds: vec![0, 1, 2],
        ..Grid::default()
    };
    let (_, rows) = short_sweep(&shared.work, "rate", grid)?;
    let p2: Vec<f64> = final_rows(&rows).iter().map(|r| r.perception_est).collect();
    if p16.len() != 3 || p2.len() != 3 {
        return Err(format!("expected 3 runs per rate, got {} and {}", p16.len(), p2.len()));
    }
    let (m16, m2) = (mean(p16.into_iter()), mean(p2.into_iter()));
    check(
        m16 <= m2,
        format!("P=0.06, 3 seeds: mean perception {m16:.4} at R=16 vs {m2:.4} at R=2"),
    )
}

fn metric_bits(r: &RunRecord) -> Vec<u64> {
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

fn c10_reproducibility(shared: &Shared) -> Outcome {
    let (dir, _) = shared.r16_cells.as_ref().ok_or("needs the criterion 6 sweep")?;
    // The first cell trained both stages itself.
    let mut cells: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    cells.sort();
    let cell = cells.first().ok_or("no cell directories")?;
    let mut snap = RunConfig::load(&cell.join(CONFIG_SNAPSHOT), &[]).map_err(|e| e.to_string())?;
    snap.output_dir = shared.work.join("rerun");
    let original = read_records(&cell.join(RESULTS_FILE)).map_err(|e| e.to_string())?;
    let rerun = run_training(&snap, Stage::Full).map_err(|e| e.to_string())?;
    let again = read_records(&rerun.run_dir.join(RESULTS_FILE)).map_err(|e| e.to_string())?;
    let same = original.len() == again.len()
        && original.iter().zip(&again).all(|(a, b)| {
            metric_bits(a) == metric_bits(b) && (a.stage, a.epoch, &a.split) == (b.stage, b.epoch, &b.split)
        });
    check(
        same,
        format!(
            "{} rows of {} rerun from its snapshot, metric columns {}",
            again.len(),
            cell.file_name().unwrap().to_string_lossy(),
            if same { "bit-identical" } else { "differ" }
        ),
    )
}

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    let mut shared = Shared {
        work: work.path().to_path_buf(),
        stage1_model: None,
        r16_cells: None,
    };
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |id: &'static str, name: &'static str, f: &mut dyn FnMut(&mut Shared) -> Outcome| {
        let outcome = f(&mut shared);
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) if KNOWN_RED.contains(&id) => ("FAIL (known)", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} criterion {id:>3} {name}: {detail}");
        results.push((id, outcome));
    };
    run("1", "variational upper bound", &mut |_| c1_variational_bound());
    run("2", "oracle equivalence", &mut |_| c2_oracle_equivalence());
    run("3", "gradient correctness", &mut |_| c3_gradients());
    run("4", "channel statistics", &mut |_| c4_channel());
    run("8", "perception estimator consistency", &mut |_| c8_perception_estimator());
    run("5a", "MNIST accuracy gate", &mut c5a_accuracy);
    run("5b", "MNIST low-rate reference", &mut c5b_low_rate_accuracy);
    run("9", "t-SNE diagnostic", &mut |s| c9_tsne(s));
    run("6", "tradeoff direction", &mut c6_tradeoff);
    run("7", "rate helps perception", &mut |s| c7_rate_helps_perception(s));
    run("10", "reproducibility", &mut |s| c10_reproducibility(s));
    let failed: Vec<&str> = results.iter().filter(|r| r.1.is_err()).map(|r| r.0).collect();
    let unexpected: Vec<&str> = failed.iter().copied().filter(|id| !KNOWN_RED.contains(id)).collect();
    println!(
        "acceptance: {} passed, {} failed ({} known red: {:?})",
        results.len() - failed.len(),
        failed.len(),
        failed.len() - unexpected.len(),
        KNOWN_RED
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
