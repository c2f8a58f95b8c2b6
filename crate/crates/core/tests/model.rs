use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rdpb::channel::{transmit, ChannelConfig};
use rdpb::model::{encode, infer, init_params, reconstruct, reparameterize, Arch};
use rdpb::Tensor;

fn images(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(n, 784, (0..n * 784).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn small_arch() -> Arch {
    Arch {
        encoder_hidden: vec![32],
        inference_hidden: vec![16],
        reconstruction_hidden: vec![16],
    }
}

#[test]
fn heads_read_only_the_received_feature() {
    let params = init_params(3, &small_arch(), 4).unwrap();
    let cfg = ChannelConfig { dim: 4, ..ChannelConfig::default() };
    let x = images(8, 0);
    let (mu, _) = encode(&x, &params).unwrap();
    let zhat = transmit(&mu, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let y0 = infer(&zhat, &params).unwrap();
    let x0 = reconstruct(&zhat, &params).unwrap();

    // Perturb x after transmission; the heads see the same ẑ.
    let perturbed = x.map(|v| 1.0 - v);
    let (mu2, _) = encode(&perturbed, &params).unwrap();
    assert!(mu2.max_abs_diff(&mu) > 0.0);
    assert_eq!(infer(&zhat, &params).unwrap(), y0);
    assert_eq!(reconstruct(&zhat, &params).unwrap(), x0);
}

#[test]
fn reparameterized_moments_match() {
    let n = 100_000;
    let (m, lv) = (0.7, (0.3f64).ln());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = Tensor::matrix(n, 1, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
    let mu = Tensor::matrix(n, 1, vec![m; n]).unwrap();
    let logvar = Tensor::matrix(n, 1, vec![lv; n]).unwrap();
    let z = reparameterize(&mu, &logvar, &u).unwrap();
    let nf = n as f64;
    let mean = z.data().iter().sum::<f64>() / nf;
    let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let target_var = lv.exp();
    let se_mean = (target_var / nf).sqrt();
    // Var of the sample variance of a Gaussian: 2σ⁴/(n-1).
    let se_var = (2.0 * target_var * target_var / (nf - 1.0)).sqrt();
    assert!((mean - m).abs() <= 5.0 * se_mean, "mean {mean}");
    assert!((var - target_var).abs() <= 5.0 * se_var, "var {var}");
}

#[test]
fn seeds_change_weights() {
    let arch = small_arch();
    let a = init_params(0, &arch, 4).unwrap();
    let b = init_params(1, &arch, 4).unwrap();
    assert_eq!(a, init_params(0, &arch, 4).unwrap());
    let differs = a
        .named_tensors()
        .iter()
        .zip(b.named_tensors())
        .any(|((_, x), (_, y))| x.max_abs_diff(y) > 0.0);
    assert!(differs);
}

#[test]
fn forward_pass_is_deterministic() {
    let params = init_params(5, &small_arch(), 2).unwrap();
    let cfg = ChannelConfig { dim: 2, levels: 2, ..ChannelConfig::default() };
    let x = images(16, 4);
    let run = || {
        let (mu, _) = encode(&x, &params).unwrap();
        let z = transmit(&mu, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        (infer(&z, &params).unwrap(), reconstruct(&z, &params).unwrap())
    };
    assert_eq!(run(), run());
}
