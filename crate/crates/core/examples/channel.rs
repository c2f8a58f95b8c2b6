//! Quantizer levels, rate accounting and noise statistics of the channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rdpb::channel::{awgn, quantize_value, rate_bits, transmit, ChannelConfig};
use rdpb::Tensor;

fn main() -> rdpb::Result<()> {
    for (dim, levels) in [(2, 2), (8, 4), (3, 3), (16, 256)] {
        println!("dim {dim:>2}, L {levels:>3}: {:.3} bits", rate_bits(dim, levels)?);
    }

    let cfg = ChannelConfig::default();
    println!("quantizer, L={} on [-{c}, {c}]:", cfg.levels, c = cfg.clip);
    for z in [-3.0, -1.0, -0.2, 0.0, 0.4, 1.3, 2.5, 9.0] {
        println!("  {z:>5.2} -> {:>6.3}", quantize_value(z, cfg.levels, cfg.clip));
    }

    let n = 200_000;
    let noise = awgn(&Tensor::zeros(&[n]), cfg.sigma, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mean = noise.data().iter().sum::<f64>() / n as f64;
    let var = noise.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    println!("noise sigma {}: sample mean {mean:.2e}, sample variance {var:.6}", cfg.sigma);

    let z = Tensor::from_rows(&[vec![0.1, -2.0, 0.7, 3.1, -0.4, 1.9, 0.0, -1.2]])?;
    let out = transmit(&z, &cfg, &mut ChaCha8Rng::seed_from_u64(1))?;
    println!("z    {:?}\nẑ    {:?}", z.data(), out.data());
    Ok(())
}
