//! Exact O(n²) t-SNE.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_POINTS: usize = 5000;
pub const ENTROPY_TOL: f64 = 1e-4;
pub const EXAGGERATION: f64 = 4.0;
pub const EXAGGERATION_ITERS: usize = 100;
pub const MOMENTUM_SWITCH: usize = 250;
pub const LEARNING_RATE: f64 = 200.0;
/// The KL objective is recorded every this many iterations.
pub const TRACE_EVERY: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    pub iter: usize,
    pub kl: f64,
}

#[derive(Clone, Debug)]
pub struct Embedding {
    /// `(n, 2)`
    pub coords: Tensor,
    /// KL objective against the unexaggerated affinities, first entry at
    /// iteration 0 and last entry after the final update.
    pub trace: Vec<TracePoint>,
}

fn squared_distances(x: &Tensor) -> Vec<f64> {
    let n = x.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row `i` of the conditional affinities, with the precision found by
/// bisection so the row entropy matches `ln(perplexity)`.
fn conditional_row(dist: &[f64], i: usize, target: f64, out: &mut [f64]) {
    let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
    // Shift by the nearest-neighbor distance so exp() cannot underflow to
    // an all-zero row.
    let dmin = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    for _ in 0..200 {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for (j, (&d, o)) in dist.iter().zip(out.iter_mut()).enumerate() {
            *o = if j == i { 0.0 } else { (-(d - dmin) * beta).exp() };
            sum += *o;
            weighted += (d - dmin) * *o;
        }
        let entropy = sum.ln() + beta * weighted / sum;
        out.iter_mut().for_each(|o| *o /= sum);
        let diff = entropy - target;
        if diff.abs() < ENTROPY_TOL {
            return;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
}

/// Symmetrized joint affinities, summing to one.
pub fn joint_affinities(x: &Tensor, perplexity: f64) -> Vec<f64> {
    let n = x.rows();
    let dist = squared_distances(x);
    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        conditional_row(&dist[i * n..(i + 1) * n], i, target, &mut cond[i * n..(i + 1) * n]);
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }
    p
}

fn student_kernel(y: &[f64], n: usize, num: &mut [f64]) -> f64 {
    let mut z = 0.0;
    for i in 0..n {
        num[i * n + i] = 0.0;
        for j in i + 1..n {
            let dx = y[2 * i] - y[2 * j];
            let dy = y[2 * i + 1] - y[2 * j + 1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    z
}

fn kl_objective(p: &[f64], num: &[f64], z: f64) -> f64 {
    p.iter()
        .zip(num)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &ni)| pi * (pi / (ni / z).max(1e-300)).ln())
        .sum()
}

/// Embeds the rows of `features` in two dimensions.
pub fn tsne_embed(features: &Tensor, perplexity: f64, iters: usize, seed: u64) -> Result<Embedding> {
    if features.rank() != 2 {
        return Err(Error::Contract(format!("features must be (n, dim), got {:?}", features.shape())));
    }
    let n = features.rows();
    if n > MAX_POINTS {
        return Err(Error::Contract(format!("exact t-SNE is limited to {MAX_POINTS} points, got {n}")));
    }
    if !(5.0..=(n as f64 - 1.0) / 3.0).contains(&perplexity) {
        return Err(Error::Contract(format!(
            "perplexity {perplexity} outside [5, (n-1)/3] for n = {n}"
        )));
    }
    if !features.all_finite() {
        return Err(Error::Contract("features contain non-finite values".into()));
    }
    let p = joint_affinities(features, perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1e-2).expect("valid normal");
    let mut y: Vec<f64> = (0..2 * n).map(|_| normal.sample(&mut rng)).collect();
    let mut update = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![0.0; 2 * n];
    let mut trace = Vec::new();

    for it in 0..iters {
        let z = student_kernel(&y, n, &mut num);
        if it % TRACE_EVERY == 0 {
            trace.push(TracePoint { iter: it, kl: kl_objective(&p, &num, z) });
        }
        let exaggeration = if it < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if it < MOMENTUM_SWITCH { 0.5 } else { 0.8 };
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let m = (exaggeration * p[i * n + j] - q / z) * q;
                gx += m * (y[2 * i] - y[2 * j]);
                gy += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
            grad[2 * i] = 4.0 * gx;
            grad[2 * i + 1] = 4.0 * gy;
        }
        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (update[k] > 0.0) {
                gains[k] + 0.2
            } else {
                (gains[k] * 0.8).max(0.01)
            };
            update[k] = momentum * update[k] - LEARNING_RATE * gains[k] * grad[k];
            y[k] += update[k];
        }
        for c in 0..2 {
            let mean = (0..n).map(|i| y[2 * i + c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[2 * i + c] -= mean);
        }
    }
    let z = student_kernel(&y, n, &mut num);
    trace.push(TracePoint { iter: iters, kl: kl_objective(&p, &num, z) });
    Ok(Embedding {
        coords: Tensor::matrix(n, 2, y)?,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn clusters(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 3;
            for k in 0..5 {
                let center = if k == c { 6.0 } else { 0.0 };
                data.push(center + rng.random_range(-0.5..0.5));
            }
            labels.push(c);
        }
        (Tensor::matrix(n, 5, data).unwrap(), labels)
    }

    #[test]
    fn affinities_match_perplexity() {
        let (x, _) = clusters(60, 1);
        let n = 60;
        let dist = squared_distances(&x);
        let mut row = vec![0.0; n];
        conditional_row(&dist[..n], 0, 10f64.ln(), &mut row);
        let h: f64 = -row.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        assert!((h - 10f64.ln()).abs() < 1e-4);
        let p = joint_affinities(&x, 10.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn separates_clusters_and_lowers_objective() {
        let (x, labels) = clusters(90, 2);
        let e = tsne_embed(&x, 10.0, 300, 3).unwrap();
        assert_eq!(e.coords.shape(), &[90, 2]);
        assert!(e.trace.last().unwrap().kl < e.trace[0].kl);
        // nearest neighbor in the embedding shares the label
        let c = &e.coords;
        let mut agree = 0;
        for i in 0..90 {
            let nn = (0..90)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = (c.row(i)[0] - c.row(a)[0]).powi(2) + (c.row(i)[1] - c.row(a)[1]).powi(2);
                    let db = (c.row(i)[0] - c.row(b)[0]).powi(2) + (c.row(i)[1] - c.row(b)[1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            agree += (labels[nn] == labels[i]) as usize;
        }
        assert!(agree >= 85, "{agree}");
    }

    #[test]
    fn deterministic_and_validated() {
        let (x, _) = clusters(40, 4);
        let a = tsne_embed(&x, 8.0, 50, 9).unwrap();
        let b = tsne_embed(&x, 8.0, 50, 9).unwrap();
        assert_eq!(a.coords, b.coords);
        assert!(tsne_embed(&x, 4.0, 10, 0).is_err());
        assert!(tsne_embed(&x, 14.0, 10, 0).is_err());
    }
}
