//! Exact enumeration of the bottleneck objective and its variational bound
//! on small discrete systems.
//!
//! The chain is `Y ← X → Ẑ → X̂`, so `p(x, y, ẑ) = p(x, y) p(ẑ|x)`. The
//! reconstruction alphabet equals the source alphabet. Tables are row-major
//! `Vec<Vec<f64>>` with each row a conditional distribution.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::objective::RdpbWeights;

pub type Table = Vec<Vec<f64>>;

/// Tolerance for every normalization check.
pub const NORM_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSystem {
    /// Joint `p(x, y)`, `|X|` rows by `|Y|` columns.
    pub p_xy: Table,
    /// Encoder composed with the channel, `p(ẑ|x)`, `|X|` by `|Ẑ|`.
    pub enc: Table,
    /// Reconstruction decoder `p(x̂|ẑ)`, `|Ẑ|` by `|X|`.
    pub dec_x: Table,
    /// One real vector per source symbol; distortion is squared distance.
    pub pixel_embed: Table,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalQ {
    /// Prior `q(ẑ)`.
    pub q_z: Vec<f64>,
    /// Inference decoder `q(y|ẑ)`, one row per `ẑ`.
    pub q_y_given_z: Table,
}

fn check_rect(name: &str, t: &Table, rows: usize, cols: Option<usize>) -> Result<usize> {
    if t.len() != rows || rows == 0 {
        return Err(Error::Contract(format!("{name} has {} rows, expected {rows}", t.len())));
    }
    let c = cols.unwrap_or(t[0].len());
    if c == 0 || t.iter().any(|r| r.len() != c) {
        return Err(Error::Contract(format!("{name} rows must all have {c} > 0 entries")));
    }
    Ok(c)
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Contract(format!("{name} has invalid entry {v}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORM_TOL {
        return Err(Error::Contract(format!("{name} sums to {s}")));
    }
    Ok(())
}

fn check_rows(name: &str, t: &Table) -> Result<()> {
    t.iter()
        .enumerate()
        .try_for_each(|(i, r)| check_distribution(&format!("{name} row {i}"), r))
}

impl DiscreteSystem {
    pub fn nx(&self) -> usize {
        self.p_xy.len()
    }

    pub fn ny(&self) -> usize {
        self.p_xy.first().map_or(0, Vec::len)
    }

    pub fn nz(&self) -> usize {
        self.enc.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let nx = self.p_xy.len();
        check_rect("p_xy", &self.p_xy, nx, None)?;
        let nz = check_rect("enc", &self.enc, nx, None)?;
        check_rect("dec_x", &self.dec_x, nz, Some(nx))?;
        check_rect("pixel_embed", &self.pixel_embed, nx, None)?;
        let flat: Vec<f64> = self.p_xy.iter().flatten().copied().collect();
        check_distribution("p_xy", &flat)?;
        check_rows("enc", &self.enc)?;
        check_rows("dec_x", &self.dec_x)?;
        if self.pixel_embed.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract("pixel_embed has a non-finite entry".into()));
        }
        Ok(())
    }

    pub fn p_x(&self) -> Vec<f64> {
        self.p_xy.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn p_y(&self) -> Vec<f64> {
        (0..self.ny()).map(|y| self.p_xy.iter().map(|r| r[y]).sum()).collect()
    }

    /// Squared distance between the embeddings of two source symbols.
    pub fn delta(&self, x: usize, xhat: usize) -> f64 {
        self.pixel_embed[x]
            .iter()
            .zip(&self.pixel_embed[xhat])
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl VariationalQ {
    pub fn validate(&self, sys: &DiscreteSystem) -> Result<()> {
        let (ny, nz) = (sys.ny(), sys.nz());
        if self.q_z.len() != nz {
            return Err(Error::Contract(format!("q_z has {} entries, expected {nz}", self.q_z.len())));
        }
        check_distribution("q_z", &self.q_z)?;
        check_rect("q_y_given_z", &self.q_y_given_z, nz, Some(ny))?;
        check_rows("q_y_given_z", &self.q_y_given_z)
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// `KL(p ‖ q)` in nats; `+inf` when `q` is zero where `p` is positive.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            s += a * (a / b).ln();
        }
    }
    s
}

/// Mutual information of a joint table in nats.
pub fn mutual_info(joint: &Table) -> Result<f64> {
    let rows = joint.len();
    let cols = check_rect("joint", joint, rows, None)?;
    let flat: Vec<f64> = joint.iter().flatten().copied().collect();
    check_distribution("joint", &flat)?;
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let pb: Vec<f64> = (0..cols).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut s = 0.0;
    for (i, r) in joint.iter().enumerate() {
        for (j, &p) in r.iter().enumerate() {
            if p > 0.0 {
                s += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    Ok(s.max(0.0))
}

/// Marginals implied by a system. Rows of `p_y_given_z` are `None` where
/// `p(ẑ) = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    pub p_z: Vec<f64>,
    pub p_y_given_z: Vec<Option<Vec<f64>>>,
    pub p_xhat: Vec<f64>,
}

pub fn derived_marginals(sys: &DiscreteSystem) -> Result<Marginals> {
    sys.validate()?;
    let (nx, ny, nz) = (sys.nx(), sys.ny(), sys.nz());
    let px = sys.p_x();
    let mut p_z = vec![0.0; nz];
    let mut p_yz = vec![vec![0.0; ny]; nz];
    for x in 0..nx {
        for z in 0..nz {
            p_z[z] += px[x] * sys.enc[x][z];
            for y in 0..ny {
                p_yz[z][y] += sys.p_xy[x][y] * sys.enc[x][z];
            }
        }
    }
    let p_y_given_z = p_yz
        .into_iter()
        .zip(&p_z)
        .map(|(row, &pz)| (pz > 0.0).then(|| row.iter().map(|v| v / pz).collect()))
        .collect();
    let mut p_xhat = vec![0.0; nx];
    for z in 0..nz {
        for (acc, d) in p_xhat.iter_mut().zip(&sys.dec_x[z]) {
            *acc += p_z[z] * d;
        }
    }
    Ok(Marginals {
        p_z,
        p_y_given_z,
        p_xhat,
    })
}

/// Unweighted terms of the expanded objective, all in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RdpbTerms {
    /// `E[-ln p(y|ẑ)] = H(Y|Ẑ)`.
    pub cond_entropy: f64,
    /// `I(Ẑ; X)`.
    pub rate: f64,
    /// `E[Δ(X, X̂)]`.
    pub distortion: f64,
    /// `KL(p_X ‖ p_X̂)`.
    pub perception: f64,
    /// `H(Y)`.
    pub h_y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Rdpb {
    pub with_hy: f64,
    pub without_hy: f64,
    pub terms: RdpbTerms,
}

fn expected_distortion(sys: &DiscreteSystem, px: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, &pxv) in px.iter().enumerate() {
        for (z, &pz) in sys.enc[x].iter().enumerate() {
            let w = pxv * pz;
            if w == 0.0 {
                continue;
            }
            for (xh, &pd) in sys.dec_x[z].iter().enumerate() {
                s += w * pd * sys.delta(x, xh);
            }
        }
    }
    s
}

pub fn exact_rdpb(sys: &DiscreteSystem, w: &RdpbWeights) -> Result<Rdpb> {
    let m = derived_marginals(sys)?;
    let px = sys.p_x();
    let nz = sys.nz();
    let mut cond_entropy = 0.0;
    for (z, row) in m.p_y_given_z.iter().enumerate() {
        if let Some(row) = row {
            cond_entropy += m.p_z[z] * entropy(row);
        }
    }
    let joint_xz: Table = (0..sys.nx())
        .map(|x| (0..nz).map(|z| px[x] * sys.enc[x][z]).collect())
        .collect();
    let rate = mutual_info(&joint_xz)?;
    let terms = RdpbTerms {
        cond_entropy,
        rate,
        distortion: expected_distortion(sys, &px),
        perception: kl(&px, &m.p_xhat),
        h_y: entropy(&sys.p_y()),
    };
    let without_hy = terms.cond_entropy
        + w.beta * terms.rate
        + w.lambda * terms.distortion
        + w.mu * terms.perception;
    Ok(Rdpb {
        with_hy: without_hy - terms.h_y,
        without_hy,
        terms,
    })
}

/// Value of the variational objective; `infinite` is set when a `q` cell
/// is zero where the matching `p` mass is positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Rdpvb {
    pub value: f64,
    pub infinite: bool,
}

pub fn exact_rdpvb(sys: &DiscreteSystem, q: &VariationalQ, w: &RdpbWeights) -> Result<Rdpvb> {
    sys.validate()?;
    q.validate(sys)?;
    let px = sys.p_x();
    let mut ce = 0.0;
    let mut rate = 0.0;
    for x in 0..sys.nx() {
        if px[x] == 0.0 {
            continue;
        }
        rate += px[x] * kl(&sys.enc[x], &q.q_z);
        for (z, &pz) in sys.enc[x].iter().enumerate() {
            for (y, &pxy) in sys.p_xy[x].iter().enumerate() {
                let mass = pxy * pz;
                if mass > 0.0 {
                    let qy = q.q_y_given_z[z][y];
                    ce += if qy > 0.0 { -mass * qy.ln() } else { f64::INFINITY };
                }
            }
        }
    }
    let m = derived_marginals(sys)?;
    let value = ce
        + w.beta * rate
        + w.lambda * expected_distortion(sys, &px)
        + w.mu * kl(&px, &m.p_xhat);
    Ok(Rdpvb {
        value,
        infinite: value.is_infinite(),
    })
}

/// `(E_{p(ẑ)} KL(p(y|ẑ) ‖ q(y|ẑ)), KL(p(ẑ) ‖ q(ẑ)))`.
pub fn bound_gap(sys: &DiscreteSystem, q: &VariationalQ) -> Result<(f64, f64)> {
    q.validate(sys)?;
    let m = derived_marginals(sys)?;
    let mut gap_y = 0.0;
    for (z, row) in m.p_y_given_z.iter().enumerate() {
        if let Some(row) = row {
            gap_y += m.p_z[z] * kl(row, &q.q_y_given_z[z]);
        }
    }
    Ok((gap_y, kl(&m.p_z, &q.q_z)))
}

/// The variational pair that makes the bound tight. Undefined conditional
/// rows are filled with a uniform distribution.
pub fn exact_q(sys: &DiscreteSystem) -> Result<VariationalQ> {
    let m = derived_marginals(sys)?;
    let ny = sys.ny();
    Ok(VariationalQ {
        q_z: m.p_z,
        q_y_given_z: m
            .p_y_given_z
            .into_iter()
            .map(|r| r.unwrap_or_else(|| vec![1.0 / ny as f64; ny]))
            .collect(),
    })
}

/// Uniform draw from the probability simplex of dimension `n`.
pub fn flat_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn simplex_table<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Table {
    (0..rows).map(|_| flat_simplex(cols, rng)).collect()
}

/// Random system with every alphabet size drawn from `2..=5`.
pub fn random_system<R: Rng + ?Sized>(rng: &mut R) -> DiscreteSystem {
    let nx = rng.random_range(2..=5);
    let ny = rng.random_range(2..=5);
    let nz = rng.random_range(2..=5);
    random_system_sized(nx, ny, nz, rng)
}

pub fn random_system_sized<R: Rng + ?Sized>(nx: usize, ny: usize, nz: usize, rng: &mut R) -> DiscreteSystem {
    let flat = flat_simplex(nx * ny, rng);
    let embed_dim = rng.random_range(1..=3);
    DiscreteSystem {
        p_xy: flat.chunks(ny).map(<[f64]>::to_vec).collect(),
        enc: simplex_table(nx, nz, rng),
        dec_x: simplex_table(nz, nx, rng),
        pixel_embed: (0..nx)
            .map(|_| (0..embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
    }
}

pub fn random_q<R: Rng + ?Sized>(sys: &DiscreteSystem, rng: &mut R) -> VariationalQ {
    VariationalQ {
        q_z: flat_simplex(sys.nz(), rng),
        q_y_given_z: simplex_table(sys.nz(), sys.ny(), rng),
    }
}

pub fn random_weights<R: Rng + ?Sized>(rng: &mut R) -> RdpbWeights {
    RdpbWeights {
        beta: rng.random_range(0.0..2.0),
        lambda: rng.random_range(0.0..2.0),
        mu: rng.random_range(0.0..2.0),
        threshold: f64::INFINITY,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifySummary {
    pub instances: usize,
    pub seed: u64,
    /// Largest `max(0, -gap)` over both gap components.
    pub max_negative_gap: f64,
    /// Largest `|rdpvb - rdpb_without_hy - (gap_y + β gap_z)|`.
    pub max_identity_residual: f64,
    pub passed: bool,
}

/// Checks the bound decomposition on `instances` random systems.
pub fn verify(instances: usize, seed: u64) -> Result<VerifySummary> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_neg: f64 = 0.0;
    let mut max_res: f64 = 0.0;
    for _ in 0..instances {
        let sys = random_system(&mut rng);
        let q = random_q(&sys, &mut rng);
        let w = random_weights(&mut rng);
        let (gy, gz) = bound_gap(&sys, &q)?;
        let upper = exact_rdpvb(&sys, &q, &w)?;
        let exact = exact_rdpb(&sys, &w)?;
        max_neg = max_neg.max(-gy).max(-gz);
        max_res = max_res.max((upper.value - exact.without_hy - (gy + w.beta * gz)).abs());
    }
    Ok(VerifySummary {
        instances,
        seed,
        max_negative_gap: max_neg,
        max_identity_residual: max_res,
        passed: max_neg <= 1e-12 && max_res <= 1e-10,
    })
}
