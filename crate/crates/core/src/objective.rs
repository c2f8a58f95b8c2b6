//! Loss terms of the variational objective and their minibatch assembly.
//!
//! All divergences are in nats. Every term has a plain `f64` form used for
//! evaluation and a graph form (`*_node`) used for training; unit tests keep
//! the two in agreement.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::{transmit_node, transmit_surrogate_node, ChannelConfig};
use crate::dataset::CLASSES;
use crate::error::{Error, Result};
use crate::model::{reparameterize_node, BoundModel, ModelParams, Trainable};
use crate::tensor::{Graph, Tensor, Var};

/// Floor applied to per-pixel variances in the moment-matched perception KL.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Additive smoothing applied to `q` before the histogram KL.
pub const HIST_SMOOTHING: f64 = 1e-8;

/// Tradeoff multipliers and the perception threshold `P`.
///
/// `threshold = inf` never activates the perception term; `threshold = 0`
/// keeps it active on every step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdpbWeights {
    pub beta: f64,
    pub lambda: f64,
    pub mu: f64,
    #[serde(rename = "perception_threshold")]
    pub threshold: f64,
}

impl Default for RdpbWeights {
    fn default() -> Self {
        Self {
            beta: 1e-3,
            lambda: 1.0,
            mu: 1.0,
            threshold: f64::INFINITY,
        }
    }
}

impl RdpbWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda), ("mu", self.mu)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Contract(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Contract(format!(
                "perception threshold must be >= 0 or inf, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub rate_kl: f64,
    pub mse: f64,
    pub perception: f64,
    pub perception_gated: bool,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.ce, self.rate_kl, self.mse, self.perception, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Encoder and inference head only.
    Classifier,
    /// All four terms, reconstruction head included.
    Full,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Classifier => 1,
            Stage::Full => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::Classifier),
            2 => Ok(Stage::Full),
            other => Err(Error::Config(format!("stage must be 1 or 2, got {other}"))),
        }
    }
}

fn check_labels(rows: usize, labels: &[u8]) -> Result<()> {
    if rows != labels.len() {
        return Err(Error::Contract(format!(
            "{rows} prediction rows for {} labels",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= CLASSES) {
        return Err(Error::Contract(format!("label {bad} out of range")));
    }
    Ok(())
}

/// Mean negative log-probability of the true label.
pub fn cross_entropy(log_probs: &Tensor, labels: &[u8]) -> Result<f64> {
    if log_probs.rank() != 2 || log_probs.cols() != CLASSES {
        return Err(Error::Contract(format!(
            "log-probabilities must be (M, {CLASSES}), got {:?}",
            log_probs.shape()
        )));
    }
    check_labels(log_probs.rows(), labels)?;
    let s: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -log_probs.row(i)[y as usize])
        .sum();
    Ok(s / labels.len() as f64)
}

pub fn cross_entropy_node(g: &mut Graph, log_probs: Var, labels: &[u8]) -> Result<Var> {
    let lp = g.value(log_probs);
    if lp.rank() != 2 || lp.cols() != CLASSES {
        return Err(Error::Contract(format!(
            "log-probabilities must be (M, {CLASSES}), got {:?}",
            lp.shape()
        )));
    }
    check_labels(lp.rows(), labels)?;
    let m = labels.len();
    let mut pick = Tensor::zeros(&[m, CLASSES]);
    for (i, &y) in labels.iter().enumerate() {
        pick.data_mut()[i * CLASSES + y as usize] = -1.0 / m as f64;
    }
    let pick = g.constant(pick);
    let weighted = g.mul(log_probs, pick)?;
    Ok(g.sum(weighted))
}

/// Closed-form `KL(N(mu, e^logvar + s²) ‖ N(0, 1 + s²))` summed over the
/// feature and averaged over the batch, with `s = sigma_ch`.
pub fn rate_kl(mu: &Tensor, logvar: &Tensor, sigma_ch: f64) -> Result<f64> {
    if mu.shape() != logvar.shape() {
        return Err(Error::Shape {
            op: "rate_kl",
            lhs: mu.shape().to_vec(),
            rhs: logvar.shape().to_vec(),
        });
    }
    let s2 = sigma_ch * sigma_ch;
    let prior = 1.0 + s2;
    let total: f64 = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(m, lv)| {
            let v = lv.exp() + s2;
            0.5 * ((m * m + v) / prior - 1.0 - (v / prior).ln())
        })
        .sum();
    Ok(total / mu.rows() as f64)
}

pub fn rate_kl_node(g: &mut Graph, mu: Var, logvar: Var, sigma_ch: f64) -> Result<Var> {
    let shape = g.value(mu).shape().to_vec();
    if shape != g.value(logvar).shape() {
        return Err(Error::Shape {
            op: "rate_kl",
            lhs: shape,
            rhs: g.value(logvar).shape().to_vec(),
        });
    }
    let rows = g.value(mu).rows() as f64;
    let n = g.value(mu).len() as f64;
    let s2 = sigma_ch * sigma_ch;
    let prior = 1.0 + s2;
    let e = g.exp(logvar);
    let v = g.add_scalar(e, s2)?;
    let mu2 = g.square(mu);
    let num = g.add(mu2, v)?;
    let ratio = g.scale(num, 1.0 / prior)?;
    let lnv = g.log(v)?;
    let t = g.sub(ratio, lnv)?;
    let s = g.sum(t);
    let s = g.scale(s, 0.5 / rows)?;
    g.add_scalar(s, 0.5 * n * (prior.ln() - 1.0) / rows)
}

/// Mean squared difference over every entry.
pub fn mse(x: &Tensor, xhat: &Tensor) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(Error::Shape {
            op: "mse",
            lhs: x.shape().to_vec(),
            rhs: xhat.shape().to_vec(),
        });
    }
    if x.is_empty() {
        return Err(Error::Contract("mse of empty tensors".into()));
    }
    let s: f64 = x.data().iter().zip(xhat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.len() as f64)
}

pub fn mse_node(g: &mut Graph, x: &Tensor, xhat: Var) -> Result<Var> {
    if x.shape() != g.value(xhat).shape() {
        return Err(Error::Shape {
            op: "mse",
            lhs: x.shape().to_vec(),
            rhs: g.value(xhat).shape().to_vec(),
        });
    }
    let x = g.constant(x.clone());
    let d = g.sub(xhat, x)?;
    let d2 = g.square(d);
    g.mean(d2)
}

/// `KL(p ‖ q)` between probability vectors. `q` is smoothed by adding
/// `1e-8` to each entry and renormalizing; `0 · ln 0 = 0`.
pub fn perception_hist_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Contract(format!(
            "histogram lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    for (name, h) in [("p", p), ("q", q)] {
        if h.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Contract(format!("{name} has a negative or NaN entry")));
        }
        let s: f64 = h.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("{name} sums to {s}, not 1")));
        }
    }
    let z: f64 = q.iter().map(|v| v + HIST_SMOOTHING).sum();
    Ok(p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / ((qi + HIST_SMOOTHING) / z)).ln())
        .sum::<f64>()
        .max(0.0))
}

/// Per-column mean and floored population variance.
fn column_moments(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (m, d) = (t.rows(), t.cols());
    let mut mean = vec![0.0; d];
    for i in 0..m {
        for (acc, v) in mean.iter_mut().zip(t.row(i)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0; d];
    for i in 0..m {
        for ((acc, v), mu) in var.iter_mut().zip(t.row(i)).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|v| *v = (*v / m as f64).max(VARIANCE_FLOOR));
    (mean, var)
}

/// Streaming per-column moments for data that arrives in chunks.
#[derive(Clone, Debug)]
pub struct ColumnMoments {
    count: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl ColumnMoments {
    pub fn new(cols: usize) -> Self {
        Self {
            count: 0,
            sum: vec![0.0; cols],
            sum_sq: vec![0.0; cols],
        }
    }

    pub fn push(&mut self, t: &Tensor) {
        for i in 0..t.rows() {
            for ((s, q), v) in self.sum.iter_mut().zip(&mut self.sum_sq).zip(t.row(i)) {
                *s += v;
                *q += v * v;
            }
        }
        self.count += t.rows();
    }

    /// Mean and floored population variance.
    pub fn finish(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.count.max(1) as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let var = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(VARIANCE_FLOOR))
            .collect();
        (mean, var)
    }
}

/// Column-averaged `KL(N(mx, vx) ‖ N(mh, vh))` for diagonal Gaussians.
pub fn gaussian_moment_kl(mx: &[f64], vx: &[f64], mh: &[f64], vh: &[f64]) -> f64 {
    let d = mx.len();
    let s: f64 = (0..d)
        .map(|j| 0.5 * ((vh[j] / vx[j]).ln() + (vx[j] + (mx[j] - mh[j]).powi(2)) / vh[j] - 1.0))
        .sum();
    (s / d as f64).max(0.0)
}

fn check_moment_inputs(x: &Tensor, xhat_shape: &[usize]) -> Result<()> {
    if x.shape() != xhat_shape || x.rank() != 2 {
        return Err(Error::Shape {
            op: "perception_moment_kl",
            lhs: x.shape().to_vec(),
            rhs: xhat_shape.to_vec(),
        });
    }
    if x.rows() < 2 {
        return Err(Error::Contract(format!(
            "moment-matched KL needs at least 2 rows, got {}",
            x.rows()
        )));
    }
    Ok(())
}

/// KL between diagonal Gaussians moment-matched to the source batch and the
/// reconstruction batch, averaged over columns (nats per pixel).
pub fn perception_moment_kl(x: &Tensor, xhat: &Tensor) -> Result<f64> {
    check_moment_inputs(x, xhat.shape())?;
    let (mx, vx) = column_moments(x);
    let (mh, vh) = column_moments(xhat);
    Ok(gaussian_moment_kl(&mx, &vx, &mh, &vh))
}

pub fn perception_moment_kl_node(g: &mut Graph, x: &Tensor, xhat: Var) -> Result<Var> {
    check_moment_inputs(x, g.value(xhat).shape())?;
    let (m, d) = (x.rows(), x.cols());
    let (mx, vx) = column_moments(x);
    let sum_ln_vx: f64 = vx.iter().map(|v| v.ln()).sum();

    let avg = g.constant(Tensor::full(&[1, m], 1.0 / m as f64));
    let mut center = Tensor::full(&[m, m], -1.0 / m as f64);
    for i in 0..m {
        center.data_mut()[i * m + i] += 1.0;
    }
    let center = g.constant(center);

    let mh = g.matmul(avg, xhat)?;
    let centered = g.matmul(center, xhat)?;
    let sq = g.square(centered);
    let vh = g.matmul(avg, sq)?;
    let vh = g.clamp(vh, VARIANCE_FLOOR, f64::INFINITY)?;

    let ln_vh = g.log(vh)?;
    let neg = g.scale(ln_vh, -1.0)?;
    let inv_vh = g.exp(neg);
    let mx = g.constant(Tensor::matrix(1, d, mx)?);
    let vx = g.constant(Tensor::matrix(1, d, vx)?);
    let diff = g.sub(mh, mx)?;
    let diff2 = g.square(diff);
    let num = g.add(vx, diff2)?;
    let ratio = g.mul(num, inv_vh)?;
    let a = g.sum(ln_vh);
    let b = g.sum(ratio);
    let s = g.add(a, b)?;
    let s = g.scale(s, 0.5 / d as f64)?;
    g.add_scalar(s, -0.5 * (sum_ln_vx + d as f64) / d as f64)
}

/// Applies the perception threshold: an estimate at or below `threshold`
/// contributes nothing.
pub fn gated_perception(perception: f64, mu: f64, threshold: f64) -> (f64, bool) {
    if perception <= threshold {
        (0.0, true)
    } else {
        (mu * perception, false)
    }
}

/// Independent randomness for the reparameterization draws and the channel.
pub struct NoiseStreams {
    pub reparam: ChaCha8Rng,
    pub channel: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    /// Monte Carlo samples per datum.
    pub mc_samples: usize,
    /// Perception value used for gating; `None` gates on the batch estimate.
    pub gate_estimate: Option<f64>,
    /// Replace the quantizer's forward value by its clamp surrogate, making
    /// the loss differentiable for finite-difference checks.
    pub surrogate_channel: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            mc_samples: 1,
            gate_estimate: None,
            surrogate_channel: false,
        }
    }
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = StandardNormal.sample(rng);
    }
    t
}

/// Builds the minibatch objective on `g` and returns the scalar loss with
/// its term breakdown.
///
/// Chain: encode, reparameterize, transmit, then both heads. Stage 1
/// leaves the reconstruction head out and reports `mse = perception = 0`.
/// Non-finite values anywhere in the chain surface as [`Error::Numeric`].
#[allow(clippy::too_many_arguments)]
pub fn rdpvb_forward(
    g: &mut Graph,
    model: &BoundModel,
    x: &Tensor,
    labels: &[u8],
    channel: &ChannelConfig,
    weights: &RdpbWeights,
    noise: &mut NoiseStreams,
    stage: Stage,
    opts: &LossOptions,
) -> Result<(Var, LossBreakdown)> {
    build_loss(g, model, x, labels, channel, weights, noise, stage, opts).map_err(|e| match e {
        Error::Domain { .. } => Error::Numeric { msg: e.to_string() },
        other => other,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_loss(
    g: &mut Graph,
    model: &BoundModel,
    x: &Tensor,
    labels: &[u8],
    channel: &ChannelConfig,
    weights: &RdpbWeights,
    noise: &mut NoiseStreams,
    stage: Stage,
    opts: &LossOptions,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    if stage == Stage::Full && !model.has_reconstruction() {
        return Err(Error::Contract("stage 2 needs reconstruction weights".into()));
    }
    let samples = opts.mc_samples.max(1);
    let xv = g.constant(x.clone());
    let (mu, logvar) = model.encode(g, xv)?;
    let rate = rate_kl_node(g, mu, logvar, channel.sigma)?;

    let shape = g.value(mu).shape().to_vec();
    let mut ce_terms = Vec::with_capacity(samples);
    let mut mse_terms = Vec::new();
    let mut perc_terms = Vec::new();
    for _ in 0..samples {
        let u = standard_normal(&shape, &mut noise.reparam);
        let z = reparameterize_node(g, mu, logvar, u)?;
        let zhat = if opts.surrogate_channel {
            transmit_surrogate_node(g, z, channel, &mut noise.channel)?
        } else {
            transmit_node(g, z, channel, &mut noise.channel)?
        };
        let lp = model.infer(g, zhat)?;
        ce_terms.push(cross_entropy_node(g, lp, labels)?);
        if stage == Stage::Full {
            let xhat = model.reconstruct(g, zhat)?;
            mse_terms.push(mse_node(g, x, xhat)?);
            perc_terms.push(perception_moment_kl_node(g, x, xhat)?);
        }
    }
    let average = |g: &mut Graph, terms: &[Var]| -> Result<Option<Var>> {
        let Some((&first, rest)) = terms.split_first() else { return Ok(None) };
        let mut acc = first;
        for &t in rest {
            acc = g.add(acc, t)?;
        }
        if terms.len() > 1 {
            acc = g.scale(acc, 1.0 / terms.len() as f64)?;
        }
        Ok(Some(acc))
    };
    let ce = average(g, &ce_terms)?.expect("at least one sample");
    let mse = average(g, &mse_terms)?;
    let perc = average(g, &perc_terms)?;

    let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
    let ce_v = value(g, Some(ce));
    let rate_v = value(g, Some(rate));
    let mse_v = value(g, mse);
    let perc_v = value(g, perc);

    let br = g.scale(rate, weights.beta)?;
    let mut total = g.add(ce, br)?;
    let mut gated = true;
    if let (Some(mse), Some(perc)) = (mse, perc) {
        let lm = g.scale(mse, weights.lambda)?;
        total = g.add(total, lm)?;
        let estimate = opts.gate_estimate.unwrap_or(perc_v);
        let (_, is_gated) = gated_perception(estimate, weights.mu, weights.threshold);
        gated = is_gated;
        if !gated {
            let mp = g.scale(perc, weights.mu)?;
            total = g.add(total, mp)?;
        }
    }
    let breakdown = LossBreakdown {
        ce: ce_v,
        rate_kl: rate_v,
        mse: mse_v,
        perception: perc_v,
        perception_gated: gated,
        total: g.value(total).data()[0],
    };
    if !breakdown.is_finite() {
        return Err(Error::Numeric {
            msg: format!("{breakdown:?}"),
        });
    }
    Ok((total, breakdown))
}

/// Evaluates the minibatch objective without recording gradients.
#[allow(clippy::too_many_arguments)]
pub fn rdpvb_loss(
    x: &Tensor,
    labels: &[u8],
    params: &ModelParams,
    channel: &ChannelConfig,
    weights: &RdpbWeights,
    noise: &mut NoiseStreams,
    stage: Stage,
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let model = params.bind(&mut g, Trainable::None);
    rdpvb_forward(&mut g, &model, x, labels, channel, weights, noise, stage, opts).map(|(_, b)| b)
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over every parameter
/// entry, where the analytic gradient comes from the graph and the numeric
/// one from central differences of the loss with step `eps`.
///
/// Both sides use the clamp surrogate for the quantizer and reseed the noise
/// streams from `seed` for every evaluation, so the loss is a smooth function
/// of the parameters away from clamp and relu kinks.
#[allow(clippy::too_many_arguments)]
pub fn rdpvb_grad_check(
    params: &ModelParams,
    x: &Tensor,
    labels: &[u8],
    channel: &ChannelConfig,
    weights: &RdpbWeights,
    stage: Stage,
    seed: u64,
    eps: f64,
) -> Result<f64> {
    use rand::SeedableRng;
    let streams = || NoiseStreams {
        reparam: ChaCha8Rng::seed_from_u64(seed),
        channel: ChaCha8Rng::seed_from_u64(seed ^ 0x5555_5555),
    };
    let opts = LossOptions {
        surrogate_channel: true,
        ..LossOptions::default()
    };
    let trainable = match stage {
        Stage::Classifier => Trainable::Classifier,
        Stage::Full => Trainable::All,
    };
    let mut g = Graph::new();
    let model = params.bind(&mut g, trainable);
    let (loss, _) = rdpvb_forward(&mut g, &model, x, labels, channel, weights, &mut streams(), stage, &opts)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = model
        .vars()
        .into_iter()
        .map(|v| g.take_grad(v).ok_or_else(|| Error::State("missing gradient".into())))
        .collect::<Result<_>>()?;

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let mut eval = |delta: f64| -> Result<f64> {
                let original = probe.named_tensors()[k].1.data()[i];
                probe.named_tensors_mut()[k].1.data_mut()[i] = original + delta;
                let out = rdpvb_loss(x, labels, &probe, channel, weights, &mut streams(), stage, &opts);
                probe.named_tensors_mut()[k].1.data_mut()[i] = original;
                Ok(out?.total)
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
