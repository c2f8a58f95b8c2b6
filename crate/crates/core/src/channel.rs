//! The transmission chain: uniform quantization of the encoded feature,
//! additive white Gaussian noise, and rate accounting.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_CLIP: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// Feature dimension.
    pub dim: usize,
    /// Quantization levels per coordinate.
    pub levels: u64,
    /// Quantizer range is `[-clip, clip]`.
    #[serde(default = "default_clip")]
    pub clip: f64,
    /// Noise standard deviation.
    pub sigma: f64,
}

fn default_clip() -> f64 {
    DEFAULT_CLIP
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            levels: 4,
            clip: DEFAULT_CLIP,
            sigma: 0.1,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 1 {
            return Err(Error::Contract("channel dim must be >= 1".into()));
        }
        if self.levels < 2 {
            return Err(Error::Contract(format!(
                "quantization levels must be >= 2, got {}",
                self.levels
            )));
        }
        if !(self.clip > 0.0) || !self.clip.is_finite() {
            return Err(Error::Contract(format!("clip must be > 0, got {}", self.clip)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Contract(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn rate_bits(&self) -> f64 {
        self.dim as f64 * (self.levels as f64).log2()
    }

    /// Quantizer cell width.
    pub fn step(&self) -> f64 {
        2.0 * self.clip / self.levels as f64
    }
}

/// Bits per transmitted feature vector: `dim · log2(levels)`.
pub fn rate_bits(dim: usize, levels: u64) -> Result<f64> {
    if levels < 2 {
        return Err(Error::Contract(format!(
            "quantization levels must be >= 2, got {levels}"
        )));
    }
    if dim < 1 {
        return Err(Error::Contract("feature dimension must be >= 1".into()));
    }
    // log2 is exact for powers of two.
    Ok(dim as f64 * (levels as f64).log2())
}

/// Mid-rise uniform quantizer on `[-clip, clip]` with `levels` cells.
/// Values on a cell edge go to the upper cell.
pub fn quantize_value(z: f64, levels: u64, clip: f64) -> f64 {
    let step = 2.0 * clip / levels as f64;
    let idx = ((z + clip) / step).floor().clamp(0.0, (levels - 1) as f64);
    -clip + (idx + 0.5) * step
}

pub fn quantize(z: &Tensor, levels: u64, clip: f64) -> Result<Tensor> {
    if levels < 2 || !(clip > 0.0) {
        return Err(Error::Contract(format!(
            "quantize needs levels >= 2 and clip > 0, got ({levels}, {clip})"
        )));
    }
    Ok(z.map(|v| quantize_value(v, levels, clip)))
}

/// Adds i.i.d. `N(0, sigma²)` noise. `sigma = 0` returns the input unchanged
/// and draws nothing from `rng`.
pub fn awgn<R: Rng + ?Sized>(z: &Tensor, sigma: f64, rng: &mut R) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::Contract(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(z.clone());
    }
    let mut out = z.clone();
    for v in out.data_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *v += sigma * e;
    }
    Ok(out)
}

/// Quantize, then corrupt with channel noise.
pub fn transmit<R: Rng + ?Sized>(z: &Tensor, cfg: &ChannelConfig, rng: &mut R) -> Result<Tensor> {
    cfg.validate()?;
    check_dim(z, cfg)?;
    let q = quantize(z, cfg.levels, cfg.clip)?;
    awgn(&q, cfg.sigma, rng)
}

/// Differentiable [`transmit`]: the forward value is the quantized, noisy
/// feature; the backward pass treats the quantizer as `clamp(z, -clip, clip)`
/// and the noise as a constant offset.
pub fn transmit_node<R: Rng + ?Sized>(
    g: &mut Graph,
    z: Var,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<Var> {
    cfg.validate()?;
    check_dim(g.value(z), cfg)?;
    let q = quantize(g.value(z), cfg.levels, cfg.clip)?;
    let q = g.clamp_straight_through(z, -cfg.clip, cfg.clip, q)?;
    if cfg.sigma == 0.0 {
        return Ok(q);
    }
    let noise = awgn(&Tensor::zeros(g.value(q).shape()), cfg.sigma, rng)?;
    let noise = g.constant(noise);
    g.add(q, noise)
}

/// The surrogate that [`transmit_node`]'s gradient is exact for: forward
/// `clamp(z, -clip, clip)` plus the same noise draw.
pub fn transmit_surrogate_node<R: Rng + ?Sized>(
    g: &mut Graph,
    z: Var,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<Var> {
    cfg.validate()?;
    check_dim(g.value(z), cfg)?;
    let q = g.clamp(z, -cfg.clip, cfg.clip)?;
    if cfg.sigma == 0.0 {
        return Ok(q);
    }
    let noise = awgn(&Tensor::zeros(g.value(q).shape()), cfg.sigma, rng)?;
    let noise = g.constant(noise);
    g.add(q, noise)
}

fn check_dim(z: &Tensor, cfg: &ChannelConfig) -> Result<()> {
    if z.cols() != cfg.dim || z.rank() == 0 {
        return Err(Error::Contract(format!(
            "feature of shape {:?} does not end in channel dim {}",
            z.shape(),
            cfg.dim
        )));
    }
    Ok(())
}
