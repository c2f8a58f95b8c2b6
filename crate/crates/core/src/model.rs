//! Stochastic encoder, the two decoder heads, and checkpoint persistence.
//!
//! The encoder produces the mean and log-variance of a diagonal Gaussian
//! over the feature; the variational prior on the received feature is the
//! standard normal. Both heads read only the received feature.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CLASSES, PIXELS};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RDPB";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hidden layer widths of the three networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Arch {
    pub encoder_hidden: Vec<usize>,
    pub inference_hidden: Vec<usize>,
    pub reconstruction_hidden: Vec<usize>,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![1024, 256],
            inference_hidden: vec![256],
            reconstruction_hidden: vec![256, 1024],
        }
    }
}

impl Arch {
    fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend_from_slice(hidden);
        w.push(output);
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `(fan_in, fan_out)`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Fully connected network with relu between layers and no activation on
/// the output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    fn init(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Layer {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("extent"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").weight.shape()[1]
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub encoder: Mlp,
    pub inference: Mlp,
    pub reconstruction: Option<Mlp>,
}

/// Which parameter groups receive gradients when bound to a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    None,
    /// Encoder and inference head.
    Classifier,
    /// Every group, reconstruction head included.
    All,
}

/// Weights drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
pub fn init_params(seed: u64, arch: &Arch, dim: usize) -> Result<ModelParams> {
    init_params_for_input(seed, arch, dim, PIXELS)
}

/// [`init_params`] for sources with `input` features instead of MNIST pixels.
pub fn init_params_for_input(seed: u64, arch: &Arch, dim: usize, input: usize) -> Result<ModelParams> {
    if dim == 0 || input == 0 {
        return Err(Error::Contract("feature dim and input width must be positive".into()));
    }
    let all = arch
        .encoder_hidden
        .iter()
        .chain(&arch.inference_hidden)
        .chain(&arch.reconstruction_hidden);
    if all.clone().any(|&w| w == 0) {
        return Err(Error::Contract(format!("zero-width layer in {arch:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Mlp::init(&Arch::widths(input, &arch.encoder_hidden, 2 * dim), &mut rng);
    let inference = Mlp::init(&Arch::widths(dim, &arch.inference_hidden, CLASSES), &mut rng);
    let reconstruction = Mlp::init(&Arch::widths(dim, &arch.reconstruction_hidden, input), &mut rng);
    Ok(ModelParams {
        dim,
        encoder,
        inference,
        reconstruction: Some(reconstruction),
    })
}

/// Weight and bias of one layer, collected by name while loading.
type WeightBias = (Option<Tensor>, Option<Tensor>);

impl ModelParams {
    pub fn arch(&self) -> Arch {
        let hidden = |m: &Mlp| m.layers[..m.layers.len() - 1].iter().map(|l| l.weight.shape()[1]).collect();
        Arch {
            encoder_hidden: hidden(&self.encoder),
            inference_hidden: hidden(&self.inference),
            reconstruction_hidden: self.reconstruction.as_ref().map(hidden).unwrap_or_default(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.inference.param_count()
            + self.reconstruction.as_ref().map_or(0, Mlp::param_count)
    }

    fn groups(&self) -> Vec<(&'static str, &Mlp)> {
        let mut g = vec![("encoder", &self.encoder), ("inference", &self.inference)];
        if let Some(r) = &self.reconstruction {
            g.push(("reconstruction", r));
        }
        g
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (group, mlp) in self.groups() {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{group}.{i}.weight"), &l.weight));
                out.push((format!("{group}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        let mut groups: Vec<(&str, &mut Mlp)> =
            vec![("encoder", &mut self.encoder), ("inference", &mut self.inference)];
        if let Some(r) = &mut self.reconstruction {
            groups.push(("reconstruction", r));
        }
        for (group, mlp) in groups {
            for (i, l) in mlp.layers.iter_mut().enumerate() {
                out.push((format!("{group}.{i}.weight"), &mut l.weight));
                out.push((format!("{group}.{i}.bias"), &mut l.bias));
            }
        }
        out
    }

    /// Rebuilds parameters from named tensors, checking that the shapes
    /// chain together.
    pub fn from_named(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut groups: BTreeMap<String, BTreeMap<usize, WeightBias>> = BTreeMap::new();
        for (name, t) in tensors {
            let parts: Vec<&str> = name.split('.').collect();
            let [group, idx, kind] = parts[..] else {
                return Err(Error::Format(format!("bad tensor name {name:?}")));
            };
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Format(format!("bad layer index in {name:?}")))?;
            let slot = groups.entry(group.to_string()).or_default().entry(idx).or_default();
            match kind {
                "weight" => slot.0 = Some(t),
                "bias" => slot.1 = Some(t),
                _ => return Err(Error::Format(format!("bad tensor kind in {name:?}"))),
            }
        }
        let mut take = |group: &str| -> Result<Option<Mlp>> {
            let Some(layers) = groups.remove(group) else { return Ok(None) };
            let mut out = Vec::new();
            for (expect, (idx, (w, b))) in layers.into_iter().enumerate() {
                if idx != expect {
                    return Err(Error::Format(format!("{group}: missing layer {expect}")));
                }
                let (Some(weight), Some(bias)) = (w, b) else {
                    return Err(Error::Format(format!("{group}.{idx}: weight or bias missing")));
                };
                if weight.rank() != 2 || bias.rank() != 1 || bias.len() != weight.shape()[1] {
                    return Err(Error::Format(format!(
                        "{group}.{idx}: weight {:?} and bias {:?} disagree",
                        weight.shape(),
                        bias.shape()
                    )));
                }
                if let Some(prev) = out.last() {
                    let prev: &Layer = prev;
                    if prev.weight.shape()[1] != weight.shape()[0] {
                        return Err(Error::Format(format!("{group}.{idx}: width mismatch")));
                    }
                }
                out.push(Layer { weight, bias });
            }
            Ok(Some(Mlp { layers: out }))
        };
        let encoder = take("encoder")?.ok_or_else(|| Error::Format("no encoder tensors".into()))?;
        let inference = take("inference")?.ok_or_else(|| Error::Format("no inference tensors".into()))?;
        let reconstruction = take("reconstruction")?;
        if let Some(extra) = groups.keys().next() {
            return Err(Error::Format(format!("unknown tensor group {extra:?}")));
        }
        let out = encoder.output_width();
        if out % 2 != 0 {
            return Err(Error::Format(format!(
                "encoder maps {} -> {out}, expected an even output width",
                encoder.input_width()
            )));
        }
        let dim = out / 2;
        if inference.input_width() != dim || inference.output_width() != CLASSES {
            return Err(Error::Format("inference head does not match encoder".into()));
        }
        if let Some(r) = &reconstruction {
            if r.input_width() != dim || r.output_width() != encoder.input_width() {
                return Err(Error::Format("reconstruction head does not match encoder".into()));
            }
        }
        Ok(Self {
            dim,
            encoder,
            inference,
            reconstruction,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> BoundModel {
        let bind_mlp = |g: &mut Graph, mlp: &Mlp, rg: bool| -> Vec<(Var, Var)> {
            mlp.layers
                .iter()
                .map(|l| (g.leaf(l.weight.clone(), rg), g.leaf(l.bias.clone(), rg)))
                .collect()
        };
        let classifier_rg = trainable != Trainable::None;
        let encoder = bind_mlp(g, &self.encoder, classifier_rg);
        let inference = bind_mlp(g, &self.inference, classifier_rg);
        let reconstruction = match (&self.reconstruction, trainable) {
            (Some(r), Trainable::All) => Some(bind_mlp(g, r, true)),
            (Some(r), Trainable::None) => Some(bind_mlp(g, r, false)),
            _ => None,
        };
        let dim = self.dim;
        let mut select = |offset: usize| {
            let mut s = Tensor::zeros(&[2 * dim, dim]);
            for j in 0..dim {
                s.data_mut()[(offset + j) * dim + j] = 1.0;
            }
            g.constant(s)
        };
        let select_mu = select(0);
        let select_logvar = select(dim);
        BoundModel {
            dim,
            encoder,
            inference,
            reconstruction,
            select_mu,
            select_logvar,
        }
    }
}

/// Model parameters registered on one [`Graph`].
pub struct BoundModel {
    dim: usize,
    encoder: Vec<(Var, Var)>,
    inference: Vec<(Var, Var)>,
    reconstruction: Option<Vec<(Var, Var)>>,
    select_mu: Var,
    select_logvar: Var,
}

fn mlp_forward(g: &mut Graph, layers: &[(Var, Var)], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let lin = g.matmul(h, w)?;
        h = g.add_bias(lin, b)?;
        if i + 1 < layers.len() {
            h = g.relu(h);
        }
    }
    Ok(h)
}

impl BoundModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_reconstruction(&self) -> bool {
        self.reconstruction.is_some()
    }

    /// `(mu, logvar)`, each `(M, dim)`; logvar is clamped to `[-10, 10]`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let xv = g.value(x);
        let width = g.value(self.encoder[0].0).rows();
        if xv.rank() != 2 || xv.cols() != width {
            return Err(Error::Contract(format!(
                "encoder input must be (M, {width}), got {:?}",
                xv.shape()
            )));
        }
        let h = mlp_forward(g, &self.encoder, x)?;
        let mu = g.matmul(h, self.select_mu)?;
        let raw = g.matmul(h, self.select_logvar)?;
        let logvar = g.clamp(raw, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mu, logvar))
    }

    /// Class log-probabilities `(M, 10)`.
    pub fn infer(&self, g: &mut Graph, zhat: Var) -> Result<Var> {
        self.check_feature(g, zhat)?;
        let logits = mlp_forward(g, &self.inference, zhat)?;
        g.log_softmax(logits)
    }

    /// Reconstructed images `(M, 784)` in `(0, 1)`.
    pub fn reconstruct(&self, g: &mut Graph, zhat: Var) -> Result<Var> {
        self.check_feature(g, zhat)?;
        let layers = self
            .reconstruction
            .as_ref()
            .ok_or_else(|| Error::Contract("reconstruction head not bound".into()))?;
        let out = mlp_forward(g, layers, zhat)?;
        Ok(g.sigmoid(out))
    }

    fn check_feature(&self, g: &Graph, zhat: Var) -> Result<()> {
        let v = g.value(zhat);
        if v.rank() != 2 || v.cols() != self.dim {
            return Err(Error::Contract(format!(
                "received feature must be (M, {}), got {:?}",
                self.dim,
                v.shape()
            )));
        }
        Ok(())
    }

    /// Parameter handles in the order of [`ModelParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let groups = [Some(&self.encoder), Some(&self.inference), self.reconstruction.as_ref()];
        for layers in groups.into_iter().flatten() {
            for &(w, b) in layers {
                out.push(w);
                out.push(b);
            }
        }
        out
    }
}

/// `z = mu + exp(logvar / 2) · u` on the graph.
pub fn reparameterize_node(g: &mut Graph, mu: Var, logvar: Var, u: Tensor) -> Result<Var> {
    if g.value(mu).shape() != u.shape() || g.value(logvar).shape() != u.shape() {
        return Err(Error::Shape {
            op: "reparameterize",
            lhs: g.value(mu).shape().to_vec(),
            rhs: u.shape().to_vec(),
        });
    }
    let half = g.scale(logvar, 0.5)?;
    let std = g.exp(half);
    let u = g.constant(u);
    let noise = g.mul(std, u)?;
    g.add(mu, noise)
}

pub fn encode(x: &Tensor, params: &ModelParams) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let m = params.bind(&mut g, Trainable::None);
    let x = g.constant(x.clone());
    let (mu, logvar) = m.encode(&mut g, x)?;
    Ok((g.value(mu).clone(), g.value(logvar).clone()))
}

pub fn reparameterize(mu: &Tensor, logvar: &Tensor, u: &Tensor) -> Result<Tensor> {
    if mu.shape() != logvar.shape() || mu.shape() != u.shape() {
        return Err(Error::Shape {
            op: "reparameterize",
            lhs: mu.shape().to_vec(),
            rhs: u.shape().to_vec(),
        });
    }
    let data = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(u.data())
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect();
    Tensor::new(mu.shape().to_vec(), data)
}

pub fn infer(zhat: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let m = params.bind(&mut g, Trainable::None);
    let z = g.constant(zhat.clone());
    let out = m.infer(&mut g, z)?;
    Ok(g.value(out).clone())
}

pub fn reconstruct(zhat: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let m = params.bind(&mut g, Trainable::None);
    let z = g.constant(zhat.clone());
    let out = m.reconstruct(&mut g, z)?;
    Ok(g.value(out).clone())
}

/// Serializes to the checkpoint layout: magic `RDPB`, `u32` version, `u64`
/// tensor count, then per tensor a `u64` name length, the UTF-8 name, a `u64`
/// rank, `u64` extents and `f64` values. Every integer and real is
/// little-endian.
pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let tensors = params.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            actual: self.buf.len(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn params_from_checkpoint_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u64()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = c.u64()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|e| Error::Format(format!("tensor name: {e}")))?
            .to_string();
        let rank = c.u64()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank).map(|_| c.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Format("extent overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    ModelParams::from_named(tensors)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, checkpoint_bytes(params)).map_err(Error::path(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::path(path))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(Error::path(path))?;
    params_from_checkpoint_bytes(&bytes)
}
