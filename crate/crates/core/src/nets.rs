//! Small network building blocks shared by the embedding, denoising,
//! distillation and evaluation networks.

use std::collections::HashMap;

use rand::Rng;
use tch::{nn, nn::Module, nn::ModuleT, Kind, Tensor};

use crate::error::{CcdmError, Result};
use crate::rng;

/// Variables whose name contains this marker start at zero.
pub const ZERO_INIT: &str = "zero_out";

/// Re-initializes every variable of `vs` from a stream keyed by `(seed, name)`,
/// independent of the global torch generator.
///
/// Weights of rank >= 2 get `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases whose
/// sibling weight has rank >= 2 get the same bound, normalization layers get
/// unit scale and zero shift, running statistics are untouched, and variables named `u`
/// (spectral-norm power iterates) are drawn unit-normal.
pub fn seeded_init(vs: &nn::VarStore, seed: u64) {
    let vars = vs.variables();
    let mut names: Vec<&String> = vars.keys().collect();
    names.sort();
    let fan_in_of: HashMap<String, i64> = vars
        .iter()
        .filter(|(n, t)| n.ends_with("weight") && t.dim() >= 2)
        .map(|(n, t)| {
            let s = t.size();
            (n.trim_end_matches("weight").to_string(), s[1..].iter().product())
        })
        .collect();
    tch::no_grad(|| {
        for name in names {
            let var = &vars[name];
            let key = name_key(name);
            let mut r = rng::stream(seed, &[rng::role::EMBED, key]);
            let n = var.numel();
            let values: Option<Vec<f64>> = if name.contains(ZERO_INIT) {
                Some(vec![0.0; n])
            } else if name.ends_with(".u") || name == "u" {
                let v = rng::normal_vec(&mut r, n);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                Some(v.into_iter().map(|x| x / norm).collect())
            } else if var.dim() >= 2 {
                let fan_in = var.size()[1..].iter().product::<i64>().max(1);
                let bound = 1.0 / (fan_in as f64).sqrt();
                Some((0..n).map(|_| r.gen_range(-bound..bound)).collect())
            } else if name.ends_with("bias") {
                Some(match fan_in_of.get(name.trim_end_matches("bias")) {
                    Some(&fan_in) => {
                        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                        (0..n).map(|_| r.gen_range(-bound..bound)).collect()
                    }
                    None => vec![0.0; n],
                })
            } else if name.ends_with("weight") {
                // norm-layer scale
                Some(vec![1.0; n])
            } else {
                None
            };
            if let Some(v) = values {
                let src = Tensor::from_slice(&v).reshape(var.size()).to_kind(var.kind());
                let mut dst = var.shallow_clone();
                dst.copy_(&src);
            }
        }
    });
}

fn name_key(name: &str) -> u64 {
    // FNV-1a; stable across runs and platforms
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Order-independent fingerprint of all parameter values in a var store.
pub fn parameter_hash(vs: &nn::VarStore) -> String {
    use sha2::{Digest, Sha256};
    let vars = vs.variables();
    let mut names: Vec<&String> = vars.keys().collect();
    names.sort();
    let mut h = Sha256::new();
    for name in names {
        let t = vars[name].to_kind(Kind::Double).flatten(0, -1);
        let v = Vec::<f64>::try_from(&t).unwrap_or_default();
        h.update(name.as_bytes());
        for x in v {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn parameter_count(vs: &nn::VarStore) -> i64 {
    vs.trainable_variables().iter().map(|t| t.numel() as i64).sum()
}

/// Copies all parameter values from `src` into `dst` (names must match).
pub fn copy_vars(dst: &mut nn::VarStore, src: &nn::VarStore) -> Result<()> {
    dst.copy(src).map_err(CcdmError::from)
}

/// Transformer-style sinusoidal features of a batch of scalars: `(B,) -> (B, dim)`.
pub fn sinusoidal_embedding(values: &Tensor, dim: i64, max_period: f64) -> Tensor {
    let half = dim / 2;
    let freqs = (Tensor::arange(half, (Kind::Float, values.device())) * (-(max_period.ln()) / half as f64)).exp();
    let args = values.to_kind(Kind::Float).unsqueeze(1) * freqs.unsqueeze(0);
    let emb = Tensor::cat(&[args.cos(), args.sin()], 1);
    if dim % 2 == 1 {
        Tensor::cat(&[emb, Tensor::zeros([values.size()[0], 1], (Kind::Float, values.device()))], 1)
    } else {
        emb
    }
}

/// Five-layer perceptron mapping a scalar to a vector: four hidden linear
/// layers each followed by group normalization and ReLU, then a linear output.
#[derive(Debug)]
pub struct Mlp5 {
    hidden: Vec<(nn::Linear, nn::GroupNorm)>,
    out: nn::Linear,
    pub out_dim: i64,
}

impl Mlp5 {
    pub fn new(p: &nn::Path, hidden: i64, out_dim: i64, groups: i64) -> Self {
        let mut layers = Vec::new();
        let mut in_dim = 1;
        for i in 0..4 {
            let lin = nn::linear(p / format!("fc{i}"), in_dim, hidden, Default::default());
            let gn = nn::group_norm(p / format!("gn{i}"), groups, hidden, Default::default());
            layers.push((lin, gn));
            in_dim = hidden;
        }
        let out = nn::linear(p / "out", hidden, out_dim, Default::default());
        Self { hidden: layers, out, out_dim }
    }
}

impl Module for Mlp5 {
    /// `(B,)` or `(B, 1)` scalars to `(B, out_dim)`.
    fn forward(&self, y: &Tensor) -> Tensor {
        let mut h = y.reshape([-1, 1]).to_kind(Kind::Float);
        for (lin, gn) in &self.hidden {
            h = gn.forward(&lin.forward(&h)).relu();
        }
        self.out.forward(&h)
    }
}

/// Convolutional image encoder followed by a widening linear layer and a
/// linear head: `x -> trunk -> relu(widen) = features -> head`.
///
/// The split between `features` and `head` exposes a hidden vector of any
/// requested width.
#[derive(Debug)]
pub struct ConvNet {
    convs: Vec<(nn::Conv2D, nn::BatchNorm)>,
    fc: nn::Linear,
    widen: nn::Linear,
    head1: nn::Linear,
    head2: nn::Linear,
    pub feat_dim: i64,
    pub out_dim: i64,
}

impl ConvNet {
    /// `shape` is `(C, H, W)`; `H` and `W` must be divisible by 8.
    pub fn new(p: &nn::Path, shape: [i64; 3], width: i64, feat_dim: i64, out_dim: i64) -> Result<Self> {
        let [c, h, w] = shape;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(CcdmError::Shape(format!("image side must be divisible by 8, got {h}x{w}")));
        }
        let chans = [c, width, 2 * width, 2 * width, 4 * width];
        let mut convs = Vec::new();
        for i in 0..4 {
            let (k, stride, pad) = if i == 0 { (3, 1, 1) } else { (4, 2, 1) };
            let cfg = nn::ConvConfig { stride, padding: pad, ..Default::default() };
            let conv = nn::conv2d(p / format!("conv{i}"), chans[i], chans[i + 1], k, cfg);
            let bn = nn::batch_norm2d(p / format!("bn{i}"), chans[i + 1], Default::default());
            convs.push((conv, bn));
        }
        let flat = 4 * width * (h / 8) * (w / 8);
        let fc = nn::linear(p / "fc", flat, 256, Default::default());
        let widen = nn::linear(p / "widen", 256, feat_dim, Default::default());
        let head1 = nn::linear(p / "head1", feat_dim, 128, Default::default());
        let head2 = nn::linear(p / "head2", 128, out_dim, Default::default());
        Ok(Self { convs, fc, widen, head1, head2, feat_dim, out_dim })
    }

    pub fn features(&self, x: &Tensor, train: bool) -> Tensor {
        let mut h = x.shallow_clone();
        for (conv, bn) in &self.convs {
            h = bn.forward_t(&conv.forward(&h), train).relu();
        }
        let h = self.fc.forward(&h.flatten(1, -1)).relu();
        self.widen.forward(&h).relu()
    }

    pub fn head(&self, features: &Tensor) -> Tensor {
        self.head2.forward(&self.head1.forward(features).relu())
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
        self.head(&self.features(x, train))
    }
}

/// Runs `f` over `x` in chunks of `batch` rows and concatenates the results.
pub fn batched<F>(x: &Tensor, batch: i64, f: F) -> Tensor
where
    F: Fn(&Tensor) -> Tensor,
{
    let n = x.size()[0];
    let parts: Vec<Tensor> = (0..n)
        .step_by(batch.max(1) as usize)
        .map(|s| f(&x.narrow(0, s, (n - s).min(batch))))
        .collect();
    Tensor::cat(&parts, 0)
}

/// Linear layer whose weight is divided by its largest singular value,
/// estimated with one power iteration per training forward pass.
#[derive(Debug)]
pub struct SnLinear {
    weight: Tensor,
    bias: Tensor,
    u: Tensor,
}

impl SnLinear {
    pub fn new(p: &nn::Path, in_dim: i64, out_dim: i64) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = p.var("weight", &[out_dim, in_dim], nn::Init::Uniform { lo: -bound, up: bound });
        let bias = p.var("bias", &[out_dim], nn::Init::Const(0.0));
        let u = p.var("u", &[out_dim], nn::Init::Randn { mean: 0.0, stdev: 1.0 }).set_requires_grad(false);
        Self { weight, bias, u }
    }

    pub fn normalized_weight(&self, train: bool) -> Tensor {
        spectral_normalize(&self.weight, &self.u, train)
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
        x.linear(&self.normalized_weight(train), Some(&self.bias))
    }
}

/// 2-D convolution with a spectrally normalized kernel.
#[derive(Debug)]
pub struct SnConv2d {
    weight: Tensor,
    bias: Tensor,
    u: Tensor,
    stride: i64,
    padding: i64,
}

impl SnConv2d {
    pub fn new(p: &nn::Path, c_in: i64, c_out: i64, k: i64, stride: i64, padding: i64) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = p.var("weight", &[c_out, c_in, k, k], nn::Init::Uniform { lo: -bound, up: bound });
        let bias = p.var("bias", &[c_out], nn::Init::Const(0.0));
        let u = p.var("u", &[c_out], nn::Init::Randn { mean: 0.0, stdev: 1.0 }).set_requires_grad(false);
        Self { weight, bias, u, stride, padding }
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
        let w = spectral_normalize(&self.weight, &self.u, train);
        x.conv2d(&w, Some(&self.bias), [self.stride, self.stride], [self.padding, self.padding], [1, 1], 1)
    }
}

fn spectral_normalize(weight: &Tensor, u: &Tensor, train: bool) -> Tensor {
    let out = weight.size()[0];
    let w2 = weight.reshape([out, -1]);
    let (u_vec, v_vec) = tch::no_grad(|| {
        let mut u_vec = u.shallow_clone();
        let v = w2.tr().mv(&u_vec);
        let v = &v / (v.norm() + 1e-12);
        if train {
            let nu = w2.mv(&v);
            let nu = &nu / (nu.norm() + 1e-12);
            u_vec.copy_(&nu);
        }
        (u.copy(), v)
    });
    let sigma = u_vec.dot(&w2.mv(&v_vec));
    weight / sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Device;

    #[test]
    fn seeded_init_is_reproducible() {
        let make = |seed| {
            let vs = nn::VarStore::new(Device::Cpu);
            let _m = Mlp5::new(&vs.root(), 16, 4, 8);
            seeded_init(&vs, seed);
            parameter_hash(&vs)
        };
        assert_eq!(make(5), make(5));
        assert_ne!(make(5), make(6));
    }

    #[test]
    fn zero_marker_zeroes_variables() {
        let vs = nn::VarStore::new(Device::Cpu);
        let lin = nn::linear(vs.root() / ZERO_INIT, 3, 2, Default::default());
        seeded_init(&vs, 1);
        assert_eq!(lin.ws.abs().sum(Kind::Float).double_value(&[]), 0.0);
    }

    #[test]
    fn spectral_norm_bounds_the_operator() {
        let vs = nn::VarStore::new(Device::Cpu);
        let lin = SnLinear::new(&vs.root(), 6, 5);
        seeded_init(&vs, 2);
        for _ in 0..50 {
            let _ = lin.forward_t(&Tensor::zeros([1, 6], (Kind::Float, Device::Cpu)), true);
        }
        let w = lin.normalized_weight(false);
        let (_, sv, _) = w.to_kind(Kind::Double).svd(true, false);
        let top = sv.double_value(&[0]);
        assert!((top - 1.0).abs() < 1e-3, "{top}");
    }

    #[test]
    fn sinusoidal_shape() {
        let v = Tensor::from_slice(&[0.0f32, 1.0, 5.0]);
        let e = sinusoidal_embedding(&v, 8, 10_000.0);
        assert_eq!(e.size(), vec![3, 8]);
        // cos(0) = 1 for the first half at value 0
        assert_eq!(e.double_value(&[0, 0]), 1.0);
    }
}
