//! The conditional denoising U-Net `x0_hat(x_t, t, y or null)`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::{nn, nn::Module, nn::ModuleT, Device, Tensor};

use crate::diffmath::{self, PredictionType};
use crate::embednet::{CondBatch, SHORT_DIM};
use crate::error::{invalid, CcdmError, Result};
use crate::labelspace::LabelSpaceMeta;
use crate::nets::{self, ZERO_INIT};
use crate::schedule::{NoiseSchedule, ScheduleMeta};

const GROUPS: i64 = 8;

/// Anything usable as the denoiser inside training and sampling loops.
pub trait Denoise {
    fn pred_type(&self) -> PredictionType;
    fn image_shape(&self) -> [i64; 3];
    /// Number of diffusion steps `T` the model was built for.
    fn steps(&self) -> usize;
    /// Raw network output in `pred_type` space.
    fn forward(&self, xt: &Tensor, ts: &[usize], cond: &CondBatch, train: bool) -> Tensor;
}

/// Validated prediction in the model's native space.
pub fn predict<D: Denoise + ?Sized>(f: &D, xt: &Tensor, ts: &[usize], cond: &CondBatch, train: bool) -> Result<Tensor> {
    let [c, h, w] = f.image_shape();
    let s = xt.size();
    if s.len() != 4 || s[1..] != [c, h, w] {
        return Err(CcdmError::Shape(format!("x_t {s:?} does not match image shape {:?}", [c, h, w])));
    }
    if ts.len() as i64 != s[0] || cond.len() != s[0] {
        return Err(CcdmError::Shape(format!(
            "{} rows but {} time steps and {} conditions",
            s[0],
            ts.len(),
            cond.len()
        )));
    }
    if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > f.steps()) {
        return invalid(format!("time step {t} outside [1, {}]", f.steps()));
    }
    Ok(f.forward(xt, ts, cond, train))
}

/// Prediction converted to x0 space.
pub fn predict_x0<D: Denoise + ?Sized>(
    f: &D,
    xt: &Tensor,
    ts: &[usize],
    cond: &CondBatch,
    schedule: &NoiseSchedule,
    train: bool,
) -> Result<Tensor> {
    let raw = predict(f, xt, ts, cond, train)?;
    diffmath::convert_prediction(&raw, xt, ts, f.pred_type(), PredictionType::X0, schedule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub image_shape: [i64; 3],
    pub base_channels: i64,
    pub channel_mults: Vec<i64>,
    pub res_blocks: usize,
    pub time_embed_dim: i64,
    pub label_embed_dim: i64,
    pub pred_type: PredictionType,
    pub steps: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_shape: [1, 32, 32],
            base_channels: 64,
            channel_mults: vec![1, 2, 4],
            res_blocks: 2,
            time_embed_dim: 256,
            label_embed_dim: SHORT_DIM,
            pred_type: PredictionType::X0,
            steps: 1000,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image_shape;
        if c <= 0 || h <= 0 || w <= 0 {
            return Err(CcdmError::Shape(format!("bad image shape {:?}", self.image_shape)));
        }
        if self.channel_mults.is_empty() || self.channel_mults.iter().any(|&m| m <= 0) {
            return Err(CcdmError::Config("channel_mults must be nonempty and positive".into()));
        }
        let div = 1i64 << (self.channel_mults.len() - 1);
        if h % div != 0 || w % div != 0 {
            return Err(CcdmError::Shape(format!("image side {h}x{w} not divisible by {div}")));
        }
        if self.base_channels <= 0 || self.base_channels % GROUPS != 0 {
            return Err(CcdmError::Config(format!("base_channels must be a positive multiple of {GROUPS}")));
        }
        if self.res_blocks == 0 || self.time_embed_dim <= 0 {
            return Err(CcdmError::Config("res_blocks and time_embed_dim must be positive".into()));
        }
        if self.label_embed_dim != SHORT_DIM {
            return Err(CcdmError::Config(format!("label_embed_dim must be {SHORT_DIM}")));
        }
        if self.steps < 2 {
            return Err(CcdmError::Config("steps must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct ResBlock {
    norm1: nn::GroupNorm,
    conv1: nn::Conv2D,
    emb: nn::Linear,
    norm2: nn::GroupNorm,
    conv2: nn::Conv2D,
    skip: Option<nn::Conv2D>,
}

fn conv3(p: nn::Path, c_in: i64, c_out: i64) -> nn::Conv2D {
    nn::conv2d(p, c_in, c_out, 3, nn::ConvConfig { padding: 1, ..Default::default() })
}

impl ResBlock {
    fn new(p: &nn::Path, c_in: i64, c_out: i64, emb_dim: i64) -> Self {
        Self {
            norm1: nn::group_norm(p / "norm1", GROUPS, c_in, Default::default()),
            conv1: conv3(p / "conv1", c_in, c_out),
            emb: nn::linear(p / "emb", emb_dim, 2 * c_out, Default::default()),
            norm2: nn::group_norm(p / "norm2", GROUPS, c_out, Default::default()),
            conv2: conv3(p / "conv2", c_out, c_out),
            skip: (c_in != c_out).then(|| nn::conv2d(p / "skip", c_in, c_out, 1, Default::default())),
        }
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Tensor {
        let h = self.conv1.forward(&self.norm1.forward(x).silu());
        let ss = self.emb.forward(&emb.silu()).unsqueeze(-1).unsqueeze(-1);
        let parts = ss.chunk(2, 1);
        let h = self.norm2.forward(&h) * (&parts[0] + 1.0) + &parts[1];
        let h = self.conv2.forward(&h.silu());
        let skip = match &self.skip {
            Some(s) => s.forward(x),
            None => x.shallow_clone(),
        };
        skip + h
    }
}

#[derive(Debug)]
enum Block {
    Res(ResBlock),
    Down(nn::Conv2D),
    Up(nn::Conv2D),
}

/// Encoder-decoder with skip connections. Time enters through a sinusoidal
/// embedding and an MLP; the short label embedding through fully connected
/// layers with 1-D batch normalization; their sum modulates every residual
/// block. Dropped conditions use a learned null vector.
#[derive(Debug)]
pub struct UNet {
    pub vs: nn::VarStore,
    pub config: UNetConfig,
    time1: nn::Linear,
    time2: nn::Linear,
    label: Vec<(nn::Linear, nn::BatchNorm)>,
    null_embed: Tensor,
    conv_in: nn::Conv2D,
    down: Vec<Block>,
    mid: [ResBlock; 2],
    up: Vec<(Block, bool)>,
    norm_out: nn::GroupNorm,
    conv_out: nn::Conv2D,
    skip_scale: f64,
}

/// Builds the U-Net with parameters seeded from `seed`.
pub fn build_unet(config: UNetConfig, seed: u64) -> Result<UNet> {
    config.validate()?;
    let vs = nn::VarStore::new(Device::Cpu);
    let p = vs.root();
    let base = config.base_channels;
    let emb = config.time_embed_dim;
    let time1 = nn::linear(&p / "time1", base, emb, Default::default());
    let time2 = nn::linear(&p / "time2", emb, emb, Default::default());
    let label = (0..2)
        .map(|i| {
            let d_in = if i == 0 { config.label_embed_dim } else { emb };
            (
                nn::linear(&p / format!("label{i}"), d_in, emb, Default::default()),
                nn::batch_norm1d(&p / format!("label_bn{i}"), emb, Default::default()),
            )
        })
        .collect();
    let null_embed = p.zeros("null_embed", &[emb]);
    let conv_in = conv3(&p / "conv_in", config.image_shape[0], base);

    let mut down = Vec::new();
    let mut skip_chans = vec![base];
    let mut ch = base;
    let levels = config.channel_mults.len();
    for (i, &m) in config.channel_mults.iter().enumerate() {
        for j in 0..config.res_blocks {
            down.push(Block::Res(ResBlock::new(&(&p / format!("down{i}_{j}")), ch, base * m, emb)));
            ch = base * m;
            skip_chans.push(ch);
        }
        if i + 1 < levels {
            let cfg = nn::ConvConfig { stride: 2, padding: 1, ..Default::default() };
            down.push(Block::Down(nn::conv2d(&p / format!("downsample{i}"), ch, ch, 3, cfg)));
            skip_chans.push(ch);
        }
    }
    let mid = [ResBlock::new(&(&p / "mid0"), ch, ch, emb), ResBlock::new(&(&p / "mid1"), ch, ch, emb)];
    let mut up = Vec::new();
    for (i, &m) in config.channel_mults.iter().enumerate().rev() {
        for j in 0..=config.res_blocks {
            let skip = skip_chans.pop().expect("skip channel bookkeeping");
            up.push((Block::Res(ResBlock::new(&(&p / format!("up{i}_{j}")), ch + skip, base * m, emb)), true));
            ch = base * m;
        }
        if i > 0 {
            up.push((Block::Up(conv3(&p / format!("upsample{i}"), ch, ch)), false));
        }
    }
    let norm_out = nn::group_norm(&p / "norm_out", GROUPS, ch, Default::default());
    let conv_out = conv3(&p / format!("{ZERO_INIT}_conv"), ch, config.image_shape[0]);
    nets::seeded_init(&vs, seed);
    Ok(UNet {
        vs,
        config,
        time1,
        time2,
        label,
        null_embed,
        conv_in,
        down,
        mid,
        up,
        norm_out,
        conv_out,
        skip_scale: 1.0,
    })
}

impl UNet {
    /// Multiplies every encoder-to-decoder skip tensor (1 by default; 0 cuts them).
    pub fn set_skip_scale(&mut self, scale: f64) {
        self.skip_scale = scale;
    }

    pub fn parameter_count(&self) -> i64 {
        nets::parameter_count(&self.vs)
    }

    fn label_embedding(&self, cond: &CondBatch, train: bool) -> Tensor {
        let b = cond.len();
        let keep_idx = cond.null_mask.logical_not().nonzero().squeeze_dim(1);
        let n_keep = keep_idx.size()[0];
        let emb_dim = self.config.time_embed_dim;
        let mut out = self.null_embed.unsqueeze(0).expand([b, emb_dim], false).contiguous();
        if n_keep > 0 {
            let mut h = cond.h_short.index_select(0, &keep_idx).to_kind(self.null_embed.kind());
            // batch statistics need at least two rows
            let bn_train = train && n_keep > 1;
            for (lin, bn) in &self.label {
                h = bn.forward_t(&lin.forward(&h), bn_train).relu();
            }
            out = out.index_copy(0, &keep_idx, &h);
        }
        out
    }
}

impl Denoise for UNet {
    fn pred_type(&self) -> PredictionType {
        self.config.pred_type
    }

    fn image_shape(&self) -> [i64; 3] {
        self.config.image_shape
    }

    fn steps(&self) -> usize {
        self.config.steps
    }

    fn forward(&self, xt: &Tensor, ts: &[usize], cond: &CondBatch, train: bool) -> Tensor {
        let t: Vec<f32> = ts.iter().map(|&t| t as f32).collect();
        let kind = self.null_embed.kind();
        let temb = nets::sinusoidal_embedding(&Tensor::from_slice(&t), self.config.base_channels, 10_000.0).to_kind(kind);
        let temb = self.time2.forward(&self.time1.forward(&temb).silu());
        let emb = temb + self.label_embedding(cond, train);

        let mut h = self.conv_in.forward(&xt.to_kind(kind));
        let mut skips = vec![h.shallow_clone()];
        for block in &self.down {
            h = match block {
                Block::Res(r) => r.forward(&h, &emb),
                Block::Down(c) => c.forward(&h),
                Block::Up(_) => unreachable!("no upsampling in the encoder"),
            };
            skips.push(h.shallow_clone());
        }
        for m in &self.mid {
            h = m.forward(&h, &emb);
        }
        for (block, uses_skip) in &self.up {
            if *uses_skip {
                let s = skips.pop().expect("skip stack underflow") * self.skip_scale;
                h = Tensor::cat(&[h, s], 1);
            }
            h = match block {
                Block::Res(r) => r.forward(&h, &emb),
                Block::Up(c) => c.forward(&h.upsample_nearest2d([h.size()[2] * 2, h.size()[3] * 2], None, None)),
                Block::Down(_) => unreachable!("no downsampling in the decoder"),
            };
        }
        self.conv_out.forward(&self.norm_out.forward(&h).silu())
    }
}

/// Metadata written next to a denoiser checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserMeta {
    pub unet: UNetConfig,
    pub schedule: ScheduleMeta,
    pub labelspace: LabelSpaceMeta,
    pub p_drop: f64,
    pub trained_steps: usize,
    pub seed: u64,
}

pub const WEIGHTS_FILE: &str = "denoiser.safetensors";
pub const META_FILE: &str = "denoiser.json";

pub fn save_checkpoint(unet: &UNet, meta: &DenoiserMeta, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    unet.vs.save(dir.join(WEIGHTS_FILE))?;
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(UNet, DenoiserMeta)> {
    let meta_path = dir.join(META_FILE);
    if !meta_path.exists() {
        return Err(CcdmError::MissingDependency {
            what: format!("denoiser checkpoint {}", meta_path.display()),
            producer: "train".into(),
        });
    }
    let meta: DenoiserMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    let mut unet = build_unet(meta.unet.clone(), meta.seed)?;
    unet.vs.load(dir.join(WEIGHTS_FILE))?;
    Ok((unet, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embednet::{Conditioner, FixedConditioner};
    use crate::rng;
    use tch::Kind;

    fn small(shape: [i64; 3], mults: Vec<i64>) -> UNetConfig {
        UNetConfig {
            image_shape: shape,
            base_channels: 8,
            channel_mults: mults,
            res_blocks: 1,
            time_embed_dim: 32,
            steps: 100,
            ..Default::default()
        }
    }

    fn cond(shape: [i64; 3], ys: &[Option<f64>]) -> CondBatch {
        FixedConditioner::identity(shape).condition(ys).unwrap()
    }

    fn randomize_output(unet: &UNet) {
        tch::no_grad(|| {
            for (name, mut v) in unet.vs.variables() {
                if name.contains(ZERO_INIT) {
                    let mut r = rng::stream(77, &[v.numel() as u64]);
                    v.copy_(&(rng::normal_tensor(&mut r, &v.size(), Kind::Float) * 0.1));
                }
            }
        });
    }

    #[test]
    fn untrained_output_is_zero_and_shape_preserving() {
        let shape = [1, 32, 32];
        let unet = build_unet(small(shape, vec![1, 2, 4]), 0).unwrap();
        let mut r = rng::stream(1, &[]);
        let x = rng::normal_tensor(&mut r, &[3, 1, 32, 32], Kind::Float);
        let out = predict(&unet, &x, &[1, 50, 100], &cond(shape, &[Some(0.2), None, Some(1.0)]), false).unwrap();
        assert_eq!(out.size(), x.size());
        assert_eq!(out.abs().max().double_value(&[]), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let shape = [1, 16, 16];
        assert!(build_unet(small([1, 18, 18], vec![1, 2, 4]), 0).is_err());
        assert!(build_unet(UNetConfig { base_channels: 12, ..small(shape, vec![1]) }, 0).is_err());
        let unet = build_unet(small(shape, vec![1, 2]), 0).unwrap();
        let x = Tensor::zeros([1, 1, 16, 16], (Kind::Float, Device::Cpu));
        let c = cond(shape, &[Some(0.5)]);
        assert!(predict(&unet, &x, &[0], &c, false).is_err());
        assert!(predict(&unet, &x, &[101], &c, false).is_err());
        assert!(predict(&unet, &x, &[1, 2], &c, false).is_err());
        let wrong = Tensor::zeros([1, 1, 8, 8], (Kind::Float, Device::Cpu));
        assert!(predict(&unet, &wrong, &[1], &c, false).is_err());
    }

    #[test]
    fn parameter_count_and_init_are_deterministic() {
        let cfg = small([3, 16, 16], vec![1, 2]);
        let a = build_unet(cfg.clone(), 5).unwrap();
        let b = build_unet(cfg, 5).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        assert_eq!(nets::parameter_hash(&a.vs), nets::parameter_hash(&b.vs));
    }

    #[test]
    fn skip_connections_can_be_cut() {
        let shape = [1, 16, 16];
        let mut unet = build_unet(small(shape, vec![1, 2]), 3).unwrap();
        randomize_output(&unet);
        let x = Tensor::ones([2, 1, 16, 16], (Kind::Float, Device::Cpu));
        let c = cond(shape, &[Some(0.1), Some(0.9)]);
        let with = predict(&unet, &x, &[10, 10], &c, false).unwrap();
        unet.set_skip_scale(0.0);
        let without = predict(&unet, &x, &[10, 10], &c, false).unwrap();
        assert_eq!(without.size(), x.size());
        assert!(bool::try_from(without.isfinite().all()).unwrap());
        assert!((with - without).abs().max().double_value(&[]) > 0.0);
    }

    #[test]
    fn finite_and_deterministic_across_seeds() {
        let shape = [1, 8, 8];
        let unet = build_unet(small(shape, vec![1, 2]), 9).unwrap();
        randomize_output(&unet);
        for seed in 0..100u64 {
            let mut r = rng::stream(seed, &[]);
            let x = rng::normal_tensor(&mut r, &[2, 1, 8, 8], Kind::Float) * 3.0;
            let c = cond(shape, &[Some((seed % 10) as f64 / 10.0), None]);
            let ts = [1 + (seed as usize % 100), 100];
            let a = predict(&unet, &x, &ts, &c, false).unwrap();
            let b = predict(&unet, &x, &ts, &c, false).unwrap();
            assert_eq!(a.size(), x.size());
            assert!(bool::try_from(a.isfinite().all()).unwrap());
            assert!(a.equal(&b));
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let shape = [1, 8, 8];
        let mut cfg = small(shape, vec![1, 2]);
        cfg.pred_type = PredictionType::Eps;
        let mut unet = build_unet(cfg, 11).unwrap();
        randomize_output(&unet);
        // double precision isolates the check from float32 rounding
        unet.vs.double();
        let mut r = rng::stream(12, &[]);
        let x = rng::normal_tensor(&mut r, &[1, 1, 8, 8], Kind::Double);
        let c = cond(shape, &[Some(0.3)]);
        let c = CondBatch {
            h_short: c.h_short.to_kind(Kind::Double),
            null_mask: c.null_mask,
            h_diag: c.h_diag.to_kind(Kind::Double),
        };
        let f = |x: &Tensor| -> Tensor { unet.forward(x, &[40], &c, false).sum(Kind::Double) };
        let xg = x.set_requires_grad(true);
        let y = f(&xg);
        let g = Tensor::run_backward(&[y], &[&xg], false, false).pop().unwrap();
        let idx = [0i64, 0, 3, 5];
        let h = 1e-5;
        let bump = |d: f64| {
            let xp = x.copy();
            let _ = xp.get(0).get(0).get(3).get(5).fill_(x.double_value(&idx) + d);
            f(&xp).double_value(&[])
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        let an = g.double_value(&idx);
        assert!((fd - an).abs() <= 1e-3 * an.abs().max(1e-6), "fd {fd} vs grad {an}");
    }
}
