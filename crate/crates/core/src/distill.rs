//! One-step distillation of a trained denoiser into a noise-to-image
//! generator: distribution matching against the frozen model plus a hinge
//! GAN loss from a separate spectral-norm projection discriminator, with
//! paired differentiable augmentation, vicinal weights and label-dependent
//! forward noising.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{nn, nn::Module, nn::ModuleT, nn::OptimizerConfig, Device, Kind, Tensor};

use crate::denoiser::{self, build_unet, UNet};
use crate::diffmath;
use crate::embednet::{CondBatch, Conditioner, SHORT_DIM};
use crate::error::{invalid, CcdmError, Result};
use crate::labelspace::{LabelSpace, LabelSpaceMeta};
use crate::nets::{self, SnConv2d, SnLinear};
use crate::rng;
use crate::sampler::{self, SampleOutput};
use crate::schedule::NoiseSchedule;
use crate::train::{self, TrainConfig, TrainData, VicinityMode};

pub const Z_DIM: i64 = 128;
pub const WEIGHTS_FILE: &str = "generator.safetensors";
pub const META_FILE: &str = "generator.json";

/// Differentiable augmentation transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    Color,
    Translation,
    Cutout,
}

impl std::str::FromStr for AugmentOp {
    type Err = CcdmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color" => Ok(Self::Color),
            "translation" => Ok(Self::Translation),
            "cutout" => Ok(Self::Cutout),
            other => Err(CcdmError::Config(format!(
                "unknown augmentation `{other}` (expected color, translation or cutout)"
            ))),
        }
    }
}

/// Parses a comma-separated policy such as `"color,translation,cutout"`.
pub fn parse_policy(s: &str) -> Result<Vec<AugmentOp>> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::parse).collect()
}

/// Random parameters of one augmentation call, drawn once and applied to
/// both the real and the fake batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    ops: Vec<AugmentOp>,
    brightness: Vec<f64>,
    saturation: Vec<f64>,
    contrast: Vec<f64>,
    shift: Vec<(i64, i64)>,
    /// Cutout rectangle per image: `(top, left, height, width)`, clipped.
    cutout: Vec<(i64, i64, i64, i64)>,
}

const TRANSLATION_RATIO: f64 = 0.125;
const CUTOUT_RATIO: f64 = 0.5;

impl AugmentParams {
    pub fn draw(ops: &[AugmentOp], batch: usize, shape: [i64; 3], rng: &mut ChaCha8Rng) -> Self {
        let [_, h, w] = shape;
        let mut p = AugmentParams {
            ops: ops.to_vec(),
            brightness: vec![],
            saturation: vec![],
            contrast: vec![],
            shift: vec![],
            cutout: vec![],
        };
        for op in ops {
            match op {
                AugmentOp::Color => {
                    p.brightness = (0..batch).map(|_| rng.gen::<f64>() - 0.5).collect();
                    p.saturation = (0..batch).map(|_| rng.gen::<f64>() * 2.0).collect();
                    p.contrast = (0..batch).map(|_| rng.gen::<f64>() + 0.5).collect();
                }
                AugmentOp::Translation => {
                    let (sh, sw) = (
                        (h as f64 * TRANSLATION_RATIO + 0.5) as i64,
                        (w as f64 * TRANSLATION_RATIO + 0.5) as i64,
                    );
                    p.shift = (0..batch).map(|_| (rng.gen_range(-sh..=sh), rng.gen_range(-sw..=sw))).collect();
                }
                AugmentOp::Cutout => {
                    let (ch, cw) = ((h as f64 * CUTOUT_RATIO + 0.5) as i64, (w as f64 * CUTOUT_RATIO + 0.5) as i64);
                    p.cutout = (0..batch)
                        .map(|_| {
                            let cy = rng.gen_range(0..h + (1 - ch % 2));
                            let cx = rng.gen_range(0..w + (1 - cw % 2));
                            let (top, left) = ((cy - ch / 2).max(0), (cx - cw / 2).max(0));
                            let (bottom, right) = ((cy - ch / 2 + ch).min(h), (cx - cw / 2 + cw).min(w));
                            (top, left, bottom - top, right - left)
                        })
                        .collect();
                }
            }
        }
        p
    }

    pub fn identity() -> Self {
        Self::draw(&[], 0, [1, 1, 1], &mut rng::stream(0, &[]))
    }
}

fn per_row(values: &[f64], like: &Tensor) -> Tensor {
    Tensor::from_slice(values).to_kind(like.kind()).reshape([-1, 1, 1, 1])
}

/// Applies the drawn transforms; an empty policy returns the input unchanged.
pub fn diffaugment(x: &Tensor, p: &AugmentParams) -> Result<Tensor> {
    let b = x.size()[0] as usize;
    let mut x = x.shallow_clone();
    for op in &p.ops {
        match op {
            AugmentOp::Color => {
                if p.brightness.len() != b {
                    return invalid("augmentation parameters drawn for another batch size");
                }
                x = &x + per_row(&p.brightness, &x);
                let mean_c = x.mean_dim([1i64].as_slice(), true, x.kind());
                x = (&x - &mean_c) * per_row(&p.saturation, &x) + &mean_c;
                let mean = x.mean_dim([1i64, 2, 3].as_slice(), true, x.kind());
                x = (&x - &mean) * per_row(&p.contrast, &x) + &mean;
            }
            AugmentOp::Translation => {
                if p.shift.len() != b {
                    return invalid("augmentation parameters drawn for another batch size");
                }
                let s = x.size();
                let (h, w) = (s[2], s[3]);
                let pad_h = p.shift.iter().map(|t| t.0.abs()).max().unwrap_or(0);
                let pad_w = p.shift.iter().map(|t| t.1.abs()).max().unwrap_or(0);
                let padded = x.constant_pad_nd([pad_w, pad_w, pad_h, pad_h]);
                let rows: Vec<Tensor> = p
                    .shift
                    .iter()
                    .enumerate()
                    .map(|(i, &(dy, dx))| {
                        padded.get(i as i64).narrow(1, pad_h - dy, h).narrow(2, pad_w - dx, w)
                    })
                    .collect();
                x = Tensor::stack(&rows, 0);
            }
            AugmentOp::Cutout => {
                if p.cutout.len() != b {
                    return invalid("augmentation parameters drawn for another batch size");
                }
                let s = x.size();
                let mut mask = vec![1f32; b * (s[2] * s[3]) as usize];
                let plane = (s[2] * s[3]) as usize;
                for (i, &(top, left, hh, ww)) in p.cutout.iter().enumerate() {
                    for y in top..top + hh {
                        for xx in left..left + ww {
                            mask[i * plane + (y * s[3] + xx) as usize] = 0.0;
                        }
                    }
                }
                let m = Tensor::from_slice(&mask).reshape([b as i64, 1, s[2], s[3]]).to_kind(x.kind());
                x = x * m;
            }
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanLoss {
    Hinge,
    /// Non-saturating logistic loss (ablation).
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub w_d: f64,
    pub w_g: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_fake: f64,
    /// Discriminator updates per step.
    pub d_steps: usize,
    /// Fake-score updates per step, each on fresh generator samples.
    pub fake_steps: usize,
    pub policy: Vec<AugmentOp>,
    pub gan_loss: GanLoss,
    /// Hard vicinal weighting; with `m_kappa = 0` vicinity is disabled.
    pub m_kappa: u32,
    /// Guidance scale applied to the frozen model's prediction in the DM term.
    pub dm_guidance: f64,
    /// Fraction of `[1, T]` excluded at either end when drawing DM time steps.
    pub dm_t_margin: f64,
    pub width: i64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            w_d: 10.0,
            w_g: 1.0,
            lr_g: 1e-4,
            lr_d: 1e-4,
            lr_fake: 1e-4,
            d_steps: 2,
            fake_steps: 5,
            policy: vec![AugmentOp::Color, AugmentOp::Translation, AugmentOp::Cutout],
            gan_loss: GanLoss::Hinge,
            m_kappa: 0,
            dm_guidance: 1.0,
            dm_t_margin: 0.02,
            width: 32,
            seed: 0,
        }
    }
}

#[derive(Debug)]
struct GBlock {
    norm1: nn::BatchNorm,
    mod1: nn::Linear,
    conv1: nn::Conv2D,
    norm2: nn::BatchNorm,
    mod2: nn::Linear,
    conv2: nn::Conv2D,
    skip: nn::Conv2D,
}

fn plain_bn(p: nn::Path, c: i64) -> nn::BatchNorm {
    nn::batch_norm2d(p, c, nn::BatchNormConfig { affine: false, ..Default::default() })
}

fn modulate(h: &Tensor, lin: &nn::Linear, label: &Tensor) -> Tensor {
    let ss = lin.forward(label).unsqueeze(-1).unsqueeze(-1);
    let parts = ss.chunk(2, 1);
    h * (&parts[0] + 1.0) + &parts[1]
}

impl GBlock {
    fn new(p: &nn::Path, c_in: i64, c_out: i64) -> Self {
        let c3 = nn::ConvConfig { padding: 1, ..Default::default() };
        Self {
            norm1: plain_bn(p / "bn1", c_in),
            mod1: nn::linear(p / "mod1", SHORT_DIM, 2 * c_in, Default::default()),
            conv1: nn::conv2d(p / "conv1", c_in, c_out, 3, c3),
            norm2: plain_bn(p / "bn2", c_out),
            mod2: nn::linear(p / "mod2", SHORT_DIM, 2 * c_out, Default::default()),
            conv2: nn::conv2d(p / "conv2", c_out, c_out, 3, c3),
            skip: nn::conv2d(p / "skip", c_in, c_out, 1, Default::default()),
        }
    }

    fn forward(&self, x: &Tensor, label: &Tensor, train: bool) -> Tensor {
        let up = |t: &Tensor| t.upsample_nearest2d([t.size()[2] * 2, t.size()[3] * 2], None, None);
        let h = modulate(&self.norm1.forward_t(x, train), &self.mod1, label).relu();
        let h = self.conv1.forward(&up(&h));
        let h = modulate(&self.norm2.forward_t(&h, train), &self.mod2, label).relu();
        self.conv2.forward(&h) + self.skip.forward(&up(x))
    }
}

/// Residual up-sampling generator `G(z, h_short)`, label-modulated batch norm.
#[derive(Debug)]
pub struct Generator {
    pub vs: nn::VarStore,
    pub image_shape: [i64; 3],
    pub width: i64,
    fc: nn::Linear,
    blocks: Vec<GBlock>,
    norm_out: nn::BatchNorm,
    conv_out: nn::Conv2D,
    base_ch: i64,
}

fn up_levels(side: i64) -> Result<usize> {
    let mut n = 0;
    let mut s = side;
    while s > 4 {
        if s % 2 != 0 {
            break;
        }
        s /= 2;
        n += 1;
    }
    if s != 4 || n == 0 {
        return Err(CcdmError::Shape(format!("generator needs image side 4 * 2^k (k >= 1), got {side}")));
    }
    Ok(n)
}

impl Generator {
    pub fn new(image_shape: [i64; 3], width: i64, seed: u64) -> Result<Self> {
        let [c, h, w] = image_shape;
        if h != w {
            return Err(CcdmError::Shape("generator needs square images".into()));
        }
        let n = up_levels(h)?;
        let vs = nn::VarStore::new(Device::Cpu);
        let p = vs.root();
        let base_ch = width << n.min(3);
        let fc = nn::linear(&p / "fc", Z_DIM + SHORT_DIM, 16 * base_ch, Default::default());
        let mut blocks = Vec::new();
        let mut ch = base_ch;
        for i in 0..n {
            let out = (ch / 2).max(width);
            blocks.push(GBlock::new(&(&p / format!("block{i}")), ch, out));
            ch = out;
        }
        let norm_out = nn::batch_norm2d(&p / "bn_out", ch, Default::default());
        let conv_out = nn::conv2d(&p / "conv_out", ch, c, 3, nn::ConvConfig { padding: 1, ..Default::default() });
        nets::seeded_init(&vs, seed);
        Ok(Self { vs, image_shape, width, fc, blocks, norm_out, conv_out, base_ch })
    }

    /// `z: (B, 128)`, `h_short: (B, 128)` to images in `(-1, 1)`.
    pub fn forward_t(&self, z: &Tensor, h_short: &Tensor, train: bool) -> Tensor {
        let b = z.size()[0];
        let label = h_short.to_kind(Kind::Float);
        let mut h = self.fc.forward(&Tensor::cat(&[z.to_kind(Kind::Float), label.shallow_clone()], 1));
        h = h.reshape([b, self.base_ch, 4, 4]);
        for block in &self.blocks {
            h = block.forward(&h, &label, train);
        }
        self.conv_out.forward(&self.norm_out.forward_t(&h, train).relu()).tanh()
    }
}

#[derive(Debug)]
struct DBlock {
    conv1: SnConv2d,
    conv2: SnConv2d,
    skip: SnConv2d,
    pre_act: bool,
    down: bool,
}

impl DBlock {
    fn new(p: &nn::Path, c_in: i64, c_out: i64, pre_act: bool, down: bool) -> Self {
        Self {
            conv1: SnConv2d::new(&(p / "conv1"), c_in, c_out, 3, 1, 1),
            conv2: SnConv2d::new(&(p / "conv2"), c_out, c_out, 3, 1, 1),
            skip: SnConv2d::new(&(p / "skip"), c_in, c_out, 1, 1, 0),
            pre_act,
            down,
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let pool = |t: Tensor| if self.down { t.avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None) } else { t };
        let h = if self.pre_act { x.relu() } else { x.shallow_clone() };
        let h = self.conv2.forward_t(&self.conv1.forward_t(&h, train).relu(), train);
        pool(h) + pool(self.skip.forward_t(x, train))
    }
}

/// Spectral-norm residual discriminator with a label projection head:
/// `D(x, y) = w . phi(x) + <e(h_short), phi(x)>`.
#[derive(Debug)]
pub struct Discriminator {
    pub vs: nn::VarStore,
    blocks: Vec<DBlock>,
    out: SnLinear,
    embed: SnLinear,
}

impl Discriminator {
    pub fn new(image_shape: [i64; 3], width: i64, seed: u64) -> Result<Self> {
        let [c, h, _] = image_shape;
        let n = up_levels(h)?;
        let vs = nn::VarStore::new(Device::Cpu);
        let p = vs.root();
        let mut blocks = Vec::new();
        let mut ch_in = c;
        for i in 0..n {
            let ch_out = width << i.min(3);
            blocks.push(DBlock::new(&(&p / format!("block{i}")), ch_in, ch_out, i > 0, true));
            ch_in = ch_out;
        }
        blocks.push(DBlock::new(&(&p / format!("block{n}")), ch_in, ch_in, true, false));
        let out = SnLinear::new(&(&p / "out"), ch_in, 1);
        let embed = SnLinear::new(&(&p / "embed"), SHORT_DIM, ch_in);
        nets::seeded_init(&vs, seed);
        Ok(Self { vs, blocks, out, embed })
    }

    pub fn forward_t(&self, x: &Tensor, h_short: &Tensor, train: bool) -> Tensor {
        let mut h = x.to_kind(Kind::Float);
        for b in &self.blocks {
            h = b.forward(&h, train);
        }
        let phi = h.relu().sum_dim_intlist([2i64, 3].as_slice(), false, Kind::Float);
        let proj = (self.embed.forward_t(&h_short.to_kind(Kind::Float), train) * &phi).sum_dim_intlist(
            [1i64].as_slice(),
            false,
            Kind::Float,
        );
        self.out.forward_t(&phi, train).squeeze_dim(1) + proj
    }
}

/// Row-weighted discriminator loss on real and fake logits.
pub fn discriminator_loss(real: &Tensor, fake: &Tensor, w: &Tensor, kind: GanLoss) -> Tensor {
    let (lr, lf) = match kind {
        GanLoss::Hinge => ((-real + 1.0).relu(), (fake + 1.0).relu()),
        GanLoss::Vanilla => ((-real).softplus(), fake.softplus()),
    };
    (lr * w).mean(Kind::Float) + (lf * w).mean(Kind::Float)
}

/// Row-weighted generator adversarial loss on fake logits.
pub fn generator_adv_loss(fake: &Tensor, w: &Tensor, kind: GanLoss) -> Tensor {
    let l = match kind {
        GanLoss::Hinge => -fake,
        GanLoss::Vanilla => (-fake).softplus(),
    };
    (l * w).mean(Kind::Float)
}

/// Generator, trainable fake score, discriminator and a reference to the
/// frozen model.
pub struct DistillState<'a> {
    pub generator: Generator,
    pub fake_score: UNet,
    pub discriminator: Discriminator,
    pub real_score: &'a UNet,
    pub config: DistillConfig,
}

impl<'a> DistillState<'a> {
    /// Seed of the generator built for a distillation seed.
    pub fn generator_seed(seed: u64) -> u64 {
        seed ^ 0x6e
    }

    pub fn new(real_score: &'a UNet, config: DistillConfig) -> Result<Self> {
        let shape = real_score.config.image_shape;
        let mut fake_score = build_unet(real_score.config.clone(), config.seed)?;
        nets::copy_vars(&mut fake_score.vs, &real_score.vs)?;
        Ok(Self {
            generator: Generator::new(shape, config.width, Self::generator_seed(config.seed))?,
            fake_score,
            discriminator: Discriminator::new(shape, config.width, config.seed ^ 0xd1)?,
            real_score,
            config,
        })
    }
}

/// Per-row gradient direction of the distribution matching objective at
/// generator samples `x`:
/// `H^{-1} (x0_fake(x_t) - x0_real(x_t)) / mean|x - x0_real(x_t)|`.
pub fn dm_direction(
    state: &DistillState,
    x: &Tensor,
    cond: &CondBatch,
    ts: &[usize],
    schedule: &NoiseSchedule,
    noise_rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    tch::no_grad(|| {
        let x = x.detach();
        let eps = rng::normal_tensor(noise_rng, &x.size(), x.kind());
        let xt = diffmath::forward_sample(&x, ts, &cond.h_diag, &eps, schedule)?;
        let real_c = denoiser::predict_x0(state.real_score, &xt, ts, cond, schedule, false)?;
        let real = if state.config.dm_guidance == 1.0 {
            real_c
        } else {
            let real_u = denoiser::predict_x0(state.real_score, &xt, ts, &cond.to_null(), schedule, false)?;
            diffmath::cfg_combine(&real_c, &real_u, state.config.dm_guidance)?
        };
        let fake = denoiser::predict_x0(&state.fake_score, &xt, ts, cond, schedule, false)?;
        let norm = (&x - &real).abs().mean_dim([1i64, 2, 3].as_slice(), true, x.kind()).clamp_min(1e-6);
        Ok((fake - real) / &cond.h_diag / norm)
    })
}

fn dm_timesteps(rng: &mut ChaCha8Rng, n: usize, steps: usize, margin: f64) -> Vec<usize> {
    let lo = ((steps as f64 * margin).ceil() as usize).max(1);
    let hi = ((steps as f64 * (1.0 - margin)).floor() as usize).clamp(lo, steps);
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

fn check_finite(t: &Tensor, what: &str) -> Result<f64> {
    let v = t.double_value(&[]);
    if !v.is_finite() {
        return Err(CcdmError::Numerical(format!("{what} is not finite")));
    }
    Ok(v)
}

/// Draws `z` for each row from its own stream.
pub fn latent(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    rng::normal_tensor(rng, &[n as i64, Z_DIM], Kind::Float)
}

/// Generator loss on a batch: weighted distribution matching plus
/// `w_G` times the weighted adversarial term. Returns `(total, dm, adv)`.
pub fn generator_loss(
    state: &DistillState,
    z: &Tensor,
    cond: &CondBatch,
    weights: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor, Tensor)> {
    let x = state.generator.forward_t(z, &cond.h_short, true);
    let ts = dm_timesteps(rng, z.size()[0] as usize, schedule.steps(), state.config.dm_t_margin);
    let grad = dm_direction(state, &x, cond, &ts, schedule, rng)?;
    let target = (&x - &grad).detach();
    let per_row = (&x - target).square().mean_dim([1i64, 2, 3].as_slice(), false, Kind::Float) * 0.5;
    let dm = (per_row * weights).mean(Kind::Float);
    let aug = AugmentParams::draw(&state.config.policy, z.size()[0] as usize, state.generator.image_shape, rng);
    let logits = state.discriminator.forward_t(&diffaugment(&x, &aug)?, &cond.h_short, false);
    let adv = generator_adv_loss(&logits, weights, state.config.gan_loss);
    Ok((&dm + &adv * state.config.w_g, dm, adv))
}

/// Fake-score denoising loss on (detached) generator samples.
pub fn fake_score_loss(
    state: &DistillState,
    fake: &Tensor,
    cond: &CondBatch,
    weights: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let x0 = fake.detach();
    let n = x0.size()[0] as usize;
    let ts: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=schedule.steps())).collect();
    let eps = rng::normal_tensor(rng, &x0.size(), x0.kind());
    let xt = diffmath::forward_sample(&x0, &ts, &cond.h_diag, &eps, schedule)?;
    let x0_hat = denoiser::predict_x0(&state.fake_score, &xt, &ts, cond, schedule, true)?;
    Ok(train::weighted_mahalanobis(&x0_hat, &x0, &cond.h_diag, weights)?.loss)
}

/// Discriminator loss scaled by `w_D`, with the same augmentation applied
/// to the real and the fake batch.
pub fn critic_loss(
    state: &DistillState,
    real: &Tensor,
    fake: &Tensor,
    cond: &CondBatch,
    weights: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let aug = AugmentParams::draw(&state.config.policy, real.size()[0] as usize, state.generator.image_shape, rng);
    let d_real = state.discriminator.forward_t(&diffaugment(real, &aug)?, &cond.h_short, true);
    let d_fake = state.discriminator.forward_t(&diffaugment(&fake.detach(), &aug)?, &cond.h_short, true);
    Ok(discriminator_loss(&d_real, &d_fake, weights, state.config.gan_loss) * state.config.w_d)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DistillRecord {
    pub step: usize,
    pub g_loss: f64,
    pub dm_loss: f64,
    pub fake_loss: f64,
    pub d_loss: f64,
}

/// Alternates generator and critic updates for `config.steps` steps. The
/// frozen model is never updated. `monitor` is called every `monitor_every`
/// steps (0 disables it).
#[allow(clippy::too_many_arguments)]
pub fn distill_loop(
    state: &mut DistillState,
    labelspace: &LabelSpace,
    images: &Tensor,
    conditioner: &dyn Conditioner,
    schedule: &NoiseSchedule,
    monitor_every: usize,
    monitor: &mut dyn FnMut(usize, &Generator) -> Result<()>,
) -> Result<Vec<DistillRecord>> {
    let cfg = state.config.clone();
    if state.real_score.config.steps != schedule.steps() {
        return invalid("denoiser and schedule disagree on T");
    }
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    let mut ls = labelspace.clone();
    let vp = crate::labelspace::vicinity_params(&ls.distinct, cfg.m_kappa)?;
    ls.kappa = vp.kappa;
    ls.nu = vp.nu;
    let vicinal = vp.kappa > 0.0;
    if !vicinal {
        // vicinity disabled: exact labels, unit weights
        ls.sigma_delta = 0.0;
    }
    let data = TrainData::new(&ls, images)?;
    let batch_cfg = TrainConfig {
        batch_size: cfg.batch_size,
        p_drop: 0.0,
        vicinity_mode: if vicinal { VicinityMode::Hard } else { VicinityMode::None },
        ..Default::default()
    };
    let mut opt_g = nn::Adam { beta1: 0.0, beta2: 0.999, wd: 0.0, eps: 1e-8, amsgrad: false }
        .build(&state.generator.vs, cfg.lr_g)?;
    let mut opt_d = nn::Adam { beta1: 0.0, beta2: 0.999, wd: 0.0, eps: 1e-8, amsgrad: false }
        .build(&state.discriminator.vs, cfg.lr_d)?;
    let mut opt_f = nn::Adam::default().build(&state.fake_score.vs, cfg.lr_fake)?;
    let mut records = Vec::with_capacity(cfg.steps);
    let mut bad = 0usize;
    for step in 1..=cfg.steps {
        let mut r = rng::stream(cfg.seed, &[rng::role::DISTILL, step as u64]);
        let mut rec = DistillRecord { step, ..Default::default() };
        let result: Result<()> = (|| {
            // generator phase
            let batch = train::assemble_batch(&data, conditioner, &batch_cfg, schedule.steps(), &mut r)?;
            let w = batch.weights_tensor().to_kind(Kind::Float);
            let z = latent(&mut r, batch.len());
            let (g_loss, dm, _) = generator_loss(state, &z, &batch.cond, &w, schedule, &mut r)?;
            rec.g_loss = check_finite(&g_loss, "generator loss")?;
            rec.dm_loss = dm.double_value(&[]);
            opt_g.zero_grad();
            opt_d.zero_grad();
            opt_f.zero_grad();
            g_loss.backward();
            opt_g.step();

            // fake score phase
            for k in 0..cfg.fake_steps.max(1) {
                let extra;
                let (cond, w, z) = if k == 0 {
                    (&batch.cond, w.shallow_clone(), z.shallow_clone())
                } else {
                    extra = train::assemble_batch(&data, conditioner, &batch_cfg, schedule.steps(), &mut r)?;
                    (&extra.cond, extra.weights_tensor().to_kind(Kind::Float), latent(&mut r, extra.len()))
                };
                let fake = tch::no_grad(|| state.generator.forward_t(&z, &cond.h_short, true));
                let f_loss = fake_score_loss(state, &fake, cond, &w, schedule, &mut r)?;
                rec.fake_loss = check_finite(&f_loss, "fake score loss")?;
                opt_f.zero_grad();
                f_loss.backward();
                opt_f.step();
            }

            // discriminator phase
            for _ in 0..cfg.d_steps.max(1) {
                let batch = train::assemble_batch(&data, conditioner, &batch_cfg, schedule.steps(), &mut r)?;
                let w = batch.weights_tensor().to_kind(Kind::Float);
                let z = latent(&mut r, batch.len());
                let fake = tch::no_grad(|| state.generator.forward_t(&z, &batch.cond.h_short, true));
                let d_loss = critic_loss(state, &batch.images, &fake, &batch.cond, &w, &mut r)?;
                rec.d_loss = check_finite(&d_loss, "discriminator loss")?;
                opt_d.zero_grad();
                d_loss.backward();
                opt_d.step();
            }
            Ok(())
        })();
        match result {
            Ok(()) => bad = 0,
            Err(CcdmError::Numerical(msg)) => {
                bad += 1;
                log::warn!("distill step {step}: {msg}");
                if bad >= 10 {
                    return Err(CcdmError::Numerical(format!("distillation diverged at step {step}: {msg}")));
                }
            }
            Err(e) => return Err(e),
        }
        if step % 100 == 0 || step == cfg.steps {
            log::info!("distill step {step}/{}: G {:.4} D {:.4} fake {:.4}", cfg.steps, rec.g_loss, rec.d_loss, rec.fake_loss);
        }
        records.push(rec);
        if monitor_every > 0 && step % monitor_every == 0 {
            monitor(step, &state.generator)?;
        }
    }
    Ok(records)
}

/// One-step sampling `G(z, h_short(y))`; `z` streams are keyed like the
/// multi-step sampler's initial noise.
pub fn sample_one_step(
    generator: &Generator,
    conditioner: &dyn Conditioner,
    y_targets: &[f64],
    n_per_label: usize,
    seed: u64,
) -> Result<SampleOutput> {
    if let Some(y) = y_targets.iter().find(|y| !(0.0..=1.0).contains(*y)) {
        return Err(CcdmError::InvalidArgument(format!("target label {y} outside [0, 1]")));
    }
    let keys = sampler::label_keys(y_targets);
    let mut rows = Vec::new();
    for (l, &y) in y_targets.iter().enumerate() {
        for i in 0..n_per_label {
            rows.push((l, i, y));
        }
    }
    let mut parts = Vec::new();
    for chunk in rows.chunks(1024) {
        let ys: Vec<Option<f64>> = chunk.iter().map(|r| Some(r.2)).collect();
        let cond = conditioner.condition(&ys)?;
        let z: Vec<Tensor> = chunk
            .iter()
            .map(|&(l, i, _)| rng::normal_tensor(&mut sampler::image_stream(seed, keys[l], i, 2), &[Z_DIM], Kind::Float))
            .collect();
        parts.push(tch::no_grad(|| generator.forward_t(&Tensor::stack(&z, 0), &cond.h_short, false)));
    }
    let [c, h, w] = generator.image_shape;
    let images = if parts.is_empty() {
        Tensor::zeros([0, c, h, w], (Kind::Float, Device::Cpu))
    } else {
        Tensor::cat(&parts, 0)
    };
    Ok(SampleOutput { images, labels: rows.iter().map(|r| r.2).collect() })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub z_dim: i64,
    pub image_shape: [i64; 3],
    pub width: i64,
    pub w_d: f64,
    pub w_g: f64,
    pub policy: Vec<AugmentOp>,
    pub m_kappa: u32,
    pub gan_loss: GanLoss,
    pub steps: usize,
    pub seed: u64,
    pub labelspace: LabelSpaceMeta,
}

pub fn save_generator(g: &Generator, meta: &GeneratorMeta, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    g.vs.save(dir.join(WEIGHTS_FILE))?;
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_generator(dir: &Path) -> Result<(Generator, GeneratorMeta)> {
    let meta_path = dir.join(META_FILE);
    if !meta_path.exists() {
        return Err(CcdmError::MissingDependency {
            what: format!("generator checkpoint {}", meta_path.display()),
            producer: "distill".into(),
        });
    }
    let meta: GeneratorMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    let mut g = Generator::new(meta.image_shape, meta.width, meta.seed)?;
    g.vs.load(dir.join(WEIGHTS_FILE))?;
    Ok((g, meta))
}
