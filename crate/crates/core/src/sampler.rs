//! Conditional generation: guided DDIM over a uniform step subsequence and
//! the ancestral DDPM sampler, both started from `N(0, H_y)`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::data;
use crate::denoiser::{self, Denoise};
use crate::diffmath;
use crate::embednet::{CondBatch, Conditioner};
use crate::error::{CcdmError, Result};
use crate::labelspace::LabelSpace;
use crate::rng;
use crate::schedule::NoiseSchedule;

pub const MANIFEST_FILE: &str = data::LABELS_FILE;
/// Rows denoised together.
const CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddim,
    Ddpm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    /// Normalized labels.
    pub y_targets: Vec<f64>,
    pub n_per_label: usize,
    pub t_prime: usize,
    pub gamma: f64,
    pub seed: u64,
    pub sampler: SamplerKind,
}

impl SampleRequest {
    pub fn new(y_targets: Vec<f64>, n_per_label: usize) -> Self {
        Self { y_targets, n_per_label, t_prime: 250, gamma: 1.5, seed: 0, sampler: SamplerKind::Ddim }
    }

    /// Checks the request against the schedule and the drop rate the model
    /// was trained with.
    pub fn validate(&self, schedule: &NoiseSchedule, trained_p_drop: f64) -> Result<()> {
        if self.n_per_label == 0 {
            return Err(CcdmError::InvalidArgument("n_per_label must be positive".into()));
        }
        if let Some(y) = self.y_targets.iter().find(|y| !(0.0..=1.0).contains(*y)) {
            return Err(CcdmError::InvalidArgument(format!("target label {y} outside [0, 1]")));
        }
        if self.t_prime == 0 || self.t_prime > schedule.steps() {
            return Err(CcdmError::InvalidArgument(format!(
                "T' must lie in [1, {}], got {}",
                schedule.steps(),
                self.t_prime
            )));
        }
        if !self.gamma.is_finite() {
            return Err(CcdmError::InvalidArgument("gamma must be finite".into()));
        }
        if trained_p_drop == 0.0 && self.gamma != 1.0 {
            return Err(CcdmError::Config(
                "the model was trained without condition drop, so its unconditional branch is untrained; \
                 use gamma = 1 or retrain with p_drop > 0"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Generated images (clamped to `[-1, 1]`) with the label each row was
/// conditioned on.
#[derive(Debug)]
pub struct SampleOutput {
    pub images: Tensor,
    pub labels: Vec<f64>,
}

/// Identifies the label a row belongs to: the label's bit pattern plus how
/// many earlier targets of the request carry the same value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelKey {
    pub bits: u64,
    pub occurrence: u64,
}

pub fn label_keys(targets: &[f64]) -> Vec<LabelKey> {
    targets
        .iter()
        .enumerate()
        .map(|(i, y)| LabelKey {
            bits: y.to_bits(),
            occurrence: targets[..i].iter().filter(|p| p.to_bits() == y.to_bits()).count() as u64,
        })
        .collect()
}

/// The stream for one image: `(seed, label key, image index, purpose)`.
pub fn image_stream(seed: u64, key: LabelKey, image_idx: usize, purpose: u64) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, &[rng::role::SAMPLE, key.bits, key.occurrence, image_idx as u64, purpose])
}

const INIT_NOISE: u64 = 0;
const STEP_NOISE: u64 = 1;

/// `x^{T'} = sqrt(H) * eps` for each row.
pub fn initial_noise(seed: u64, rows: &[(LabelKey, usize)], cond: &CondBatch, shape: [i64; 3]) -> Tensor {
    let parts: Vec<Tensor> = rows
        .iter()
        .map(|&(l, i)| rng::normal_tensor(&mut image_stream(seed, l, i, INIT_NOISE), &shape, Kind::Float))
        .collect();
    cond.h_diag.sqrt() * Tensor::stack(&parts, 0)
}

/// Runs the configured sampler over every `(label, image)` pair of the request.
pub fn sample(
    f: &dyn Denoise,
    conditioner: &dyn Conditioner,
    schedule: &NoiseSchedule,
    req: &SampleRequest,
    trained_p_drop: f64,
) -> Result<SampleOutput> {
    let raw = sample_unclamped(f, conditioner, schedule, req, trained_p_drop)?;
    Ok(SampleOutput { images: raw.images.clamp(-1.0, 1.0), labels: raw.labels })
}

/// As [`sample`] but without the final clamp.
pub fn sample_unclamped(
    f: &dyn Denoise,
    conditioner: &dyn Conditioner,
    schedule: &NoiseSchedule,
    req: &SampleRequest,
    trained_p_drop: f64,
) -> Result<SampleOutput> {
    req.validate(schedule, trained_p_drop)?;
    if f.steps() != schedule.steps() {
        return Err(CcdmError::InvalidArgument("denoiser and schedule disagree on T".into()));
    }
    let keys = label_keys(&req.y_targets);
    let rows: Vec<(usize, usize)> = (0..req.y_targets.len())
        .flat_map(|l| (0..req.n_per_label).map(move |i| (l, i)))
        .collect();
    let ts = diffmath::ddim_timesteps(schedule.steps(), req.t_prime)?;
    let mut parts = Vec::new();
    for chunk in rows.chunks(CHUNK) {
        parts.push(tch::no_grad(|| run_chunk(f, conditioner, schedule, req, &keys, chunk, &ts))?);
    }
    let images = if parts.is_empty() {
        let [c, h, w] = f.image_shape();
        Tensor::zeros([0, c, h, w], (Kind::Float, tch::Device::Cpu))
    } else {
        Tensor::cat(&parts, 0)
    };
    let labels = rows.iter().map(|&(l, _)| req.y_targets[l]).collect();
    Ok(SampleOutput { images, labels })
}

fn run_chunk(
    f: &dyn Denoise,
    conditioner: &dyn Conditioner,
    schedule: &NoiseSchedule,
    req: &SampleRequest,
    keys: &[LabelKey],
    rows: &[(usize, usize)],
    ts: &[usize],
) -> Result<Tensor> {
    let shape = f.image_shape();
    let ys: Vec<Option<f64>> = rows.iter().map(|&(l, _)| Some(req.y_targets[l])).collect();
    let cond = conditioner.condition(&ys)?;
    let uncond = cond.to_null();
    let keyed: Vec<(LabelKey, usize)> = rows.iter().map(|&(l, i)| (keys[l], i)).collect();
    let mut x = initial_noise(req.seed, &keyed, &cond, shape);
    let mut step_rngs: Vec<_> = keyed.iter().map(|&(k, i)| image_stream(req.seed, k, i, STEP_NOISE)).collect();
    for w in ts.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let tv = vec![t; rows.len()];
        let x0_c = denoiser::predict_x0(f, &x, &tv, &cond, schedule, false)?;
        let x0 = if req.gamma == 1.0 {
            x0_c
        } else {
            let x0_u = denoiser::predict_x0(f, &x, &tv, &uncond, schedule, false)?;
            diffmath::cfg_combine(&x0_c, &x0_u, req.gamma)?
        };
        x = match req.sampler {
            SamplerKind::Ddim => diffmath::ddim_step(&x, &x0, t, t_prev, schedule)?,
            SamplerKind::Ddpm => {
                let noise: Vec<Tensor> =
                    step_rngs.iter_mut().map(|r| rng::normal_tensor(r, &shape, Kind::Float)).collect();
                diffmath::ddpm_step(&x, &x0, t, t_prev, &cond.h_diag, &Tensor::stack(&noise, 0), schedule)?
            }
        };
    }
    Ok(x)
}

/// `x -> round((x + 1) * 127.5)` in `0..=255`.
pub fn to_pixels(x: &Tensor) -> Vec<u8> {
    let v = ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round().to_kind(Kind::Uint8).flatten(0, -1);
    Vec::<u8>::try_from(&v).unwrap_or_default()
}

/// Writes `{raw_label}_{index}.png` files and a `filename,label` manifest
/// (raw label units), so the directory loads as a dataset.
pub fn write_samples(dir: &Path, out: &SampleOutput, ls: &LabelSpace) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let s = out.images.size();
    let shape = [s[1] as usize, s[2] as usize, s[3] as usize];
    let mut w = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
    w.write_record(["filename", "label"])?;
    for (i, &y) in out.labels.iter().enumerate() {
        let raw = ls.denormalize(y);
        let name = format!("{raw:.4}_{i:06}.png");
        data::write_png(&dir.join(&name), shape, &to_pixels(&out.images.get(i as i64)))?;
        w.write_record([name, raw.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
