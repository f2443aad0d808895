//! Vicinal minibatch assembly with condition drop, the hard vicinal image
//! denoising loss and the training loop.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{nn, nn::OptimizerConfig, Kind, Tensor};

use crate::denoiser::{self, Denoise, DenoiserMeta, UNet};
use crate::diffmath::{self, PredictionType};
use crate::embednet::{CondBatch, Conditioner};
use crate::error::{invalid, CcdmError, Result};
use crate::labelspace::{hard_weight, soft_weight, LabelSpace};
use crate::rng;
use crate::schedule::NoiseSchedule;

/// Soft-vicinity candidates are images whose weight is at least this value.
pub const SOFT_WEIGHT_FLOOR: f64 = 1e-3;
pub const TRACE_FILE: &str = "trace.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VicinityMode {
    Hard,
    Soft,
    /// Exact-label training: no label perturbation, only images carrying the
    /// drawn label, weight 1.
    None,
}

impl std::str::FromStr for VicinityMode {
    type Err = CcdmError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            "none" => Ok(Self::None),
            _ => Err(CcdmError::Config(format!("unknown vicinity mode `{s}` (hard, soft, none)"))),
        }
    }
}

/// Space in which the denoising residual is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSpace {
    /// Predictions are converted to x0 before the residual is taken.
    X0,
    /// The residual is taken in the model's own prediction space.
    Native,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub p_drop: f64,
    pub vicinity_mode: VicinityMode,
    pub pred_type: PredictionType,
    pub loss_space: LossSpace,
    pub lr: f64,
    pub seed: u64,
    /// Label perturbations tried before falling back to the nearest image.
    pub retry_limit: usize,
    /// Write a checkpoint every this many steps (0 disables intermediate ones).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            p_drop: 0.1,
            vicinity_mode: VicinityMode::Hard,
            pred_type: PredictionType::X0,
            loss_space: LossSpace::X0,
            lr: 1e-4,
            seed: 0,
            retry_limit: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, ls: &LabelSpace) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(CcdmError::Config(format!("p_drop must lie in [0, 1], got {}", self.p_drop)));
        }
        if self.batch_size == 0 {
            return Err(CcdmError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(CcdmError::Config("lr must be positive".into()));
        }
        if self.vicinity_mode == VicinityMode::Soft && ls.nu.is_none() {
            return Err(CcdmError::Config("soft vicinity needs kappa > 0; set m_kappa >= 1".into()));
        }
        Ok(())
    }
}

/// One assembled minibatch.
#[derive(Debug)]
pub struct VicinalBatch {
    /// Dataset rows of the selected images.
    pub indices: Vec<usize>,
    pub images: Tensor,
    /// `y_i + delta` (clamped to `[0, 1]`) or `None` for dropped rows.
    pub target_labels: Vec<Option<f64>>,
    pub weights: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub cond: CondBatch,
    /// First perturbation drawn for each row, before clamping.
    pub deltas: Vec<f64>,
    /// Rows that fell back to the nearest-label image.
    pub fallback: Vec<bool>,
}

impl VicinalBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn drop_fraction(&self) -> f64 {
        let n = self.target_labels.iter().filter(|y| y.is_none()).count();
        n as f64 / self.len().max(1) as f64
    }

    pub fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|&&f| f).count()
    }

    pub fn weights_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.weights).to_kind(self.images.kind())
    }
}

/// Training images with their normalized labels, sorted for window queries.
#[derive(Debug)]
pub struct TrainData<'a> {
    pub labelspace: &'a LabelSpace,
    pub images: &'a Tensor,
    order: Vec<usize>,
    sorted: Vec<f64>,
}

impl<'a> TrainData<'a> {
    pub fn new(labelspace: &'a LabelSpace, images: &'a Tensor) -> Result<Self> {
        let n = labelspace.labels.len();
        if n == 0 {
            return Err(CcdmError::Dataset("empty dataset".into()));
        }
        if images.size().first().copied() != Some(n as i64) {
            return Err(CcdmError::Dataset(format!("{:?} images for {n} labels", images.size())));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| labelspace.labels[a].total_cmp(&labelspace.labels[b]));
        let sorted = order.iter().map(|&i| labelspace.labels[i]).collect();
        Ok(Self { labelspace, images, order, sorted })
    }

    /// Positions (in sorted order) of labels `y` with `|y - target| <= radius`.
    fn window(&self, target: f64, radius: f64) -> std::ops::Range<usize> {
        let lo = self.sorted.partition_point(|&y| y < target && hard_weight(target, y, radius) == 0.0);
        let hi = self.sorted.partition_point(|&y| y <= target || hard_weight(target, y, radius) > 0.0);
        lo..hi.max(lo)
    }

    fn nearest(&self, target: f64) -> usize {
        let p = self.sorted.partition_point(|&y| y < target);
        let cands = [p.checked_sub(1), (p < self.sorted.len()).then_some(p)];
        cands
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (self.sorted[a] - target).abs().total_cmp(&(self.sorted[b] - target).abs()))
            .expect("dataset is nonempty")
    }
}

fn soft_radius(nu: f64) -> f64 {
    ((1.0 / SOFT_WEIGHT_FLOOR).ln() / nu).sqrt()
}

/// Draws a minibatch: labels with replacement from the distinct labels,
/// Gaussian label perturbation, one qualifying image per target, condition
/// drop and uniform time steps.
pub fn assemble_batch(
    data: &TrainData,
    conditioner: &dyn Conditioner,
    cfg: &TrainConfig,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<VicinalBatch> {
    let ls = data.labelspace;
    let m = cfg.batch_size;
    let mut indices = Vec::with_capacity(m);
    let mut target_labels = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    let mut timesteps = Vec::with_capacity(m);
    let mut deltas = Vec::with_capacity(m);
    let mut fallback = Vec::with_capacity(m);
    for _ in 0..m {
        let y = ls.distinct[rng.gen_range(0..ls.distinct.len())];
        let (mut target, mut pos, mut first_delta, mut fell_back) = (y, None, 0.0, false);
        match cfg.vicinity_mode {
            VicinityMode::None => pos = Some(data.window(y, 0.0)),
            mode => {
                let radius = match mode {
                    VicinityMode::Hard => ls.kappa,
                    _ => soft_radius(ls.nu.ok_or_else(|| CcdmError::Config("soft vicinity needs kappa > 0".into()))?),
                };
                for attempt in 0..=cfg.retry_limit {
                    let delta = ls.sigma_delta * rng::normal_vec(rng, 1)[0];
                    if attempt == 0 {
                        first_delta = delta;
                    }
                    target = (y + delta).clamp(0.0, 1.0);
                    let w = data.window(target, radius);
                    if !w.is_empty() {
                        pos = Some(w);
                        break;
                    }
                }
            }
        }
        let p = match pos.filter(|w| !w.is_empty()) {
            Some(w) => rng.gen_range(w),
            None => {
                fell_back = true;
                data.nearest(target)
            }
        };
        let idx = data.order[p];
        let weight = match cfg.vicinity_mode {
            VicinityMode::Soft => soft_weight(target, data.sorted[p], ls.nu.unwrap_or(0.0)),
            _ => 1.0,
        };
        let dropped = rng.gen::<f64>() < cfg.p_drop;
        indices.push(idx);
        target_labels.push((!dropped).then_some(target));
        weights.push(if dropped { 1.0 } else { weight });
        timesteps.push(rng.gen_range(1..=steps));
        deltas.push(first_delta);
        fallback.push(fell_back);
    }
    let idx: Vec<i64> = indices.iter().map(|&i| i as i64).collect();
    let images = data.images.index_select(0, &Tensor::from_slice(&idx));
    let cond = conditioner.condition(&target_labels)?;
    Ok(VicinalBatch { indices, images, target_labels, weights, timesteps, cond, deltas, fallback })
}

/// Loss value with the per-row terms it averages.
#[derive(Debug)]
pub struct LossOutput {
    pub loss: Tensor,
    pub per_row: Tensor,
}

/// `mean_i w_i (x0_hat_i - x0_i)^T H_i^{-1} (x0_hat_i - x0_i)` with the noisy
/// input drawn from the row's label-dependent forward process. With
/// [`LossSpace::Native`] the residual is taken in the model's prediction
/// space instead, with the same weighting.
pub fn hvidl_loss(
    f: &dyn Denoise,
    batch: &VicinalBatch,
    schedule: &NoiseSchedule,
    space: LossSpace,
    rng: &mut ChaCha8Rng,
) -> Result<LossOutput> {
    let x0 = &batch.images;
    let eps_std = rng::normal_tensor(rng, &x0.size(), x0.kind());
    let h = batch.cond.h_diag.to_kind(x0.kind());
    let xt = diffmath::forward_sample(x0, &batch.timesteps, &h, &eps_std, schedule)?;
    let pred = denoiser::predict(f, &xt, &batch.timesteps, &batch.cond, true)?;
    let (estimate, truth) = match (space, f.pred_type()) {
        (LossSpace::X0, _) | (LossSpace::Native, PredictionType::X0) => (
            diffmath::convert_prediction(&pred, &xt, &batch.timesteps, f.pred_type(), PredictionType::X0, schedule)?,
            x0.shallow_clone(),
        ),
        (LossSpace::Native, p) => {
            let eps = h.sqrt() * &eps_std;
            let truth = diffmath::convert_prediction(&eps, &xt, &batch.timesteps, PredictionType::Eps, p, schedule)?;
            (pred, truth)
        }
    };
    weighted_mahalanobis(&estimate, &truth, &h, &batch.weights_tensor())
}

/// Batch mean of `w_i * sum_k (a - b)^2 / h`; errors name the first non-finite row.
pub fn weighted_mahalanobis(a: &Tensor, b: &Tensor, h: &Tensor, w: &Tensor) -> Result<LossOutput> {
    let per_row = diffmath::mahalanobis_rows(&(a - b), h) * w;
    let finite = diffmath::tensor_to_vec(&per_row.isfinite().to_kind(Kind::Double));
    if let Some(row) = finite.iter().position(|&v| v == 0.0) {
        return Err(CcdmError::Numerical(format!("non-finite loss in row {row}")));
    }
    Ok(LossOutput { loss: per_row.mean(per_row.kind()), per_row })
}

/// One line of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub drop_fraction: f64,
    pub fallback_count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub trace: Vec<TraceRecord>,
    pub fallback_total: usize,
}

/// Where the loop writes its trace and checkpoints.
#[derive(Debug)]
pub struct TrainOutput<'a> {
    pub dir: &'a Path,
    pub meta: DenoiserMeta,
}

/// Runs `cfg.steps` Adam steps of [`hvidl_loss`]. A non-finite loss is
/// retried once with a fresh batch before the loop aborts.
pub fn train_loop(
    unet: &UNet,
    data: &TrainData,
    conditioner: &dyn Conditioner,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    output: Option<TrainOutput>,
) -> Result<TrainReport> {
    cfg.validate(data.labelspace)?;
    if unet.config.pred_type != cfg.pred_type {
        return invalid("denoiser prediction type differs from the training config");
    }
    if unet.config.steps != schedule.steps() {
        return invalid("denoiser and schedule disagree on the number of steps");
    }
    let mut report = TrainReport::default();
    if cfg.steps == 0 {
        return Ok(report);
    }
    let mut opt = nn::Adam::default().build(&unet.vs, cfg.lr)?;
    let mut trace_file = match &output {
        Some(o) => {
            std::fs::create_dir_all(o.dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(o.dir.join(TRACE_FILE))?))
        }
        None => None,
    };
    for step in 1..=cfg.steps {
        let mut attempt = 0u64;
        let (loss, batch) = loop {
            let mut brng = rng::stream(cfg.seed, &[rng::role::BATCH, step as u64, attempt]);
            let batch = assemble_batch(data, conditioner, cfg, schedule.steps(), &mut brng)?;
            let mut nrng = rng::stream(cfg.seed, &[rng::role::NOISE, step as u64, attempt]);
            match hvidl_loss(unet, &batch, schedule, cfg.loss_space, &mut nrng) {
                Ok(out) => break (out.loss, batch),
                Err(CcdmError::Numerical(msg)) if attempt == 0 => {
                    log::warn!("step {step}: {msg}; retrying with a fresh batch");
                    attempt += 1;
                }
                Err(CcdmError::Numerical(msg)) => {
                    return Err(CcdmError::Numerical(format!("step {step}: {msg} (after retry)")))
                }
                Err(e) => return Err(e),
            }
        };
        opt.backward_step(&loss);
        let rec = TraceRecord {
            step,
            loss: loss.double_value(&[]),
            drop_fraction: batch.drop_fraction(),
            fallback_count: batch.fallback_count(),
        };
        report.fallback_total += rec.fallback_count;
        if let Some(f) = trace_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        if step % 100 == 0 || step == cfg.steps {
            log::info!("step {step}/{}: loss {:.5}", cfg.steps, rec.loss);
        }
        report.trace.push(rec);
        if let Some(o) = &output {
            if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || step == cfg.steps {
                let meta = DenoiserMeta { trained_steps: step, ..o.meta.clone() };
                denoiser::save_checkpoint(unet, &meta, o.dir)?;
            }
        }
    }
    if let Some(mut f) = trace_file {
        f.flush()?;
    }
    if report.fallback_total > 0 {
        log::warn!("{} rows fell back to the nearest-label image", report.fallback_total);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{build_unet, UNetConfig};
    use crate::embednet::FixedConditioner;

    fn toy_space(raw: &[f64], m_kappa: u32) -> LabelSpace {
        LabelSpace::from_raw(raw, m_kappa).unwrap()
    }

    fn toy_images(n: usize) -> Tensor {
        let mut r = rng::stream(99, &[]);
        rng::normal_tensor(&mut r, &[n as i64, 1, 8, 8], Kind::Float).clamp(-1.0, 1.0)
    }

    fn cond() -> FixedConditioner {
        FixedConditioner::identity([1, 8, 8])
    }

    #[test]
    fn drop_extremes() {
        let raw: Vec<f64> = (0..20).map(|i| (i / 2) as f64).collect();
        let ls = toy_space(&raw, 1);
        let imgs = toy_images(20);
        let data = TrainData::new(&ls, &imgs).unwrap();
        let mut r = rng::stream(1, &[]);
        let cfg = TrainConfig { p_drop: 0.0, batch_size: 64, ..Default::default() };
        let b = assemble_batch(&data, &cond(), &cfg, 100, &mut r).unwrap();
        assert!(b.target_labels.iter().all(Option::is_some));
        let cfg = TrainConfig { p_drop: 1.0, ..cfg };
        let b = assemble_batch(&data, &cond(), &cfg, 100, &mut r).unwrap();
        assert!(b.target_labels.iter().all(Option::is_none));
        assert_eq!(b.cond.h_diag.min().double_value(&[]), 1.0);
        assert_eq!(b.cond.h_diag.max().double_value(&[]), 1.0);
        assert!(b.weights.iter().all(|&w| w == 1.0));
        assert!(b.timesteps.iter().all(|&t| (1..=100).contains(&t)));
    }

    #[test]
    fn exact_labels_with_zero_kappa() {
        let raw = [0.0, 1.0, 2.0, 3.0, 4.0];
        let mut ls = toy_space(&raw, 0);
        ls.sigma_delta = 1e-300;
        let imgs = toy_images(5);
        let data = TrainData::new(&ls, &imgs).unwrap();
        let cfg = TrainConfig { p_drop: 0.0, batch_size: 200, ..Default::default() };
        let mut r = rng::stream(2, &[]);
        let b = assemble_batch(&data, &cond(), &cfg, 10, &mut r).unwrap();
        for (i, y) in b.indices.iter().zip(&b.target_labels) {
            assert_eq!(ls.labels[*i], y.unwrap());
        }
        let cfg = TrainConfig { vicinity_mode: VicinityMode::None, ..cfg };
        let b = assemble_batch(&data, &cond(), &cfg, 10, &mut r).unwrap();
        for (i, y) in b.indices.iter().zip(&b.target_labels) {
            assert_eq!(ls.labels[*i], y.unwrap());
        }
        assert_eq!(b.fallback_count(), 0);
    }

    #[test]
    fn hard_rows_respect_kappa_and_fallback_is_flagged() {
        let raw: Vec<f64> = (0..40).map(|i| (i % 10) as f64 * 3.0).collect();
        let ls = toy_space(&raw, 1);
        let imgs = toy_images(40);
        let data = TrainData::new(&ls, &imgs).unwrap();
        let cfg = TrainConfig { p_drop: 0.0, batch_size: 500, ..Default::default() };
        let mut r = rng::stream(3, &[]);
        let b = assemble_batch(&data, &cond(), &cfg, 10, &mut r).unwrap();
        for k in 0..b.len() {
            let y = b.target_labels[k].unwrap();
            assert!(b.fallback[k] || (ls.labels[b.indices[k]] - y).abs() <= ls.kappa);
            assert_eq!(b.weights[k], 1.0);
            assert!((0.0..=1.0).contains(&y));
        }
        // a tiny window forces fallbacks
        let mut narrow = ls.clone();
        narrow.kappa = 1e-9;
        let data = TrainData::new(&narrow, &imgs).unwrap();
        let b = assemble_batch(&data, &cond(), &cfg, 10, &mut r).unwrap();
        assert!(b.fallback_count() > 0);
    }

    #[test]
    fn drop_frequency_and_delta_spread() {
        let raw: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let ls = toy_space(&raw, 1);
        let imgs = toy_images(100);
        let data = TrainData::new(&ls, &imgs).unwrap();
        let cfg = TrainConfig { batch_size: 10_000, ..Default::default() };
        let mut r = rng::stream(4, &[]);
        let b = assemble_batch(&data, &cond(), &cfg, 10, &mut r).unwrap();
        assert!((b.drop_fraction() - 0.1).abs() <= 0.02, "{}", b.drop_fraction());
        let n = b.deltas.len() as f64;
        let mean = b.deltas.iter().sum::<f64>() / n;
        let sd = (b.deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd / ls.sigma_delta - 1.0).abs() <= 0.05, "{sd} vs {}", ls.sigma_delta);
    }

    #[test]
    fn soft_mode_needs_kappa_and_weights_in_unit_interval() {
        let raw: Vec<f64> = (0..30).map(|i| (i % 6) as f64).collect();
        let ls0 = toy_space(&raw, 0);
        let cfg = TrainConfig { vicinity_mode: VicinityMode::Soft, pred_type: PredictionType::Eps, ..Default::default() };
        assert!(cfg.validate(&ls0).is_err());
        let ls = toy_space(&raw, 2);
        cfg.validate(&ls).unwrap();
        let imgs = toy_images(30);
        let data = TrainData::new(&ls, &imgs).unwrap();
        let cfg = TrainConfig { batch_size: 300, p_drop: 0.0, ..cfg };
        let mut r = rng::stream(5, &[]);
        let b = assemble_batch(&data, &cond(), &cfg, 10, &mut r).unwrap();
        assert!(b.weights.iter().all(|&w| (SOFT_WEIGHT_FLOOR * 0.999..=1.0).contains(&w)));
        assert!(b.weights.iter().any(|&w| w < 1.0));
    }

    struct Oracle {
        x0: Tensor,
        scale: f64,
    }

    impl Denoise for Oracle {
        fn pred_type(&self) -> PredictionType {
            PredictionType::X0
        }
        fn image_shape(&self) -> [i64; 3] {
            [1, 8, 8]
        }
        fn steps(&self) -> usize {
            100
        }
        fn forward(&self, _: &Tensor, _: &[usize], _: &CondBatch, _: bool) -> Tensor {
            &self.x0 * self.scale
        }
    }

    fn fixed_batch(h: f64) -> VicinalBatch {
        let n = 4;
        let images = toy_images(n).to_kind(Kind::Double);
        let c = FixedConditioner::new(crate::embednet::FixedEncoding::Sinusoidal, [1, 8, 8], h);
        VicinalBatch {
            indices: (0..n).collect(),
            images,
            target_labels: vec![Some(0.5); n],
            weights: vec![1.0; n],
            timesteps: vec![1, 30, 60, 100],
            cond: c.condition(&vec![Some(0.5); n]).unwrap(),
            deltas: vec![0.0; n],
            fallback: vec![false; n],
        }
    }

    #[test]
    fn loss_reductions() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let b = fixed_batch(1.0);
        let exact = Oracle { x0: b.images.shallow_clone(), scale: 1.0 };
        let mut r = rng::stream(6, &[]);
        let out = hvidl_loss(&exact, &b, &s, LossSpace::X0, &mut r).unwrap();
        assert_eq!(out.loss.double_value(&[]), 0.0);

        let off = Oracle { x0: b.images.shallow_clone(), scale: 0.5 };
        let l1 = hvidl_loss(&off, &b, &s, LossSpace::X0, &mut r).unwrap().loss.double_value(&[]);
        let mse = (&b.images * 0.5 - &b.images).square().sum(Kind::Double).double_value(&[]) / 4.0;
        assert!((l1 - mse).abs() <= 1e-10 * mse);
        let l_half = hvidl_loss(&off, &fixed_batch(0.5), &s, LossSpace::X0, &mut r).unwrap().loss.double_value(&[]);
        assert!((l_half - 2.0 * l1).abs() <= 1e-10 * l1);

        let mut zero_w = fixed_batch(1.0);
        zero_w.weights = vec![0.0, 1.0, 0.0, 1.0];
        let out = hvidl_loss(&off, &zero_w, &s, LossSpace::X0, &mut r).unwrap();
        assert_eq!(out.per_row.double_value(&[0]), 0.0);
        assert_eq!(out.per_row.double_value(&[2]), 0.0);
    }

    #[test]
    fn non_finite_rows_are_reported() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let b = fixed_batch(1.0);
        let nan = Oracle { x0: b.images.shallow_clone(), scale: f64::NAN };
        let mut r = rng::stream(7, &[]);
        let err = hvidl_loss(&nan, &b, &s, LossSpace::X0, &mut r).unwrap_err();
        assert!(matches!(err, CcdmError::Numerical(m) if m.contains("row 0")));
    }

    fn tiny_unet(pred: PredictionType) -> UNet {
        let cfg = UNetConfig {
            image_shape: [1, 8, 8],
            base_channels: 8,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            time_embed_dim: 32,
            pred_type: pred,
            steps: 100,
            ..Default::default()
        };
        build_unet(cfg, 1).unwrap()
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let raw: Vec<f64> = (0..8).map(f64::from).collect();
        let ls = toy_space(&raw, 1);
        let imgs = toy_images(8);
        let data = TrainData::new(&ls, &imgs).unwrap();
        let unet = tiny_unet(PredictionType::X0);
        let before = crate::nets::parameter_hash(&unet.vs);
        let s = NoiseSchedule::cosine(100).unwrap();
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        let rep = train_loop(&unet, &data, &cond(), &s, &cfg, None).unwrap();
        assert!(rep.trace.is_empty());
        assert_eq!(before, crate::nets::parameter_hash(&unet.vs));
    }

    #[test]
    fn soft_eps_variant_runs_and_trace_is_reproducible() {
        let raw: Vec<f64> = (0..16).map(|i| (i % 4) as f64).collect();
        let ls = toy_space(&raw, 2);
        let imgs = toy_images(16);
        let data = TrainData::new(&ls, &imgs).unwrap();
        let s = NoiseSchedule::cosine(100).unwrap();
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 8,
            vicinity_mode: VicinityMode::Soft,
            pred_type: PredictionType::Eps,
            loss_space: LossSpace::Native,
            ..Default::default()
        };
        let run = || {
            let unet = tiny_unet(PredictionType::Eps);
            let dir = tempfile::tempdir().unwrap();
            let meta = DenoiserMeta {
                unet: unet.config.clone(),
                schedule: s.meta(),
                labelspace: ls.meta(),
                p_drop: cfg.p_drop,
                trained_steps: 0,
                seed: 1,
            };
            let rep = train_loop(&unet, &data, &cond(), &s, &cfg, Some(TrainOutput { dir: dir.path(), meta })).unwrap();
            let text = std::fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap();
            assert_eq!(text.lines().count(), 5);
            let (back, meta) = denoiser::load_checkpoint(dir.path()).unwrap();
            assert_eq!(meta.trained_steps, 5);
            assert_eq!(crate::nets::parameter_hash(&back.vs), crate::nets::parameter_hash(&unet.vs));
            rep.trace
        };
        let a = run();
        assert!(a.iter().all(|r| r.loss.is_finite()));
        assert_eq!(a, run());
    }
}
