//! Label embeddings: the short embedding fed to the denoiser and the long
//! covariance embedding defining the diagonal covariance `H_y`.
//!
//! Both follow the same two-stage recipe. An auxiliary CNN regressor is
//! trained to predict labels from images; its hidden layer (`features`) has
//! the width of the target embedding. With the regressor frozen, a
//! five-layer perceptron is then trained so that the regressor's head maps
//! its output back to the (noise-perturbed) input label.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::{nn, nn::Module, nn::OptimizerConfig, Device, Kind, Tensor};

use crate::error::{invalid, CcdmError, Result};
use crate::nets::{self, ConvNet, Mlp5};
use crate::rng;

/// Width of the short label embedding.
pub const SHORT_DIM: i64 = 128;
/// Clamp bound applied to the long embedding before exponentiation.
pub const CLAMP_B: f64 = 20.0;
/// Variance of the label perturbation used when fitting the perceptrons.
pub const ZETA_VARIANCE: f64 = 0.04;
/// Default number of epochs for the auxiliary regressors.
pub const AUX_EPOCHS: usize = 10;
const MLP_GROUPS: i64 = 8;

/// Embedding of one label (or of the null condition).
#[derive(Debug)]
pub struct ConditionEmbedding {
    pub h_short: Tensor,
    pub h_long: Tensor,
    pub h_diag: Tensor,
    pub is_null: bool,
}

/// Conditioning for a batch of rows, ready for the denoiser.
#[derive(Debug)]
pub struct CondBatch {
    /// `(B, SHORT_DIM)`; rows of null conditions are zero.
    pub h_short: Tensor,
    /// `(B,)` boolean, true where the condition is dropped.
    pub null_mask: Tensor,
    /// `(B, C, H, W)` diagonal of `H_y` per row (all ones for null rows).
    pub h_diag: Tensor,
}

impl CondBatch {
    pub fn len(&self) -> i64 {
        self.h_short.size()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn narrow(&self, start: i64, len: i64) -> CondBatch {
        CondBatch {
            h_short: self.h_short.narrow(0, start, len),
            null_mask: self.null_mask.narrow(0, start, len),
            h_diag: self.h_diag.narrow(0, start, len),
        }
    }

    /// The same rows with every condition dropped.
    pub fn to_null(&self) -> CondBatch {
        CondBatch {
            h_short: self.h_short.zeros_like(),
            null_mask: self.null_mask.ones_like(),
            h_diag: self.h_diag.ones_like(),
        }
    }

    pub fn cat(parts: &[CondBatch]) -> CondBatch {
        let h: Vec<&Tensor> = parts.iter().map(|p| &p.h_short).collect();
        let m: Vec<&Tensor> = parts.iter().map(|p| &p.null_mask).collect();
        let d: Vec<&Tensor> = parts.iter().map(|p| &p.h_diag).collect();
        CondBatch { h_short: Tensor::cat(&h, 0), null_mask: Tensor::cat(&m, 0), h_diag: Tensor::cat(&d, 0) }
    }
}

/// Anything that can turn labels (or `None` for the null condition) into
/// denoiser conditioning.
pub trait Conditioner {
    fn image_shape(&self) -> [i64; 3];
    fn condition(&self, ys: &[Option<f64>]) -> Result<CondBatch>;
}

fn check_label(y: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&y) || y.is_nan() {
        return invalid(format!("label {y} outside [0, 1]"));
    }
    Ok(())
}

/// `H_diag = exp(-clamp(h_long, -B, B))`.
pub fn covariance_diag(h_long: &Tensor, clamp_b: f64) -> Tensor {
    (-h_long.clamp(-clamp_b, clamp_b)).exp()
}

/// Alternative fixed label encodings (ablation only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedEncoding {
    Sinusoidal,
    GaussianFourier,
}

/// Label conditioning without trained networks: a fixed encoding for the
/// short embedding and a constant covariance diagonal.
#[derive(Debug)]
pub struct FixedConditioner {
    pub encoding: FixedEncoding,
    pub image_shape: [i64; 3],
    pub h_value: f64,
    fourier: Tensor,
}

impl FixedConditioner {
    pub fn new(encoding: FixedEncoding, image_shape: [i64; 3], h_value: f64) -> Self {
        let mut r = rng::stream(0x0f0f, &[rng::role::EMBED]);
        let fourier = rng::normal_tensor(&mut r, &[SHORT_DIM / 2], Kind::Float) * 16.0;
        Self { encoding, image_shape, h_value, fourier }
    }

    pub fn identity(image_shape: [i64; 3]) -> Self {
        Self::new(FixedEncoding::Sinusoidal, image_shape, 1.0)
    }

    fn encode(&self, y: &Tensor) -> Tensor {
        match self.encoding {
            FixedEncoding::Sinusoidal => nets::sinusoidal_embedding(&(y * 1000.0), SHORT_DIM, 10_000.0),
            FixedEncoding::GaussianFourier => {
                let args = y.unsqueeze(1) * self.fourier.unsqueeze(0) * (2.0 * std::f64::consts::PI);
                Tensor::cat(&[args.sin(), args.cos()], 1)
            }
        }
    }
}

impl Conditioner for FixedConditioner {
    fn image_shape(&self) -> [i64; 3] {
        self.image_shape
    }

    fn condition(&self, ys: &[Option<f64>]) -> Result<CondBatch> {
        for y in ys.iter().flatten() {
            check_label(*y)?;
        }
        let vals: Vec<f32> = ys.iter().map(|y| y.unwrap_or(0.0) as f32).collect();
        let mask: Vec<bool> = ys.iter().map(|y| y.is_none()).collect();
        let null_mask = Tensor::from_slice(&mask);
        let enc = self.encode(&Tensor::from_slice(&vals));
        let keep = null_mask.logical_not().to_kind(Kind::Float).unsqueeze(1);
        let [c, h, w] = self.image_shape;
        let b = ys.len() as i64;
        let hv = Tensor::full([b, c, h, w], self.h_value, (Kind::Float, Device::Cpu));
        let m4 = null_mask.reshape([b, 1, 1, 1]);
        let h_diag = hv.where_self(&m4.logical_not(), &hv.ones_like());
        Ok(CondBatch { h_short: enc * keep, null_mask, h_diag })
    }
}

/// Auxiliary image-to-label regressor `T2(T1(x))` whose hidden layer exposes
/// `feat_dim` features.
#[derive(Debug)]
pub struct AuxRegressor {
    pub vs: nn::VarStore,
    net: ConvNet,
    frozen: bool,
}

impl AuxRegressor {
    pub fn new(image_shape: [i64; 3], feat_dim: i64, width: i64, seed: u64) -> Result<Self> {
        let vs = nn::VarStore::new(Device::Cpu);
        let net = ConvNet::new(&(vs.root() / "aux"), image_shape, width, feat_dim, 1)?;
        nets::seeded_init(&vs, seed);
        Ok(Self { vs, net, frozen: false })
    }

    pub fn feat_dim(&self) -> i64 {
        self.net.feat_dim
    }

    /// `T1`: image to hidden features.
    pub fn features(&self, x: &Tensor) -> Tensor {
        self.net.features(x, false)
    }

    /// `T2`: hidden features to (unclamped) label.
    pub fn head(&self, h: &Tensor) -> Tensor {
        self.net.head(h).squeeze_dim(1)
    }

    /// Label prediction clamped to `[0, 1]`.
    pub fn predict(&self, x: &Tensor) -> Tensor {
        tch::no_grad(|| nets::batched(x, 256, |b| self.net.forward_t(b, false).squeeze_dim(1).clamp(0.0, 1.0)))
    }

    pub fn freeze(&mut self) {
        self.vs.freeze();
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// Loss history of a fit.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitReport {
    pub losses: Vec<f64>,
    pub initial_objective: Option<f64>,
    pub final_objective: Option<f64>,
}

fn check_images(images: &Tensor, labels: &[f64]) -> Result<()> {
    let s = images.size();
    if s.len() != 4 || s[0] == 0 {
        return Err(CcdmError::Dataset("empty or malformed image batch".into()));
    }
    if s[0] as usize != labels.len() {
        return Err(CcdmError::Dataset(format!("{} images but {} labels", s[0], labels.len())));
    }
    Ok(())
}

/// Fits the auxiliary regressor to normalized labels by squared error.
pub fn train_aux_cnn(
    aux: &mut AuxRegressor,
    images: &Tensor,
    labels: &[f64],
    epochs: usize,
    seed: u64,
) -> Result<FitReport> {
    check_images(images, labels)?;
    if aux.frozen {
        return invalid("auxiliary regressor is frozen");
    }
    let n = labels.len();
    let batch = 64.min(n);
    let mut opt = nn::Adam::default().build(&aux.vs, 1e-3)?;
    let targets = Tensor::from_slice(labels).to_kind(Kind::Float);
    let mut r = rng::stream(seed, &[rng::role::EMBED, 11]);
    let mut report = FitReport::default();
    let mut order: Vec<i64> = (0..n as i64).collect();
    for _ in 0..epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let idx = Tensor::from_slice(chunk);
            let x = images.index_select(0, &idx);
            let y = targets.index_select(0, &idx);
            let pred = aux.net.forward_t(&x, true).squeeze_dim(1);
            let loss = (pred - y).square().mean(Kind::Float);
            opt.backward_step(&loss);
            total += loss.double_value(&[]) * chunk.len() as f64;
        }
        report.losses.push(total / n as f64);
    }
    Ok(report)
}

/// Monte-Carlo estimate of `mean_i E_zeta (T2(T3(y_i + zeta)) - (y_i + zeta))^2`
/// over a fixed set of perturbed labels.
fn perceptron_objective(phi: &Mlp5, aux: &AuxRegressor, perturbed: &Tensor) -> f64 {
    tch::no_grad(|| {
        let pred = aux.head(&phi.forward(perturbed));
        (pred - perturbed).square().mean(Kind::Float).double_value(&[])
    })
}

fn perturbed_labels<R: Rng>(r: &mut R, distinct: &[f64], n: usize) -> Tensor {
    let sd = ZETA_VARIANCE.sqrt();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let y = distinct[r.gen_range(0..distinct.len())];
            y + sd * rng::normal_vec(r, 1)[0]
        })
        .collect();
    Tensor::from_slice(&v).to_kind(Kind::Float)
}

/// Trains `phi` (T3) with the regressor frozen so that the regressor's head
/// inverts it on noise-perturbed distinct labels.
pub fn train_perceptron(
    phi_vs: &nn::VarStore,
    phi: &Mlp5,
    aux: &AuxRegressor,
    distinct: &[f64],
    steps: usize,
    seed: u64,
) -> Result<FitReport> {
    if distinct.is_empty() {
        return invalid("no distinct labels");
    }
    if !aux.is_frozen() {
        return invalid("auxiliary regressor must be frozen before fitting the embedding");
    }
    if phi.out_dim != aux.feat_dim() {
        return Err(CcdmError::Shape(format!(
            "embedding width {} does not match regressor features {}",
            phi.out_dim,
            aux.feat_dim()
        )));
    }
    let mut val_rng = rng::stream(seed, &[rng::role::EMBED, 21]);
    let validation = perturbed_labels(&mut val_rng, distinct, 1024);
    let mut opt = nn::Adam::default().build(phi_vs, 1e-3)?;
    let mut r = rng::stream(seed, &[rng::role::EMBED, 22]);
    let mut report = FitReport {
        initial_objective: Some(perceptron_objective(phi, aux, &validation)),
        ..Default::default()
    };
    for _ in 0..steps {
        let y = perturbed_labels(&mut r, distinct, 128);
        let pred = aux.head(&phi.forward(&y));
        let loss = (pred - &y).square().mean(Kind::Float);
        opt.backward_step(&loss);
        report.losses.push(loss.double_value(&[]));
    }
    report.final_objective = Some(perceptron_objective(phi, aux, &validation));
    Ok(report)
}

/// A trained scalar-to-vector label map.
#[derive(Debug)]
pub struct LabelMap {
    pub vs: nn::VarStore,
    pub mlp: Mlp5,
}

impl LabelMap {
    pub fn new(hidden: i64, out_dim: i64, seed: u64) -> Self {
        let vs = nn::VarStore::new(Device::Cpu);
        let mlp = Mlp5::new(&(vs.root() / "mlp"), hidden, out_dim, MLP_GROUPS);
        nets::seeded_init(&vs, seed);
        Self { vs, mlp }
    }

    pub fn forward(&self, y: &Tensor) -> Tensor {
        self.mlp.forward(y)
    }
}

/// Hyperparameters of the embedding training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub aux_epochs: usize,
    pub aux_width: i64,
    pub phi_steps: usize,
    pub long_hidden: i64,
    pub short_hidden: i64,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { aux_epochs: AUX_EPOCHS, aux_width: 32, phi_steps: 2000, long_hidden: 256, short_hidden: 128, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedMeta {
    pub image_shape: [i64; 3],
    pub input_range: [f64; 2],
    pub short_dim: i64,
    pub long_dim: i64,
    pub clamp_b: f64,
    pub seed: u64,
    /// The short embedding is retrained on each dataset.
    pub short_retrained: bool,
    pub config: EmbedConfig,
}

/// Trained embedding networks `phi` (short) and `phi'` (long).
#[derive(Debug)]
pub struct EmbeddingNets {
    pub meta: EmbedMeta,
    pub aux_short: AuxRegressor,
    pub phi_short: LabelMap,
    pub aux_long: AuxRegressor,
    pub phi_long: LabelMap,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EmbedTrainingReport {
    pub aux_short: FitReport,
    pub phi_short: FitReport,
    pub aux_long: FitReport,
    pub phi_long: FitReport,
}

impl EmbeddingNets {
    fn untrained(image_shape: [i64; 3], cfg: &EmbedConfig) -> Result<Self> {
        let long_dim = image_shape.iter().product();
        let seed = cfg.seed;
        Ok(Self {
            meta: EmbedMeta {
                image_shape,
                input_range: [0.0, 1.0],
                short_dim: SHORT_DIM,
                long_dim,
                clamp_b: CLAMP_B,
                seed,
                short_retrained: true,
                config: cfg.clone(),
            },
            aux_short: AuxRegressor::new(image_shape, SHORT_DIM, cfg.aux_width, seed ^ 0x51)?,
            phi_short: LabelMap::new(cfg.short_hidden, SHORT_DIM, seed ^ 0x52),
            aux_long: AuxRegressor::new(image_shape, long_dim, cfg.aux_width, seed ^ 0x53)?,
            phi_long: LabelMap::new(cfg.long_hidden, long_dim, seed ^ 0x54),
        })
    }

    /// Trains both embeddings on `images` (in `[-1, 1]`) with normalized labels.
    pub fn train(
        images: &Tensor,
        labels: &[f64],
        distinct: &[f64],
        cfg: &EmbedConfig,
    ) -> Result<(Self, EmbedTrainingReport)> {
        check_images(images, labels)?;
        let s = images.size();
        let mut nets = Self::untrained([s[1], s[2], s[3]], cfg)?;
        let report = nets.fit(images, labels, distinct)?;
        Ok((nets, report))
    }

    fn fit(&mut self, images: &Tensor, labels: &[f64], distinct: &[f64]) -> Result<EmbedTrainingReport> {
        let cfg = self.meta.config.clone();
        let mut report = EmbedTrainingReport {
            aux_short: train_aux_cnn(&mut self.aux_short, images, labels, cfg.aux_epochs, cfg.seed ^ 1)?,
            ..Default::default()
        };
        self.aux_short.freeze();
        report.phi_short =
            train_perceptron(&self.phi_short.vs, &self.phi_short.mlp, &self.aux_short, distinct, cfg.phi_steps, cfg.seed ^ 2)?;
        report.aux_long = train_aux_cnn(&mut self.aux_long, images, labels, cfg.aux_epochs, cfg.seed ^ 3)?;
        self.aux_long.freeze();
        report.phi_long =
            train_perceptron(&self.phi_long.vs, &self.phi_long.mlp, &self.aux_long, distinct, cfg.phi_steps, cfg.seed ^ 4)?;
        self.phi_short.vs.freeze();
        self.phi_long.vs.freeze();
        Ok(report)
    }

    pub fn embed(&self, y: Option<f64>) -> Result<ConditionEmbedding> {
        let [c, h, w] = self.meta.image_shape;
        match y {
            None => Ok(ConditionEmbedding {
                h_short: Tensor::zeros([SHORT_DIM], (Kind::Float, Device::Cpu)),
                h_long: Tensor::zeros([c, h, w], (Kind::Float, Device::Cpu)),
                h_diag: Tensor::ones([c, h, w], (Kind::Float, Device::Cpu)),
                is_null: true,
            }),
            Some(y) => {
                check_label(y)?;
                let yt = Tensor::from_slice(&[y as f32]);
                let (h_short, h_long) = tch::no_grad(|| {
                    (self.phi_short.forward(&yt).squeeze_dim(0), self.phi_long.forward(&yt).reshape([c, h, w]))
                });
                let h_long = h_long.clamp(-self.meta.clamp_b, self.meta.clamp_b);
                let h_diag = covariance_diag(&h_long, self.meta.clamp_b);
                Ok(ConditionEmbedding { h_short, h_long, h_diag, is_null: false })
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.aux_short.vs.save(dir.join("aux_short.safetensors"))?;
        self.phi_short.vs.save(dir.join("phi_short.safetensors"))?;
        self.aux_long.vs.save(dir.join("aux_long.safetensors"))?;
        self.phi_long.vs.save(dir.join("phi_long.safetensors"))?;
        std::fs::write(dir.join("embeddings.json"), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("embeddings.json");
        if !meta_path.exists() {
            return Err(CcdmError::MissingDependency {
                what: format!("embedding checkpoint {}", meta_path.display()),
                producer: "train-embeddings".into(),
            });
        }
        let meta: EmbedMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        let mut nets = Self::untrained(meta.image_shape, &meta.config)?;
        nets.aux_short.vs.load(dir.join("aux_short.safetensors"))?;
        nets.phi_short.vs.load(dir.join("phi_short.safetensors"))?;
        nets.aux_long.vs.load(dir.join("aux_long.safetensors"))?;
        nets.phi_long.vs.load(dir.join("phi_long.safetensors"))?;
        nets.aux_short.freeze();
        nets.aux_long.freeze();
        nets.phi_short.vs.freeze();
        nets.phi_long.vs.freeze();
        nets.meta = meta;
        Ok(nets)
    }
}

impl Conditioner for EmbeddingNets {
    fn image_shape(&self) -> [i64; 3] {
        self.meta.image_shape
    }

    fn condition(&self, ys: &[Option<f64>]) -> Result<CondBatch> {
        for y in ys.iter().flatten() {
            check_label(*y)?;
        }
        let [c, h, w] = self.meta.image_shape;
        let b = ys.len() as i64;
        let vals: Vec<f32> = ys.iter().map(|y| y.unwrap_or(0.0) as f32).collect();
        let mask: Vec<bool> = ys.iter().map(|y| y.is_none()).collect();
        let null_mask = Tensor::from_slice(&mask);
        let keep = null_mask.logical_not().to_kind(Kind::Float);
        let yt = Tensor::from_slice(&vals);
        let (h_short, h_long) = tch::no_grad(|| (self.phi_short.forward(&yt), self.phi_long.forward(&yt)));
        let h_short = h_short * keep.unsqueeze(1);
        let h_diag = covariance_diag(&h_long, self.meta.clamp_b).reshape([b, c, h, w]);
        let keep4 = keep.reshape([b, 1, 1, 1]);
        let h_diag = &h_diag * &keep4 + (1.0 - &keep4);
        Ok(CondBatch { h_short, null_mask, h_diag })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_images(n: i64, seed: u64) -> (Tensor, Vec<f64>) {
        let mut r = rng::stream(seed, &[]);
        let labels: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1).max(1) as f64).collect();
        // brightness encodes the label
        let base = Tensor::from_slice(&labels).to_kind(Kind::Float).reshape([n, 1, 1, 1]) * 2.0 - 1.0;
        let noise = rng::normal_tensor(&mut r, &[n, 1, 16, 16], Kind::Float) * 0.05;
        (base.expand([n, 1, 16, 16], false) + noise, labels)
    }

    #[test]
    fn covariance_of_special_embeddings() {
        let zero = Tensor::zeros([2, 3], (Kind::Float, Device::Cpu));
        assert_eq!(covariance_diag(&zero, CLAMP_B).min().double_value(&[]), 1.0);
        let ln2 = Tensor::full([4], std::f64::consts::LN_2, (Kind::Double, Device::Cpu));
        let h = covariance_diag(&ln2, CLAMP_B);
        assert!((h - 0.5).abs().max().double_value(&[]) < 1e-15);
        let huge = Tensor::from_slice(&[1e6, -1e6]);
        let h = covariance_diag(&huge, CLAMP_B);
        assert!((h.double_value(&[0]) - (-20.0f64).exp()).abs() < 1e-20);
        assert!((h.double_value(&[1]) - 20.0f64.exp()).abs() < 1e-3);
    }

    #[test]
    fn aux_memorizes_a_single_image() {
        let (x, _) = toy_images(1, 1);
        let y = vec![0.7];
        let mut aux = AuxRegressor::new([1, 16, 16], 32, 8, 3).unwrap();
        let report = train_aux_cnn(&mut aux, &x, &y, 300, 1).unwrap();
        assert!(*report.losses.last().unwrap() <= 1e-3, "{:?}", report.losses);
        let p = aux.predict(&x).double_value(&[0]);
        assert!((0.0..=1.0).contains(&p));
        assert!(train_aux_cnn(&mut aux, &x.narrow(0, 0, 0), &[], 1, 1).is_err());
    }

    #[test]
    fn perceptron_fit_improves_and_keeps_regressor_fixed() {
        let (x, y) = toy_images(20, 2);
        let mut aux = AuxRegressor::new([1, 16, 16], 64, 8, 4).unwrap();
        train_aux_cnn(&mut aux, &x, &y, 5, 2).unwrap();
        let phi = LabelMap::new(32, 64, 9);
        assert!(train_perceptron(&phi.vs, &phi.mlp, &aux, &y, 5, 1).is_err());
        aux.freeze();
        let before = nets::parameter_hash(&aux.vs);
        let report = train_perceptron(&phi.vs, &phi.mlp, &aux, &y, 200, 1).unwrap();
        assert_eq!(before, nets::parameter_hash(&aux.vs));
        assert!(report.final_objective.unwrap() <= report.initial_objective.unwrap());
        assert!(train_perceptron(&phi.vs, &phi.mlp, &aux, &[], 5, 1).is_err());
    }

    #[test]
    fn identity_fixed_point_has_zero_objective() {
        // with T2 = identity on scalars and T3 = broadcast of its input, the
        // objective (T2(T3(y)) - y)^2 vanishes for every y
        let y = Tensor::from_slice(&[0.1f32, 0.5, 1.3]);
        let t3 = y.unsqueeze(1).expand([3, 4], false);
        let t2 = t3.mean_dim([1i64].as_slice(), false, Kind::Float);
        assert_eq!((t2 - &y).square().sum(Kind::Float).double_value(&[]), 0.0);
    }

    #[test]
    fn trained_nets_embed_and_roundtrip() {
        let (x, y) = toy_images(12, 3);
        let cfg = EmbedConfig { aux_epochs: 2, aux_width: 8, phi_steps: 20, long_hidden: 32, short_hidden: 32, seed: 5 };
        let (nets, _) = EmbeddingNets::train(&x, &y, &y, &cfg).unwrap();
        let e = nets.embed(Some(0.5)).unwrap();
        assert_eq!(e.h_short.size(), vec![SHORT_DIM]);
        assert_eq!(e.h_diag.size(), vec![1, 16, 16]);
        assert!(bool::try_from(e.h_short.isfinite().all()).unwrap());
        assert!(e.h_diag.min().double_value(&[]) > 0.0);
        let null = nets.embed(None).unwrap();
        assert_eq!(null.h_diag.min().double_value(&[]), 1.0);
        assert_eq!(null.h_diag.max().double_value(&[]), 1.0);
        assert!(nets.embed(Some(1.5)).is_err());

        let batch = nets.condition(&[Some(0.5), None]).unwrap();
        let diff = (batch.h_diag.get(0) - &e.h_diag).abs().max().double_value(&[]);
        assert!(diff < 1e-6);
        assert_eq!(batch.h_diag.get(1).min().double_value(&[]), 1.0);

        let dir = tempfile::tempdir().unwrap();
        nets.save(dir.path()).unwrap();
        let back = EmbeddingNets::load(dir.path()).unwrap();
        let e2 = back.embed(Some(0.5)).unwrap();
        assert_eq!((&e2.h_short - &e.h_short).abs().max().double_value(&[]), 0.0);
        assert!(EmbeddingNets::load(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn short_training_is_seed_deterministic() {
        let (x, y) = toy_images(8, 4);
        let cfg = EmbedConfig { aux_epochs: 1, aux_width: 8, phi_steps: 5, long_hidden: 16, short_hidden: 16, seed: 11 };
        let (a, _) = EmbeddingNets::train(&x, &y, &y, &cfg).unwrap();
        let (b, _) = EmbeddingNets::train(&x, &y, &y, &cfg).unwrap();
        assert_eq!(nets::parameter_hash(&a.phi_short.vs), nets::parameter_hash(&b.phi_short.vs));
    }

    #[test]
    fn mahalanobis_matches_dense_oracle() {
        let mut r = rng::stream(8, &[]);
        for d in 1..=16i64 {
            let v = rng::normal_tensor(&mut r, &[1, d], Kind::Double);
            let h = (rng::normal_tensor(&mut r, &[1, d], Kind::Double) * 0.5).exp();
            let fast = crate::diffmath::mahalanobis_rows(&v, &h).double_value(&[0]);
            let dense = Tensor::diag_embed(&h.squeeze_dim(0), 0, -2, -1);
            let inv = dense.inverse();
            let vv = v.squeeze_dim(0);
            let slow = vv.dot(&inv.mv(&vv)).double_value(&[]);
            assert!((fast - slow).abs() <= 1e-10 * slow.abs().max(1.0));
            assert!(fast >= 0.0);
        }
    }
}
