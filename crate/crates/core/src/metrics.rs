//! Evaluation protocol: windowed FID around evaluation centers, Label Score
//! from an oracle regressor, and Diversity from an oracle classifier.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tch::{nn, nn::OptimizerConfig, Device, Kind, Tensor};

use crate::error::{invalid, CcdmError, Result};
use crate::labelspace::LabelSpace;
use crate::nets::{self, ConvNet};
use crate::rng;

pub const ORACLE_WEIGHTS: &str = "oracle.safetensors";
pub const ORACLE_META: &str = "oracle.json";
pub const REPORT_FILE: &str = "eval_report.json";
pub const CENTERS_CSV: &str = "eval_centers.csv";

/// Rows of a `(n, d)` float tensor as an `n x d` matrix.
pub fn feature_matrix(t: &Tensor) -> DMatrix<f64> {
    let s = t.size();
    let (n, d) = (s[0] as usize, s[1] as usize);
    let v: Vec<f64> = Vec::<f64>::try_from(t.to_kind(Kind::Double).contiguous().view([-1])).unwrap_or_default();
    DMatrix::from_row_slice(n, d, &v)
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = c.transpose() * &c / (n - 1.0);
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of two feature sets (rows are
/// samples, unbiased covariance). The trace of `(S_a S_b)^{1/2}` is taken
/// from the eigenvalues of `S_a^{1/2} S_b S_a^{1/2}`, floored at 0.
pub fn fid(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return invalid(format!("fid needs at least 2 rows per set, got {} and {}", a.nrows(), b.nrows()));
    }
    if a.ncols() != b.ncols() {
        return Err(CcdmError::Shape(format!("feature widths differ: {} vs {}", a.ncols(), b.ncols())));
    }
    let (mu_a, s_a) = mean_cov(a);
    let (mu_b, s_b) = mean_cov(b);
    let ra = psd_sqrt(&s_a);
    let m = &ra * &s_b * &ra;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (mu_a - mu_b).norm_squared() + s_a.trace() + s_b.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(CcdmError::Numerical("fid is not finite".into()));
    }
    Ok(d.max(0.0))
}

/// Evaluation centers (normalized labels) and window radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub centers: Vec<f64>,
    pub n_per_center: usize,
    pub r_sfid: f64,
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(CcdmError::Config("evaluation needs at least one center".into()));
        }
        if self.centers.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(CcdmError::Config("evaluation centers must lie in [0, 1]".into()));
        }
        if self.centers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CcdmError::Config("evaluation centers must be strictly increasing".into()));
        }
        if !(self.r_sfid >= 0.0 && self.r_sfid.is_finite()) {
            return Err(CcdmError::Config("r_sfid must be a nonnegative number".into()));
        }
        Ok(())
    }

    /// `m` evenly spaced centers over `[lo, hi]`.
    pub fn evenly_spaced(lo: f64, hi: f64, m: usize, n_per_center: usize, r_sfid: f64) -> Self {
        let centers = if m == 1 {
            vec![lo]
        } else {
            (0..m).map(|j| lo + (hi - lo) * j as f64 / (m - 1) as f64).collect()
        };
        Self { centers, n_per_center, r_sfid }
    }

    /// Indices of `labels` inside the window around `center`.
    pub fn window(&self, center: f64, labels: &[f64]) -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| (y - center).abs() <= self.r_sfid + 1e-12)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Per-center and aggregate windowed FID. Centers whose window holds fewer
/// than 2 items on either side are skipped (`None`) and counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfidResult {
    pub per_center: Vec<Option<f64>>,
    pub mean: f64,
    pub std: f64,
    pub skipped: usize,
}

fn rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    m.select_rows(idx)
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Windowed FID over precomputed features.
pub fn sfid(
    protocol: &EvalProtocol,
    real_features: &DMatrix<f64>,
    real_labels: &[f64],
    fake_features: &DMatrix<f64>,
    fake_labels: &[f64],
) -> Result<SfidResult> {
    if real_features.nrows() != real_labels.len() || fake_features.nrows() != fake_labels.len() {
        return Err(CcdmError::Shape("feature rows and labels differ in length".into()));
    }
    let mut per_center = Vec::with_capacity(protocol.centers.len());
    for &c in &protocol.centers {
        let ri = protocol.window(c, real_labels);
        let fi = protocol.window(c, fake_labels);
        if ri.len() < 2 || fi.len() < 2 {
            per_center.push(None);
            continue;
        }
        per_center.push(Some(fid(&rows(real_features, &ri), &rows(fake_features, &fi))?));
    }
    let vals: Vec<f64> = per_center.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(CcdmError::Protocol("every evaluation window is empty on the real or the fake side".into()));
    }
    let (mean, std) = mean_std(&vals);
    Ok(SfidResult { skipped: per_center.len() - vals.len(), per_center, mean, std })
}

/// MAE between denormalized predicted and assigned labels, with the
/// population std of the absolute errors.
pub fn label_score(predicted: &[f64], assigned: &[f64], ls: &LabelSpace) -> Result<(f64, f64)> {
    if predicted.is_empty() {
        return invalid("label score of an empty set");
    }
    if predicted.len() != assigned.len() {
        return Err(CcdmError::Shape("predicted and assigned labels differ in length".into()));
    }
    let errs: Vec<f64> =
        predicted.iter().zip(assigned).map(|(p, a)| (ls.denormalize(*p) - ls.denormalize(*a)).abs()).collect();
    Ok(mean_std(&errs))
}

/// Natural-log entropy of the empirical distribution of `classes`.
pub fn entropy(classes: &[usize], k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    for &c in classes {
        counts[c] += 1;
    }
    let n = classes.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * (n / c as f64).ln()
        })
        .sum::<f64>()
}

/// Per-group entropies of predicted classes, mean and population std over
/// nonempty groups, and the number of empty groups.
pub fn diversity(groups: &[Vec<usize>], k: usize) -> Result<(Vec<Option<f64>>, f64, f64, usize)> {
    if k < 2 {
        return invalid("diversity needs at least 2 classes");
    }
    if let Some(c) = groups.iter().flatten().find(|&&c| c >= k) {
        return invalid(format!("class {c} outside 0..{k}"));
    }
    let per: Vec<Option<f64>> =
        groups.iter().map(|g| (!g.is_empty()).then(|| entropy(g, k))).collect();
    let vals: Vec<f64> = per.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(CcdmError::Protocol("every diversity group is empty".into()));
    }
    let (m, s) = mean_std(&vals);
    Ok((per, m, s, groups.len() - vals.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Regressor,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleMeta {
    pub kind: OracleKind,
    pub image_shape: [i64; 3],
    pub width: i64,
    pub feat_dim: i64,
    pub out_dim: i64,
    pub epochs: usize,
    pub seed: u64,
    pub final_loss: f64,
}

/// Convolutional oracle: a label regressor (output in `[0, 1]`) or a
/// classifier over `out_dim` tags. Its hidden layer is the feature map used
/// for FID.
#[derive(Debug)]
pub struct Oracle {
    pub vs: nn::VarStore,
    net: ConvNet,
    pub meta: OracleMeta,
}

impl Oracle {
    pub fn new(kind: OracleKind, image_shape: [i64; 3], width: i64, feat_dim: i64, out_dim: i64, seed: u64) -> Result<Self> {
        if kind == OracleKind::Classifier && out_dim < 2 {
            return invalid("classifier oracle needs at least 2 classes");
        }
        let out_dim = if kind == OracleKind::Regressor { 1 } else { out_dim };
        let vs = nn::VarStore::new(Device::Cpu);
        let net = ConvNet::new(&(vs.root() / "oracle"), image_shape, width, feat_dim, out_dim)?;
        nets::seeded_init(&vs, seed);
        let meta = OracleMeta { kind, image_shape, width, feat_dim, out_dim, epochs: 0, seed, final_loss: f64::NAN };
        Ok(Self { vs, net, meta })
    }

    /// Fits on `images` with normalized labels (regressor) or tags
    /// (classifier, given as `f64`), Adam 1e-3, batch 64, light random
    /// translation.
    pub fn fit(&mut self, images: &Tensor, targets: &[f64], epochs: usize) -> Result<Vec<f64>> {
        let n = targets.len();
        if images.size()[0] as usize != n || n == 0 {
            return Err(CcdmError::Shape("oracle images and targets differ in length".into()));
        }
        let mut opt = nn::Adam::default().build(&self.vs, 1e-3)?;
        let mut r = rng::stream(self.meta.seed, &[rng::role::DATA, 0x0a]);
        let mut order: Vec<i64> = (0..n as i64).collect();
        let mut losses = Vec::with_capacity(epochs);
        let y_all = match self.meta.kind {
            OracleKind::Regressor => Tensor::from_slice(targets).to_kind(Kind::Float),
            OracleKind::Classifier => {
                Tensor::from_slice(&targets.iter().map(|&t| t as i64).collect::<Vec<_>>())
            }
        };
        for _ in 0..epochs {
            order.shuffle(&mut r);
            let mut total = 0.0;
            for chunk in order.chunks(64) {
                let idx = Tensor::from_slice(chunk);
                let x = images.index_select(0, &idx).to_kind(Kind::Float);
                let y = y_all.index_select(0, &idx);
                let out = self.net.forward_t(&x, true);
                let loss = match self.meta.kind {
                    OracleKind::Regressor => (out.squeeze_dim(1) - y).square().mean(Kind::Float),
                    OracleKind::Classifier => out.cross_entropy_for_logits(&y),
                };
                opt.backward_step(&loss);
                total += loss.double_value(&[]) * chunk.len() as f64;
            }
            losses.push(total / n as f64);
        }
        self.meta.epochs += epochs;
        self.meta.final_loss = losses.last().copied().unwrap_or(f64::NAN);
        Ok(losses)
    }

    pub fn features(&self, images: &Tensor) -> Tensor {
        tch::no_grad(|| nets::batched(&images.to_kind(Kind::Float), 256, |b| self.net.features(b, false)))
    }

    /// Normalized label predictions clamped to `[0, 1]`.
    pub fn predict_labels(&self, images: &Tensor) -> Result<Vec<f64>> {
        if self.meta.kind != OracleKind::Regressor {
            return invalid("label predictions need a regressor oracle");
        }
        let out = tch::no_grad(|| {
            nets::batched(&images.to_kind(Kind::Float), 256, |b| self.net.forward_t(b, false).squeeze_dim(1).clamp(0.0, 1.0))
        });
        Ok(Vec::<f64>::try_from(out.to_kind(Kind::Double))?)
    }

    pub fn predict_classes(&self, images: &Tensor) -> Result<Vec<usize>> {
        if self.meta.kind != OracleKind::Classifier {
            return invalid("class predictions need a classifier oracle");
        }
        let out = tch::no_grad(|| {
            nets::batched(&images.to_kind(Kind::Float), 256, |b| self.net.forward_t(b, false).argmax(1, false))
        });
        Ok(Vec::<i64>::try_from(out)?.into_iter().map(|c| c as usize).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.vs.save(dir.join(ORACLE_WEIGHTS))?;
        std::fs::write(dir.join(ORACLE_META), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(ORACLE_META);
        if !meta_path.exists() {
            return Err(CcdmError::MissingDependency {
                what: format!("oracle {}", meta_path.display()),
                producer: "eval".into(),
            });
        }
        let meta: OracleMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        let mut o = Self::new(meta.kind, meta.image_shape, meta.width, meta.feat_dim, meta.out_dim, meta.seed)?;
        o.vs.load(dir.join(ORACLE_WEIGHTS))?;
        o.meta = meta;
        Ok(o)
    }
}

/// Metrics at one evaluation center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterReport {
    pub center: f64,
    pub center_raw: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub fid: Option<f64>,
    pub label_score: Option<f64>,
    pub diversity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub per_center: Vec<CenterReport>,
    pub sfid_mean: f64,
    pub sfid_std: f64,
    pub sfid_skipped: usize,
    /// Raw label units; mean and population std across centers.
    pub label_score_mean: f64,
    pub label_score_std: f64,
    pub diversity_mean: Option<f64>,
    pub diversity_std: Option<f64>,
    pub diversity_skipped: usize,
    pub entropy_base: String,
    pub n_real: usize,
    pub n_fake: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl EvalReport {
    /// Structural checks: one entry per center, aggregates consistent with
    /// the per-center values.
    pub fn validate(&self) -> Result<()> {
        if self.per_center.len() != self.protocol.centers.len() {
            return Err(CcdmError::Protocol("report has a different number of centers than its protocol".into()));
        }
        let fids: Vec<f64> = self.per_center.iter().filter_map(|c| c.fid).collect();
        let (m, s) = mean_std(&fids);
        if (m - self.sfid_mean).abs() > 1e-9 * (1.0 + m.abs()) || (s - self.sfid_std).abs() > 1e-9 * (1.0 + s.abs()) {
            return Err(CcdmError::Protocol("sfid aggregate disagrees with per-center values".into()));
        }
        if self.per_center.iter().filter(|c| c.fid.is_none()).count() != self.sfid_skipped {
            return Err(CcdmError::Protocol("sfid skip count disagrees with per-center values".into()));
        }
        if self.entropy_base != "e" {
            return Err(CcdmError::Protocol("entropy base must be `e`".into()));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join(CENTERS_CSV))?;
        w.write_record(["center", "center_raw", "n_real", "n_fake", "fid", "label_score", "diversity"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for c in &self.per_center {
            w.write_record([
                format!("{}", c.center),
                format!("{}", c.center_raw),
                c.n_real.to_string(),
                c.n_fake.to_string(),
                opt(c.fid),
                opt(c.label_score),
                opt(c.diversity),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(REPORT_FILE);
        if !path.exists() {
            return Err(CcdmError::MissingDependency { what: format!("report {}", path.display()), producer: "eval".into() });
        }
        let r: EvalReport = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        r.validate()?;
        Ok(r)
    }
}

/// Runs the full protocol on real and generated images (normalized labels).
/// Generated images are grouped by the same windows as SFID for Label Score
/// and Diversity.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    protocol: &EvalProtocol,
    regressor: &Oracle,
    classifier: Option<&Oracle>,
    ls: &LabelSpace,
    real: &Tensor,
    real_labels: &[f64],
    fake: &Tensor,
    fake_labels: &[f64],
) -> Result<EvalReport> {
    protocol.validate()?;
    if fake_labels.is_empty() {
        return invalid("no generated images to evaluate");
    }
    let rf = feature_matrix(&regressor.features(real));
    let ff = feature_matrix(&regressor.features(fake));
    let s = sfid(protocol, &rf, real_labels, &ff, fake_labels)?;
    let preds = regressor.predict_labels(fake)?;
    let classes = classifier.map(|c| c.predict_classes(fake)).transpose()?;
    let mut per_center = Vec::with_capacity(protocol.centers.len());
    let mut groups = Vec::new();
    for (j, &c) in protocol.centers.iter().enumerate() {
        let fi = protocol.window(c, fake_labels);
        let ls_c = if fi.is_empty() {
            None
        } else {
            let p: Vec<f64> = fi.iter().map(|&i| preds[i]).collect();
            let a: Vec<f64> = fi.iter().map(|&i| fake_labels[i]).collect();
            Some(label_score(&p, &a, ls)?.0)
        };
        if let Some(cl) = &classes {
            groups.push(fi.iter().map(|&i| cl[i]).collect::<Vec<_>>());
        }
        per_center.push(CenterReport {
            center: c,
            center_raw: ls.denormalize(c),
            n_real: protocol.window(c, real_labels).len(),
            n_fake: fi.len(),
            fid: s.per_center[j],
            label_score: ls_c,
            diversity: None,
        });
    }
    let scores: Vec<f64> = per_center.iter().filter_map(|c| c.label_score).collect();
    if scores.is_empty() {
        return Err(CcdmError::Protocol("no generated image falls inside any evaluation window".into()));
    }
    let (label_score_mean, label_score_std) = mean_std(&scores);
    let (mut diversity_mean, mut diversity_std, mut diversity_skipped) = (None, None, 0);
    if let Some(c) = classifier {
        let (per, m, sd, skipped) = diversity(&groups, c.meta.out_dim as usize)?;
        for (pc, d) in per_center.iter_mut().zip(per) {
            pc.diversity = d;
        }
        diversity_mean = Some(m);
        diversity_std = Some(sd);
        diversity_skipped = skipped;
    }
    Ok(EvalReport {
        protocol: protocol.clone(),
        per_center,
        sfid_mean: s.mean,
        sfid_std: s.std,
        sfid_skipped: s.skipped,
        label_score_mean,
        label_score_std,
        diversity_mean,
        diversity_std,
        diversity_skipped,
        entropy_base: "e".into(),
        n_real: real_labels.len(),
        n_fake: fake_labels.len(),
        provenance: None,
    })
}
