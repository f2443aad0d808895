//! Label normalization, vicinity hyperparameters and vicinal weights.
//!
//! All hyperparameters are chosen on labels normalized to `[0, 1]`:
//! the KDE bandwidth `sigma_delta` by the rule-of-thumb formula, the hard
//! radius `kappa = m_kappa * kappa_base` where `kappa_base` is the largest gap
//! between consecutive distinct labels, and the soft rate `nu = 1 / kappa^2`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpace {
    pub raw_min: f64,
    pub raw_max: f64,
    pub labels: Vec<f64>,
    pub distinct: Vec<f64>,
    pub sigma_delta: f64,
    pub kappa_base: f64,
    pub m_kappa: u32,
    pub kappa: f64,
    /// `None` when `kappa == 0` (vicinity disabled).
    pub nu: Option<f64>,
}

/// Label-space parameters persisted alongside checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelSpaceMeta {
    pub raw_min: f64,
    pub raw_max: f64,
    pub sigma_delta: f64,
    pub m_kappa: u32,
    pub kappa: f64,
    pub nu: Option<f64>,
    pub n: usize,
    pub n_distinct: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VicinityParams {
    pub kappa_base: f64,
    pub kappa: f64,
    pub nu: Option<f64>,
}

/// Min-max normalized labels together with the bounds used.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLabels {
    pub raw_min: f64,
    pub raw_max: f64,
    pub labels: Vec<f64>,
}

impl NormalizedLabels {
    pub fn denormalize(&self, y: f64) -> f64 {
        denormalize(y, self.raw_min, self.raw_max)
    }
}

pub fn normalize_labels(raw: &[f64]) -> Result<NormalizedLabels> {
    if raw.len() < 2 {
        return invalid(format!("need at least 2 labels, got {}", raw.len()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return invalid("labels must be finite");
    }
    let raw_min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let raw_max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw_max <= raw_min {
        return invalid("labels are constant; the normalization range is degenerate");
    }
    let labels = raw.iter().map(|&r| normalize(r, raw_min, raw_max)).collect();
    Ok(NormalizedLabels { raw_min, raw_max, labels })
}

pub fn normalize(raw: f64, raw_min: f64, raw_max: f64) -> f64 {
    (raw - raw_min) / (raw_max - raw_min)
}

pub fn denormalize(y: f64, raw_min: f64, raw_max: f64) -> f64 {
    raw_min + y * (raw_max - raw_min)
}

/// Sorted distinct values, compared with exact equality.
pub fn distinct_sorted(labels: &[f64]) -> Vec<f64> {
    let mut v = labels.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v
}

/// Rule-of-thumb KDE bandwidth `(4 s^5 / (3 N))^(1/5)` with `s` the sample
/// standard deviation (divisor `N - 1`).
pub fn kde_bandwidth(labels: &[f64]) -> Result<f64> {
    let n = labels.len();
    if n < 2 {
        return invalid("bandwidth needs at least 2 labels");
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return invalid("sample standard deviation is zero (all labels identical)");
    }
    let mean = labels.iter().sum::<f64>() / n as f64;
    let var = labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return invalid("sample standard deviation is zero (all labels identical)");
    }
    Ok((4.0 * sd.powi(5) / (3.0 * n as f64)).powf(0.2))
}

pub fn vicinity_params(distinct: &[f64], m_kappa: u32) -> Result<VicinityParams> {
    if distinct.len() < 2 {
        return invalid(format!("need at least 2 distinct labels, got {}", distinct.len()));
    }
    let kappa_base = distinct
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f64::max);
    let kappa = m_kappa as f64 * kappa_base;
    let nu = (kappa > 0.0).then(|| 1.0 / (kappa * kappa));
    Ok(VicinityParams { kappa_base, kappa, nu })
}

/// Hard vicinal weight: 1 if `|y_target - y_i| <= kappa`, else 0.
pub fn hard_weight(y_target: f64, y_i: f64, kappa: f64) -> f64 {
    if (y_target - y_i).abs() <= kappa {
        1.0
    } else {
        0.0
    }
}

/// Soft vicinal weight `exp(-nu (y_target - y_i)^2)`.
pub fn soft_weight(y_target: f64, y_i: f64, nu: f64) -> f64 {
    (-nu * (y_target - y_i).powi(2)).exp()
}

impl LabelSpace {
    pub fn from_raw(raw: &[f64], m_kappa: u32) -> Result<Self> {
        let norm = normalize_labels(raw)?;
        let distinct = distinct_sorted(&norm.labels);
        let sigma_delta = kde_bandwidth(&norm.labels)?;
        let vp = vicinity_params(&distinct, m_kappa)?;
        Ok(Self {
            raw_min: norm.raw_min,
            raw_max: norm.raw_max,
            labels: norm.labels,
            distinct,
            sigma_delta,
            kappa_base: vp.kappa_base,
            m_kappa,
            kappa: vp.kappa,
            nu: vp.nu,
        })
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        normalize(raw, self.raw_min, self.raw_max)
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        denormalize(y, self.raw_min, self.raw_max)
    }

    /// Width of the raw label range.
    pub fn raw_span(&self) -> f64 {
        self.raw_max - self.raw_min
    }

    pub fn meta(&self) -> LabelSpaceMeta {
        LabelSpaceMeta {
            raw_min: self.raw_min,
            raw_max: self.raw_max,
            sigma_delta: self.sigma_delta,
            m_kappa: self.m_kappa,
            kappa: self.kappa,
            nu: self.nu,
            n: self.labels.len(),
            n_distinct: self.distinct.len(),
        }
    }
}
