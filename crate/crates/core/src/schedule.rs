//! Variance schedule and the per-step coefficients derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip applied to every beta.
pub const BETA_CLIP: f64 = 0.999;

/// Noise schedule for `T` diffusion steps.
///
/// `betas[t - 1]` and `alphas[t - 1]` hold the values for step `t` in `1..=T`;
/// `alpha_bars[t]` holds the cumulative product for `t` in `0..=T` with
/// `alpha_bars[0] == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    meta: ScheduleMeta,
}

/// The serialized form of a schedule; arrays are rebuilt on load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub steps: usize,
    pub s_offset: f64,
    pub beta_clip: f64,
}

/// Coefficients of a single step `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub alpha: f64,
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
    /// `(1 - alpha)(1 - alpha_bar_prev) / (1 - alpha_bar)`.
    pub posterior_variance: f64,
}

fn cosine_f(t: f64, steps: f64, s: f64) -> f64 {
    let x = ((t / steps + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

impl NoiseSchedule {
    /// The improved-DDPM cosine schedule with the standard offset and clip.
    pub fn cosine(steps: usize) -> Result<Self> {
        Self::cosine_with(steps, COSINE_OFFSET, BETA_CLIP)
    }

    pub fn cosine_with(steps: usize, s_offset: f64, beta_clip: f64) -> Result<Self> {
        if steps < 2 {
            return invalid(format!("schedule needs T >= 2, got {steps}"));
        }
        if !(0.0..1.0).contains(&s_offset) || !(0.0..=1.0).contains(&beta_clip) {
            return invalid("cosine offset must lie in [0,1) and beta clip in [0,1]");
        }
        let tf = steps as f64;
        let f0 = cosine_f(0.0, tf, s_offset);
        let betas: Vec<f64> = (1..=steps)
            .map(|t| {
                let prev = cosine_f((t - 1) as f64, tf, s_offset) / f0;
                let cur = cosine_f(t as f64, tf, s_offset) / f0;
                (1.0 - cur / prev).clamp(0.0, beta_clip)
            })
            .collect();
        let meta = ScheduleMeta { steps, s_offset, beta_clip };
        Ok(Self::from_betas_unchecked(betas, meta))
    }

    /// Builds a schedule from explicit cumulative products `alpha_bars[1..=T]`
    /// (`alpha_bars[0] = 1` is implied). Used for hand-built test schedules.
    pub fn from_alpha_bars(alpha_bars: &[f64]) -> Result<Self> {
        if alpha_bars.len() < 2 {
            return invalid("need at least two steps");
        }
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(alpha_bars.len());
        for &ab in alpha_bars {
            if !(ab > 0.0 && ab <= prev) {
                return invalid(format!("alpha_bar sequence must be in (0,1] and nonincreasing, got {ab}"));
            }
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let steps = alpha_bars.len();
        let mut out = Self::from_betas_unchecked(
            betas,
            ScheduleMeta { steps, s_offset: f64::NAN, beta_clip: 1.0 },
        );
        // keep the caller's values exactly
        out.alpha_bars[1..].copy_from_slice(alpha_bars);
        Ok(out)
    }

    fn from_betas_unchecked(betas: Vec<f64>, meta: ScheduleMeta) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let last = *alpha_bars.last().unwrap();
            alpha_bars.push(last * a);
        }
        Self { steps: betas.len(), betas, alphas, alpha_bars, meta }
    }

    pub fn from_meta(meta: &ScheduleMeta) -> Result<Self> {
        Self::cosine_with(meta.steps, meta.s_offset, meta.beta_clip)
    }

    pub fn meta(&self) -> ScheduleMeta {
        self.meta
    }

    /// Number of training steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| crate::CcdmError::InvalidArgument(format!("time step {t} outside [0, {}]", self.steps)))
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return invalid(format!("time step {t} outside [1, {}]", self.steps));
        }
        Ok(())
    }

    pub fn coefficients_at(&self, t: usize) -> Result<StepCoefficients> {
        self.check_step(t)?;
        let alpha = self.alphas[t - 1];
        let alpha_bar = self.alpha_bars[t];
        let alpha_bar_prev = self.alpha_bars[t - 1];
        Ok(StepCoefficients {
            alpha,
            alpha_bar,
            alpha_bar_prev,
            posterior_variance: posterior_variance(alpha, alpha_bar_prev, alpha_bar),
        })
    }
}

/// `(1 - alpha)(1 - alpha_bar_prev) / (1 - alpha_bar)`, zero when the step adds no noise.
pub fn posterior_variance(alpha: f64, alpha_bar_prev: f64, alpha_bar: f64) -> f64 {
    let denom = 1.0 - alpha_bar;
    if denom <= 0.0 {
        return 0.0;
    }
    (1.0 - alpha) * (1.0 - alpha_bar_prev) / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_short_schedules() {
        assert!(NoiseSchedule::cosine(1).is_err());
        assert!(NoiseSchedule::cosine(0).is_err());
        assert!(NoiseSchedule::cosine(2).is_ok());
    }

    #[test]
    fn cosine_1000_endpoints() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(s.alpha_bars()[0], 1.0);
        // high-precision evaluation of the clipped recursion: 2.4287669e-9
        let ab = s.alpha_bars()[1000];
        assert!(ab < 1e-3);
        assert!((ab - 2.428_766_907_034_468e-9).abs() / 2.43e-9 < 1e-6, "{ab}");
        assert!((s.alpha_bars()[500] - 0.493_843_590_440_637_7).abs() < 1e-12);
    }

    #[test]
    fn small_schedule_is_clipped_and_monotone() {
        let s = NoiseSchedule::cosine(10).unwrap();
        for w in s.betas().windows(2) {
            assert!(w[0] <= w[1]);
        }
        assert!(s.betas().iter().all(|&b| (0.0..=BETA_CLIP).contains(&b)));
        assert_eq!(*s.betas().last().unwrap(), BETA_CLIP);
    }

    #[test]
    fn posterior_variance_examples() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(s.coefficients_at(1).unwrap().posterior_variance, 0.0);
        // alpha = 0.9, alpha_bar_prev = 0.5
        let s2 = NoiseSchedule::from_alpha_bars(&[0.5, 0.45]).unwrap();
        let c = s2.coefficients_at(2).unwrap();
        assert!((c.alpha - 0.9).abs() < 1e-15);
        assert!((c.posterior_variance - 0.090_909_090_909_090_91).abs() < 1e-14);
        assert_eq!(posterior_variance(1.0, 0.5, 0.5), 0.0);
        assert!(s.coefficients_at(0).is_err());
        assert!(s.coefficients_at(1001).is_err());
    }

    #[test]
    fn rebuilds_bit_identically_from_meta() {
        let a = NoiseSchedule::cosine(257).unwrap();
        let b = NoiseSchedule::from_meta(&a.meta()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn schedule_invariants(steps in 2usize..1500) {
            let s = NoiseSchedule::cosine(steps).unwrap();
            let ab = s.alpha_bars();
            prop_assert_eq!(ab[0], 1.0);
            for t in 1..=steps {
                let prod = s.alphas()[t - 1] * ab[t - 1];
                prop_assert!((prod - ab[t]).abs() <= 1e-12 * ab[t].max(f64::MIN_POSITIVE));
                prop_assert!(ab[t] > 0.0 && ab[t] <= 1.0);
                if s.betas()[t - 1] > 0.0 {
                    prop_assert!(ab[t] < ab[t - 1]);
                }
                let v = s.coefficients_at(t).unwrap().posterior_variance;
                prop_assert!((0.0..1.0).contains(&v));
            }
        }
    }
}
