//! Experiment configuration: one JSON document drives every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::UNetConfig;
use crate::data::GeneratorSpec;
use crate::distill::DistillConfig;
use crate::embednet::EmbedConfig;
use crate::error::{CcdmError, Result};
use crate::sampler::SamplerKind;
use crate::train::{TrainConfig, VicinityMode};

/// A dataset either read from a directory or synthesized by a generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Directory(PathBuf),
    Generator(GeneratorSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Keep only odd raw labels (count datasets).
    #[serde(default)]
    pub odd_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpaceConfig {
    pub m_kappa: u32,
}

impl Default for LabelSpaceConfig {
    fn default() -> Self {
        Self { m_kappa: 1 }
    }
}

/// Denoiser architecture; image shape, prediction type and `T` come from
/// the dataset, the train section and the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub base_channels: i64,
    pub channel_mults: Vec<i64>,
    pub res_blocks: usize,
    pub time_embed_dim: i64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let u = UNetConfig::default();
        Self {
            base_channels: u.base_channels,
            channel_mults: u.channel_mults,
            res_blocks: u.res_blocks,
            time_embed_dim: u.time_embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub t_prime: usize,
    pub gamma: f64,
    pub sampler: SamplerKind,
    /// Raw target labels; the evaluation centers when absent.
    pub labels: Option<Vec<f64>>,
    /// Images per label; `eval.n_per_center` when absent.
    pub n_per_label: Option<usize>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { t_prime: 250, gamma: 1.5, sampler: SamplerKind::Ddim, labels: None, n_per_label: None }
    }
}

/// Evaluation protocol in raw label units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Raw centers; `num_centers` evenly spaced over the raw range when absent.
    pub centers: Option<Vec<f64>>,
    pub num_centers: usize,
    pub n_per_center: usize,
    /// Window radius in raw label units.
    pub r_sfid: f64,
    /// Dense data the oracles are trained on; the real set when absent.
    pub oracle_dataset: Option<DatasetConfig>,
    pub oracle_epochs: usize,
    pub oracle_width: i64,
    pub oracle_feat_dim: i64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            centers: None,
            num_centers: 20,
            n_per_center: 20,
            r_sfid: 0.0,
            oracle_dataset: None,
            oracle_epochs: 30,
            oracle_width: 16,
            oracle_feat_dim: 32,
        }
    }
}

/// Output directories; each command writes only below its own entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub embeddings: PathBuf,
    pub denoiser: PathBuf,
    pub samples: PathBuf,
    pub generator: PathBuf,
    pub oracle: PathBuf,
    pub eval: PathBuf,
}

impl PathsConfig {
    pub fn under(root: &Path) -> Self {
        Self {
            dataset: root.join("dataset"),
            embeddings: root.join("embeddings"),
            denoiser: root.join("denoiser"),
            samples: root.join("samples"),
            generator: root.join("generator"),
            oracle: root.join("oracle"),
            eval: root.join("eval"),
        }
    }

    /// Resolves relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.dataset,
            &mut self.embeddings,
            &mut self.denoiser,
            &mut self.samples,
            &mut self.generator,
            &mut self.oracle,
            &mut self.eval,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self::under(Path::new("run"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub labelspace: LabelSpaceConfig,
    #[serde(default)]
    pub embedding: EmbedConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CcdmError::Config(msg.into()))
}

impl ExperimentConfig {
    /// Parses a config file; relative paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CcdmError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CcdmError::Config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.rebase(base);
        if let DatasetSource::Directory(p) = &mut cfg.dataset.source {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Propagates the top-level seed into every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.embedding.seed = seed;
        self.train.seed = seed;
        self.distill.seed = seed;
        self
    }

    /// Rejects invalid values and combinations before any command runs.
    pub fn validate(&self) -> Result<()> {
        if self.schedule.steps == 0 {
            return config_err("schedule.steps must be at least 1");
        }
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.p_drop) {
            return config_err(format!("train.p_drop must lie in [0, 1], got {}", t.p_drop));
        }
        if t.batch_size == 0 {
            return config_err("train.batch_size must be positive");
        }
        if !(t.lr > 0.0) {
            return config_err("train.lr must be positive");
        }
        if t.vicinity_mode == VicinityMode::Soft && self.labelspace.m_kappa == 0 {
            return config_err(
                "train.vicinity_mode = soft needs kappa > 0, but labelspace.m_kappa = 0; set m_kappa >= 1 or use hard/none",
            );
        }
        if t.vicinity_mode == VicinityMode::Hard && self.labelspace.m_kappa == 0 {
            return config_err("train.vicinity_mode = hard with labelspace.m_kappa = 0 is an empty vicinity; use none");
        }
        let s = &self.sample;
        if s.t_prime == 0 || s.t_prime > self.schedule.steps {
            return config_err(format!("sample.t_prime must lie in [1, {}], got {}", self.schedule.steps, s.t_prime));
        }
        if !s.gamma.is_finite() {
            return config_err("sample.gamma must be finite");
        }
        if t.p_drop == 0.0 && s.gamma != 1.0 {
            return config_err(format!(
                "sample.gamma = {} needs an unconditional branch, but train.p_drop = 0; set gamma = 1 or p_drop > 0",
                s.gamma
            ));
        }
        if s.n_per_label == Some(0) {
            return config_err("sample.n_per_label must be positive");
        }
        let e = &self.eval;
        if let Some(c) = &e.centers {
            if c.is_empty() || c.windows(2).any(|w| w[1] <= w[0]) {
                return config_err("eval.centers must be nonempty and strictly increasing");
            }
        } else if e.num_centers == 0 {
            return config_err("eval.num_centers must be positive");
        }
        if e.n_per_center == 0 {
            return config_err("eval.n_per_center must be positive");
        }
        if !(e.r_sfid >= 0.0 && e.r_sfid.is_finite()) {
            return config_err("eval.r_sfid must be a nonnegative number");
        }
        let d = &self.distill;
        if d.batch_size == 0 || d.width <= 0 {
            return config_err("distill.batch_size and distill.width must be positive");
        }
        if !(d.lr_g > 0.0 && d.lr_d > 0.0 && d.lr_fake > 0.0) {
            return config_err("distill learning rates must be positive");
        }
        if !(d.dm_t_margin >= 0.0 && d.dm_t_margin < 0.5) {
            return config_err("distill.dm_t_margin must lie in [0, 0.5)");
        }
        if let DatasetSource::Generator(g) = &self.dataset.source {
            if !["rotor", "count"].contains(&g.kind.as_str()) {
                return config_err(format!("dataset generator `{}` is unknown (expected rotor or count)", g.kind));
            }
        }
        Ok(())
    }

    /// Denoiser architecture for images of `image_shape`.
    pub fn unet_config(&self, image_shape: [i64; 3]) -> UNetConfig {
        UNetConfig {
            image_shape,
            base_channels: self.model.base_channels,
            channel_mults: self.model.channel_mults.clone(),
            res_blocks: self.model.res_blocks,
            time_embed_dim: self.model.time_embed_dim,
            pred_type: self.train.pred_type,
            steps: self.schedule.steps,
            ..Default::default()
        }
    }

    /// SHA-256 of the canonical JSON of the whole config.
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_value(self).unwrap_or_default())
    }

    /// Hashes of the sections a downstream artifact must agree on.
    pub fn section_hashes(&self) -> SectionHashes {
        let h = |v: serde_json::Value| hash_json(&v);
        SectionHashes {
            dataset: h(serde_json::to_value(&self.dataset).unwrap_or_default()),
            schedule: h(serde_json::to_value(&self.schedule).unwrap_or_default()),
            labelspace: h(serde_json::to_value(&self.labelspace).unwrap_or_default()),
        }
    }
}

pub fn hash_json(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionHashes {
    pub dataset: String,
    pub schedule: String,
    pub labelspace: String,
}

pub const PROVENANCE_FILE: &str = "provenance.json";

/// Written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub command: String,
    pub config_hash: String,
    pub sections: SectionHashes,
    pub version: String,
    pub seed: u64,
}

impl ProvenanceRecord {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            config_hash: cfg.hash(),
            sections: cfg.section_hashes(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(PROVENANCE_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// `None` when the directory carries no record.
    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let p = dir.join(PROVENANCE_FILE);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&std::fs::read_to_string(p)?)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        serde_json::from_value(serde_json::json!({
            "dataset": {"source": {"generator": {"type": "rotor", "params": {"n_angles": 5, "per_angle": 2, "size": 16, "max_angle": 90.0, "jitter": true}, "seed": 1}}}
        }))
        .unwrap()
    }

    #[test]
    fn defaults_validate() {
        base().validate().unwrap();
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        let mut c = base();
        c.train.vicinity_mode = VicinityMode::Soft;
        c.labelspace.m_kappa = 0;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("m_kappa"), "{e}");

        let mut c = base();
        c.train.p_drop = 0.0;
        c.sample.gamma = 1.5;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("p_drop") && e.contains("gamma"), "{e}");
        c.sample.gamma = 1.0;
        c.validate().unwrap();

        let mut c = base();
        c.sample.t_prime = 5000;
        assert!(matches!(c.validate(), Err(CcdmError::Config(_))));

        let mut c = base();
        c.eval.centers = Some(vec![10.0, 5.0]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_fields_and_values_fail_to_parse() {
        let bad = serde_json::json!({"dataset": {"source": {"generator": {"type": "rotor", "params": {}, "seed": 1}}}, "train": {"vicinity_mode": "wide"}});
        assert!(serde_json::from_value::<ExperimentConfig>(bad).is_err());
    }

    #[test]
    fn hashes_track_sections() {
        let a = base();
        let mut b = base();
        b.sample.gamma = 3.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.section_hashes(), b.section_hashes());
        b.schedule.steps = 10;
        assert_ne!(a.section_hashes().schedule, b.section_hashes().schedule);
        assert_eq!(a.hash(), base().hash());
    }

    #[test]
    fn seed_reaches_every_stage() {
        let c = base().with_seed(42);
        assert_eq!((c.seed, c.embedding.seed, c.train.seed, c.distill.seed), (42, 42, 42, 42));
    }
}
