//! The commands behind the command-line verbs. Each reads its inputs from
//! the directories named in the config, writes only below its own output
//! directory and leaves a provenance record there.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::config::{hash_json, DatasetConfig, DatasetSource, ExperimentConfig, ProvenanceRecord};
use crate::data::{self, Dataset};
use crate::denoiser::{self, build_unet, DenoiserMeta};
use crate::distill::{self, DistillState, GeneratorMeta};
use crate::embednet::EmbeddingNets;
use crate::error::{CcdmError, Result};
use crate::labelspace::LabelSpace;
use crate::metrics::{self, EvalProtocol, EvalReport, Oracle, OracleKind};
use crate::plot;
use crate::sampler::{self, SampleOutput, SampleRequest};
use crate::schedule::NoiseSchedule;
use crate::train::{self, TrainData, TrainOutput, TrainReport};

pub const EMBED_REPORT: &str = "embedding_report.json";
pub const DISTILL_TRACE: &str = "distill_trace.json";
const ORACLE_KEY: &str = "oracle_key.json";

/// Caps the intra-op thread pool.
pub fn set_workers(n: usize) {
    if n > 0 {
        tch::set_num_threads(n as i32);
    }
}

/// Builds the dataset described by `spec` in memory.
pub fn build_dataset(spec: &DatasetConfig) -> Result<Dataset> {
    let ds = match &spec.source {
        DatasetSource::Directory(p) => data::load_dataset(p)?,
        DatasetSource::Generator(g) => data::generate(g)?,
    };
    if spec.odd_only {
        data::odd_count_subset(&ds)
    } else {
        Ok(ds)
    }
}

/// Directory holding the training dataset.
pub fn dataset_dir(cfg: &ExperimentConfig) -> PathBuf {
    match (&cfg.dataset.source, cfg.dataset.odd_only) {
        (DatasetSource::Directory(p), false) => p.clone(),
        _ => cfg.paths.dataset.clone(),
    }
}

pub fn load_training_set(cfg: &ExperimentConfig) -> Result<(Dataset, LabelSpace)> {
    let ds = data::load_dataset(&dataset_dir(cfg))?;
    let ls = LabelSpace::from_raw(&ds.raw_labels, cfg.labelspace.m_kappa)?;
    Ok((ds, ls))
}

fn normalized(ls: &LabelSpace, raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|&r| ls.normalize(r).clamp(0.0, 1.0)).collect()
}

/// Writes the training dataset (generator sources and filtered subsets).
pub fn cmd_make_dataset(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = dataset_dir(cfg);
    if let (DatasetSource::Directory(_), false) = (&cfg.dataset.source, cfg.dataset.odd_only) {
        let ds = data::load_dataset(&dir)?;
        log::info!("dataset at {} already in place: {} images", dir.display(), ds.len());
        return Ok(dir);
    }
    let ds = build_dataset(&cfg.dataset)?;
    ds.save(&dir)?;
    ProvenanceRecord::new("make-dataset", cfg).write(&dir)?;
    log::info!("wrote {} images to {}", ds.len(), dir.display());
    Ok(dir)
}

pub fn cmd_train_embeddings(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let (ds, ls) = load_training_set(cfg)?;
    let (nets, report) = EmbeddingNets::train(&ds.images(), &ls.labels, &ls.distinct, &cfg.embedding)?;
    let dir = &cfg.paths.embeddings;
    nets.save(dir)?;
    std::fs::write(dir.join(EMBED_REPORT), serde_json::to_string_pretty(&report)?)?;
    ProvenanceRecord::new("train-embeddings", cfg).write(dir)?;
    Ok(dir.clone())
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let (ds, ls) = load_training_set(cfg)?;
    let nets = EmbeddingNets::load(&cfg.paths.embeddings)?;
    let schedule = NoiseSchedule::cosine(cfg.schedule.steps)?;
    let unet = build_unet(cfg.unet_config(ds.shape_i64()), cfg.train.seed)?;
    let images = ds.images();
    let data = TrainData::new(&ls, &images)?;
    let meta = DenoiserMeta {
        unet: unet.config.clone(),
        schedule: schedule.meta(),
        labelspace: ls.meta(),
        p_drop: cfg.train.p_drop,
        trained_steps: 0,
        seed: cfg.train.seed,
    };
    let dir = &cfg.paths.denoiser;
    let report =
        train::train_loop(&unet, &data, &nets, &schedule, &cfg.train, Some(TrainOutput { dir, meta: meta.clone() }))?;
    if cfg.train.steps == 0 {
        denoiser::save_checkpoint(&unet, &meta, dir)?;
    }
    ProvenanceRecord::new("train", cfg).write(dir)?;
    Ok(report)
}

/// Raw evaluation centers: explicit, or evenly spaced over the raw range.
pub fn eval_centers_raw(cfg: &ExperimentConfig, ls: &LabelSpace) -> Vec<f64> {
    match &cfg.eval.centers {
        Some(c) => c.clone(),
        None => {
            let p = EvalProtocol::evenly_spaced(ls.raw_min, ls.raw_max, cfg.eval.num_centers, 0, 0.0);
            p.centers
        }
    }
}

fn check_in_range(ls: &LabelSpace, raw: &[f64], what: &str) -> Result<()> {
    let tol = 1e-9 * (1.0 + ls.raw_span());
    if let Some(r) = raw.iter().find(|&&r| r < ls.raw_min - tol || r > ls.raw_max + tol) {
        return Err(CcdmError::Config(format!(
            "{what} {r} lies outside the training label range [{}, {}]",
            ls.raw_min, ls.raw_max
        )));
    }
    Ok(())
}

fn check_labelspace(meta: &crate::labelspace::LabelSpaceMeta, ls: &LabelSpace, what: &str) -> Result<()> {
    if *meta != ls.meta() {
        return Err(CcdmError::Config(format!(
            "{what} was trained on a different label space than the configured dataset; rerun the producing command"
        )));
    }
    Ok(())
}

/// Generates images at the sample labels: with the multi-step sampler, or
/// with the distilled generator when `one_step` is set.
pub fn cmd_sample(cfg: &ExperimentConfig, one_step: bool) -> Result<SampleOutput> {
    cfg.validate()?;
    let (_, ls) = load_training_set(cfg)?;
    let nets = EmbeddingNets::load(&cfg.paths.embeddings)?;
    let raw = cfg.sample.labels.clone().unwrap_or_else(|| eval_centers_raw(cfg, &ls));
    check_in_range(&ls, &raw, "sample label")?;
    let n = cfg.sample.n_per_label.unwrap_or(cfg.eval.n_per_center);
    let targets = normalized(&ls, &raw);
    let out = if one_step {
        let (g, meta) = distill::load_generator(&cfg.paths.generator)?;
        check_labelspace(&meta.labelspace, &ls, "the generator")?;
        distill::sample_one_step(&g, &nets, &targets, n, cfg.seed)?
    } else {
        let (unet, meta) = denoiser::load_checkpoint(&cfg.paths.denoiser)?;
        check_labelspace(&meta.labelspace, &ls, "the denoiser")?;
        if meta.schedule.steps != cfg.schedule.steps {
            return Err(CcdmError::Config(format!(
                "the denoiser was trained with T = {} but schedule.steps = {}",
                meta.schedule.steps, cfg.schedule.steps
            )));
        }
        let schedule = NoiseSchedule::from_meta(&meta.schedule)?;
        let req = SampleRequest {
            y_targets: targets,
            n_per_label: n,
            t_prime: cfg.sample.t_prime,
            gamma: cfg.sample.gamma,
            seed: cfg.seed,
            sampler: cfg.sample.sampler,
        };
        req.validate(&schedule, meta.p_drop)?;
        sampler::sample(&unet, &nets, &schedule, &req, meta.p_drop)?
    };
    sampler::write_samples(&cfg.paths.samples, &out, &ls)?;
    ProvenanceRecord::new(if one_step { "sample-one-step" } else { "sample" }, cfg).write(&cfg.paths.samples)?;
    Ok(out)
}

pub fn cmd_distill(cfg: &ExperimentConfig) -> Result<Vec<distill::DistillRecord>> {
    cfg.validate()?;
    let (ds, ls) = load_training_set(cfg)?;
    let nets = EmbeddingNets::load(&cfg.paths.embeddings)?;
    let (unet, meta) = denoiser::load_checkpoint(&cfg.paths.denoiser)?;
    check_labelspace(&meta.labelspace, &ls, "the denoiser")?;
    let schedule = NoiseSchedule::from_meta(&meta.schedule)?;
    let mut state = DistillState::new(&unet, cfg.distill.clone())?;
    let images = ds.images();
    let records = distill::distill_loop(&mut state, &ls, &images, &nets, &schedule, 0, &mut |_, _| Ok(()))?;
    let d = &cfg.distill;
    let gmeta = GeneratorMeta {
        z_dim: distill::Z_DIM,
        image_shape: ds.shape_i64(),
        width: d.width,
        w_d: d.w_d,
        w_g: d.w_g,
        policy: d.policy.clone(),
        m_kappa: d.m_kappa,
        gan_loss: d.gan_loss,
        steps: d.steps,
        seed: generator_seed(d.seed),
        labelspace: ls.meta(),
    };
    let dir = &cfg.paths.generator;
    distill::save_generator(&state.generator, &gmeta, dir)?;
    std::fs::write(dir.join(DISTILL_TRACE), serde_json::to_string(&records)?)?;
    ProvenanceRecord::new("distill", cfg).write(dir)?;
    Ok(records)
}

/// Seed the distillation state uses for its generator.
pub fn generator_seed(seed: u64) -> u64 {
    DistillState::generator_seed(seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OracleKey {
    dataset: String,
    epochs: usize,
    width: i64,
    feat_dim: i64,
    seed: u64,
}

/// Trained oracles, reused from `paths.oracle` when their key matches.
pub fn oracles(cfg: &ExperimentConfig, real: &Dataset, ls: &LabelSpace) -> Result<(Oracle, Option<Oracle>)> {
    let e = &cfg.eval;
    let key = OracleKey {
        dataset: hash_json(&serde_json::to_value(e.oracle_dataset.as_ref().unwrap_or(&cfg.dataset))?),
        epochs: e.oracle_epochs,
        width: e.oracle_width,
        feat_dim: e.oracle_feat_dim,
        seed: cfg.seed,
    };
    let dir = &cfg.paths.oracle;
    let key_path = dir.join(ORACLE_KEY);
    if key_path.exists() {
        let stored: OracleKey = serde_json::from_str(&std::fs::read_to_string(&key_path)?)?;
        if stored == key {
            let reg = Oracle::load(&dir.join("regressor"))?;
            let cls = if dir.join("classifier").join(metrics::ORACLE_META).exists() {
                Some(Oracle::load(&dir.join("classifier"))?)
            } else {
                None
            };
            return Ok((reg, cls));
        }
    }
    let owned;
    let train_set = match &e.oracle_dataset {
        Some(spec) => {
            owned = build_dataset(spec)?;
            &owned
        }
        None => real,
    };
    if train_set.shape != real.shape {
        return Err(CcdmError::Config("eval.oracle_dataset images differ in shape from the real set".into()));
    }
    let images = train_set.images();
    let labels = normalized(ls, &train_set.raw_labels);
    let mut reg = Oracle::new(OracleKind::Regressor, train_set.shape_i64(), e.oracle_width, e.oracle_feat_dim, 1, cfg.seed)?;
    reg.fit(&images, &labels, e.oracle_epochs)?;
    reg.save(&dir.join("regressor"))?;
    let cls = match (&train_set.class_tags, train_set.num_classes()) {
        (Some(tags), Some(k)) if k >= 2 => {
            let mut c =
                Oracle::new(OracleKind::Classifier, train_set.shape_i64(), e.oracle_width, e.oracle_feat_dim, k as i64, cfg.seed ^ 1)?;
            let t: Vec<f64> = tags.iter().map(|&v| v as f64).collect();
            c.fit(&images, &t, e.oracle_epochs)?;
            c.save(&dir.join("classifier"))?;
            Some(c)
        }
        _ => None,
    };
    std::fs::write(&key_path, serde_json::to_string_pretty(&key)?)?;
    Ok((reg, cls))
}

/// Evaluates `fake_dir` against `real_dir` and writes the report and plots.
/// Fails on schedule or label-space hash mismatches between the fake set's
/// provenance and the config unless `allow_mismatch` is set.
pub fn cmd_eval(cfg: &ExperimentConfig, real_dir: &Path, fake_dir: &Path, allow_mismatch: bool) -> Result<EvalReport> {
    cfg.validate()?;
    let real = data::load_dataset(real_dir)?;
    let fake = data::load_dataset(fake_dir).map_err(|e| match e {
        CcdmError::MissingDependency { what, .. } => CcdmError::MissingDependency { what, producer: "sample".into() },
        other => other,
    })?;
    if let Some(p) = ProvenanceRecord::read(fake_dir)? {
        let mine = cfg.section_hashes();
        let mut bad = Vec::new();
        if p.sections.schedule != mine.schedule {
            bad.push("schedule");
        }
        if p.sections.labelspace != mine.labelspace {
            bad.push("labelspace");
        }
        if !bad.is_empty() && !allow_mismatch {
            return Err(CcdmError::Config(format!(
                "{} was produced with a different {} config; pass --allow-mismatch to evaluate anyway",
                fake_dir.display(),
                bad.join(" and ")
            )));
        }
    }
    if real.shape != fake.shape {
        return Err(CcdmError::Shape("real and generated images differ in shape".into()));
    }
    let ls = match data::load_dataset(&dataset_dir(cfg)) {
        Ok(train) => LabelSpace::from_raw(&train.raw_labels, cfg.labelspace.m_kappa)?,
        Err(CcdmError::MissingDependency { .. }) => LabelSpace::from_raw(&real.raw_labels, cfg.labelspace.m_kappa)?,
        Err(e) => return Err(e),
    };
    let centers_raw = eval_centers_raw(cfg, &ls);
    check_in_range(&ls, &centers_raw, "evaluation center")?;
    let protocol = EvalProtocol {
        centers: normalized(&ls, &centers_raw),
        n_per_center: cfg.eval.n_per_center,
        r_sfid: cfg.eval.r_sfid / ls.raw_span(),
    };
    let (reg, cls) = oracles(cfg, &real, &ls)?;
    let mut report = metrics::evaluate(
        &protocol,
        &reg,
        cls.as_ref(),
        &ls,
        &real.images(),
        &normalized(&ls, &real.raw_labels),
        &fake.images(),
        &normalized(&ls, &fake.raw_labels),
    )?;
    report.provenance = Some(serde_json::to_value(ProvenanceRecord::new("eval", cfg))?);
    report.write(&cfg.paths.eval)?;
    plot::write_report_plots(&report, &cfg.paths.eval)?;
    Ok(report)
}

/// Re-renders the plots of an existing report.
pub fn cmd_plot(report_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let report = EvalReport::read(report_dir)?;
    plot::write_report_plots(&report, out_dir)
}

/// Images of a dataset as a tensor plus normalized labels.
pub fn tensors(ds: &Dataset, ls: &LabelSpace) -> (Tensor, Vec<f64>) {
    (ds.images(), normalized(ls, &ds.raw_labels))
}
