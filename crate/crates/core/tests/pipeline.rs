use std::path::Path;
use std::process::Command;

use ccdm::config::{ExperimentConfig, PathsConfig, ProvenanceRecord};
use ccdm::pipeline;
use ccdm::CcdmError;
use serde_json::json;

fn tiny_config(root: &Path) -> ExperimentConfig {
    let v = json!({
        "dataset": {"source": {"generator": {"type": "rotor",
            "params": {"n_angles": 6, "per_angle": 4, "size": 16, "max_angle": 90.0, "jitter": true}, "seed": 3}}},
        "seed": 5,
        "schedule": {"steps": 50},
        "embedding": {"aux_epochs": 2, "aux_width": 8, "phi_steps": 30, "long_hidden": 32, "short_hidden": 32},
        "model": {"base_channels": 8, "channel_mults": [1, 2], "res_blocks": 1, "time_embed_dim": 32},
        "train": {"steps": 12, "batch_size": 8, "lr": 1e-3},
        "sample": {"t_prime": 5, "gamma": 1.5},
        "eval": {"num_centers": 3, "n_per_center": 4, "r_sfid": 20.0, "oracle_epochs": 2, "oracle_width": 8, "oracle_feat_dim": 8},
        "distill": {"steps": 3, "batch_size": 4, "width": 8}
    });
    let mut cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
    cfg.paths = PathsConfig::under(root);
    cfg = cfg.clone().with_seed(cfg.seed);
    cfg.validate().unwrap();
    cfg
}

fn prepared(root: &Path) -> ExperimentConfig {
    let cfg = tiny_config(root);
    pipeline::cmd_make_dataset(&cfg).unwrap();
    pipeline::cmd_train_embeddings(&cfg).unwrap();
    cfg
}

#[test]
fn training_reruns_reproduce_the_trace_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path());
    let mut again = cfg.clone();
    again.paths.denoiser = dir.path().join("denoiser_again");
    let a = pipeline::cmd_train(&cfg).unwrap();
    let b = pipeline::cmd_train(&again).unwrap();
    assert_eq!(a.trace, b.trace);
    let read = |p: &Path, f: &str| std::fs::read(p.join(f)).unwrap();
    assert_eq!(read(&cfg.paths.denoiser, "trace.jsonl"), read(&again.paths.denoiser, "trace.jsonl"));
    assert_eq!(
        read(&cfg.paths.denoiser, ccdm::denoiser::WEIGHTS_FILE),
        read(&again.paths.denoiser, ccdm::denoiser::WEIGHTS_FILE)
    );
    let prov = ProvenanceRecord::read(&cfg.paths.denoiser).unwrap().unwrap();
    assert_eq!(prov.command, "train");
    assert_eq!(prov.config_hash, cfg.hash());
}

#[test]
fn full_pipeline_writes_samples_report_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path());
    pipeline::cmd_train(&cfg).unwrap();
    let out = pipeline::cmd_sample(&cfg, false).unwrap();
    assert_eq!(out.labels.len(), 12);
    let again = pipeline::cmd_sample(&cfg, false).unwrap();
    assert!(out.images.equal(&again.images));

    let report = pipeline::cmd_eval(&cfg, &pipeline::dataset_dir(&cfg), &cfg.paths.samples, false).unwrap();
    report.validate().unwrap();
    assert_eq!(report.per_center.len(), 3);
    assert_eq!(report.n_fake, 12);
    for f in ["eval_report.json", "eval_centers.csv", "fid.svg", "label_score.svg"] {
        assert!(cfg.paths.eval.join(f).exists(), "{f}");
    }
    let replot = dir.path().join("replot");
    assert_eq!(pipeline::cmd_plot(&cfg.paths.eval, &replot).unwrap().len(), 3);

    pipeline::cmd_distill(&cfg).unwrap();
    let fast = pipeline::cmd_sample(&cfg, true).unwrap();
    assert_eq!(fast.labels, out.labels);
}

#[test]
fn evaluating_the_real_set_against_itself_gives_zero_sfid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    pipeline::cmd_make_dataset(&cfg).unwrap();
    let real = pipeline::dataset_dir(&cfg);
    let report = pipeline::cmd_eval(&cfg, &real, &real, false).unwrap();
    assert!(report.sfid_mean.abs() < 1e-6, "{}", report.sfid_mean);
    assert!(report.per_center.iter().all(|c| c.fid.is_some()));
}

#[test]
fn missing_inputs_name_the_producing_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let producer = |e: CcdmError| match e {
        CcdmError::MissingDependency { producer, .. } => producer,
        other => panic!("expected a missing dependency, got {other}"),
    };
    assert_eq!(producer(pipeline::cmd_train(&cfg).unwrap_err()), "make-dataset");
    pipeline::cmd_make_dataset(&cfg).unwrap();
    assert_eq!(producer(pipeline::cmd_train(&cfg).unwrap_err()), "train-embeddings");
    pipeline::cmd_train_embeddings(&cfg).unwrap();
    assert_eq!(producer(pipeline::cmd_sample(&cfg, false).unwrap_err()), "train");
    assert_eq!(producer(pipeline::cmd_sample(&cfg, true).unwrap_err()), "distill");
    let err = pipeline::cmd_eval(&cfg, &pipeline::dataset_dir(&cfg), &cfg.paths.samples, false).unwrap_err();
    assert_eq!(producer(err), "sample");
}

#[test]
fn eval_refuses_samples_from_a_different_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path());
    pipeline::cmd_train(&cfg).unwrap();
    pipeline::cmd_sample(&cfg, false).unwrap();
    let mut other = cfg.clone();
    other.schedule.steps = 60;
    let real = pipeline::dataset_dir(&cfg);
    let err = pipeline::cmd_eval(&other, &real, &cfg.paths.samples, false).unwrap_err();
    assert!(matches!(err, CcdmError::Config(ref m) if m.contains("schedule")), "{err}");
    pipeline::cmd_eval(&other, &real, &cfg.paths.samples, true).unwrap();

    // the sampler itself refuses a checkpoint trained with another T
    assert!(matches!(pipeline::cmd_sample(&other, false), Err(CcdmError::Config(_))));
}

#[test]
fn guidance_without_condition_drop_is_rejected_up_front() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.train.p_drop = 0.0;
    assert!(matches!(cfg.validate(), Err(CcdmError::Config(_))));
    cfg.sample.gamma = 1.0;
    cfg.validate().unwrap();
}

#[test]
fn cli_exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(Path::new("run"));
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_ccdm")).args(args).env("RUST_LOG", "error").output().unwrap()
    };
    let p = path.to_str().unwrap();
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(run(&["-c", p, "train"]).status.code(), Some(3));
    let ok = run(&["-c", p, "make-dataset"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("run/dataset/labels.csv").exists());

    let mut bad = cfg.clone();
    bad.train.p_drop = 0.0;
    std::fs::write(&path, serde_json::to_string(&bad).unwrap()).unwrap();
    let out = run(&["-c", p, "sample"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));
}
