use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use ccdm::config::ExperimentConfig;
use ccdm::pipeline;
use ccdm::CcdmError;
use clap::{Parser, Subcommand};

/// Continuous conditional diffusion models for images with scalar labels.
#[derive(Debug, Parser)]
#[command(name = "ccdm", version)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, env = "CCDM_SEED", global = true)]
    seed: Option<u64>,

    /// Caps the number of compute threads.
    #[arg(long, env = "CCDM_WORKERS", global = true)]
    workers: Option<usize>,

    /// Overrides the command's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesizes (or checks) the training dataset.
    MakeDataset,
    /// Trains the label embedding networks.
    TrainEmbeddings,
    /// Trains the conditional denoiser.
    Train,
    /// Generates images at the configured labels.
    Sample {
        /// Use the distilled one-step generator.
        #[arg(long)]
        one_step: bool,
    },
    /// Distills the denoiser into a one-step generator.
    Distill,
    /// Evaluates generated images against real ones.
    Eval {
        /// Real images; the training dataset when absent.
        #[arg(long)]
        real: Option<PathBuf>,
        /// Generated images; the samples directory when absent.
        #[arg(long)]
        fake: Option<PathBuf>,
        /// Evaluate even if the schedule or label-space config differs.
        #[arg(long)]
        allow_mismatch: bool,
    },
    /// Renders plots from an evaluation report.
    Plot {
        /// Directory holding the report; the eval directory when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| CcdmError::Config("--config <file> is required".into()))?;
    let mut cfg = ExperimentConfig::from_file(path)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    if let Some(out) = &cli.out {
        let p = &mut cfg.paths;
        match cli.command {
            Command::MakeDataset => p.dataset = out.clone(),
            Command::TrainEmbeddings => p.embeddings = out.clone(),
            Command::Train => p.denoiser = out.clone(),
            Command::Sample { .. } => p.samples = out.clone(),
            Command::Distill => p.generator = out.clone(),
            Command::Eval { .. } | Command::Plot { .. } => p.eval = out.clone(),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(w) = cli.workers {
        pipeline::set_workers(w);
    }
    if let Command::Plot { report } = &cli.command {
        if cli.config.is_none() {
            let dir = report.clone().context("plot needs --report <dir> or --config")?;
            let out = cli.out.clone().unwrap_or_else(|| dir.clone());
            for p in pipeline::cmd_plot(&dir, &out)? {
                println!("{}", p.display());
            }
            return Ok(());
        }
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::MakeDataset => {
            let dir = pipeline::cmd_make_dataset(&cfg)?;
            println!("{}", dir.display());
        }
        Command::TrainEmbeddings => {
            let dir = pipeline::cmd_train_embeddings(&cfg)?;
            println!("{}", dir.display());
        }
        Command::Train => {
            let report = pipeline::cmd_train(&cfg)?;
            if let Some(last) = report.trace.last() {
                println!("trained {} steps, final loss {:.6}", last.step, last.loss);
            }
            println!("{}", cfg.paths.denoiser.display());
        }
        Command::Sample { one_step } => {
            let out = pipeline::cmd_sample(&cfg, *one_step)?;
            println!("wrote {} images to {}", out.labels.len(), cfg.paths.samples.display());
        }
        Command::Distill => {
            let recs = pipeline::cmd_distill(&cfg)?;
            println!("distilled {} steps into {}", recs.len(), cfg.paths.generator.display());
        }
        Command::Eval { real, fake, allow_mismatch } => {
            let real = real.clone().unwrap_or_else(|| pipeline::dataset_dir(&cfg));
            let fake = fake.clone().unwrap_or_else(|| cfg.paths.samples.clone());
            let r = pipeline::cmd_eval(&cfg, &real, &fake, *allow_mismatch)?;
            println!(
                "SFID {:.4} ({:.4})  Label Score {:.4} ({:.4})  Diversity {}",
                r.sfid_mean,
                r.sfid_std,
                r.label_score_mean,
                r.label_score_std,
                r.diversity_mean.map(|d| format!("{d:.4}")).unwrap_or_else(|| "n/a".into())
            );
            println!("{}", cfg.paths.eval.display());
        }
        Command::Plot { report } => {
            let dir = report.clone().unwrap_or_else(|| cfg.paths.eval.clone());
            for p in pipeline::cmd_plot(&dir, &cfg.paths.eval)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<CcdmError>()) {
        Some(CcdmError::Config(_)) | Some(CcdmError::InvalidArgument(_)) => 2,
        Some(CcdmError::MissingDependency { .. }) => 3,
        Some(CcdmError::Numerical(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
