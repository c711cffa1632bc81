use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

mod commands;
mod overlay;

/// Synthetic-video instance segmentation with synchronized frame/video queries.
#[derive(Debug, Parser)]
#[command(name = "syncvis", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        videos: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        frames: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..=syncvis::data_synth::MAX_INSTANCES as u64))]
        max_instances: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_parser = unit_interval)]
        occlusion_rate: Option<f64>,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes checkpoint.json and metrics.jsonl under --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or a prediction dump) against a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate once per value of one parameter.
    Ablate {
        #[arg(long, value_parser = ["T", "T_s", "N_k", "lambda", "sync_mode"])]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run the values concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Write per-frame PNGs with predicted masks overlaid.
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn unit_interval(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(format!("{s} is not a number in [0, 1]")),
    }
}

/// Moves a finished `.partial` directory into place.
fn publish_dir(partial: &Path, dest: &Path) -> Result<()> {
    if dest.exists() {
        std::fs::remove_dir_all(dest).with_context(|| format!("removing {}", dest.display()))?;
    }
    std::fs::rename(partial, dest).with_context(|| format!("renaming into {}", dest.display()))
}

/// Fails unless `dir` is absent or empty, or `force` is set.
fn ensure_writable(dir: &Path, force: bool) -> Result<()> {
    if dir.is_file() {
        bail!("{} is a file", dir.display());
    }
    if !force && dir.is_dir() && std::fs::read_dir(dir)?.next().is_some() {
        bail!("{} exists and is not empty (pass --force to replace it)", dir.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            videos,
            frames,
            max_instances,
            seed,
            occlusion_rate,
            force,
        } => commands::gen_data(
            &out,
            videos as usize,
            frames as usize,
            max_instances as usize,
            seed,
            occlusion_rate,
            force,
        ),
        Command::Train { config, data, out } => commands::train(&config, &data, &out),
        Command::Eval { ckpt, data, report } => commands::eval(&ckpt, &data, &report),
        Command::Ablate {
            param,
            values,
            config,
            data,
            out,
            parallel,
        } => commands::ablate(&param, &values, &config, &data, &out, parallel),
        Command::Visualize { ckpt, video, data, out } => commands::visualize(&ckpt, &video, &data, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SYNCVIS_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(
                e.downcast_ref::<syncvis::Error>(),
                Some(syncvis::Error::Config(_) | syncvis::Error::BadValue { .. })
            );
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}
