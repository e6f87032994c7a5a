// SPDX-License-Identifier: Apache-2.0

//! `bevpretrain`: data generation, pooling inspection, both training
//! stages, linear probing and the gradient oracle.
//!
//! Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or
//! configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Entry, RunConfig};

#[derive(Parser)]
#[command(name = "bevpretrain", version, about = "Region-contrastive BEV pretraining on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for artifacts and the resolved config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic scenes and a seed manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pool one point cloud into regions and report them.
    Pool {
        #[command(flatten)]
        common: Common,
        /// Point cloud CSV (`x,y,z`).
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Stage 1: region-contrastive pretraining of the LiDAR encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Scene directory; overrides `data_dir`.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Stage 2: distill a frozen LiDAR encoder into the camera encoder.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Stage-1 checkpoint; overrides `checkpoint_in`.
        #[arg(long, value_name = "PATH")]
        lidar_checkpoint: Option<PathBuf>,
    },
    /// Linear probe of frozen BEV features on held-out labeled scenes.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Stage-1 or stage-2 checkpoint; random initialization if absent.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable graph.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(Vec<String>),
    Runtime(String),
}

impl From<bevpretrain::Error> for Failure {
    fn from(e: bevpretrain::Error) -> Self {
        use bevpretrain::Error as E;
        match e {
            E::Config { .. } | E::Parse { .. } | E::Format { .. } | E::Io { .. } | E::Checkpoint { .. } => {
                Failure::Usage(vec![e.to_string()])
            }
            E::Contract(_) | E::Numerical(_) | E::NoRegions | E::Aborted(_) => Failure::Runtime(e.to_string()),
        }
    }
}

fn path_entry(key: &str, p: &Option<PathBuf>, flag: &str) -> Option<Entry> {
    p.as_ref().map(|p| Entry::new(key, p.to_string_lossy(), flag))
}

fn load_config(common: &Common, extra: Vec<Entry>) -> Result<RunConfig, Failure> {
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    if let Some(path) = &common.config {
        match config::parse_file(path) {
            Ok(e) => entries.extend(e),
            Err(e) => errors.extend(e),
        }
    }
    for s in &common.set {
        match config::parse_set(s) {
            Ok(e) => entries.push(e),
            Err(e) => errors.push(e),
        }
    }
    if let Some(seed) = common.seed {
        entries.push(Entry::new("seed", seed.to_string(), "--seed"));
    }
    entries.extend(extra);
    if !errors.is_empty() {
        return Err(Failure::Usage(errors));
    }
    config::resolve(&entries).map_err(Failure::Usage)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common, vec![])?;
            commands::gen_data(&cfg, common.out.as_deref())
        }
        Command::Pool { common, input } => {
            let cfg = load_config(&common, vec![])?;
            commands::pool(&cfg, &input, common.out.as_deref())
        }
        Command::Pretrain { common, data } => {
            let cfg = load_config(&common, path_entry("data_dir", &data, "--data").into_iter().collect())?;
            commands::pretrain(&cfg, common.out.as_deref())
        }
        Command::Distill {
            common,
            data,
            lidar_checkpoint,
        } => {
            let extra = [
                path_entry("data_dir", &data, "--data"),
                path_entry("checkpoint_in", &lidar_checkpoint, "--lidar-checkpoint"),
            ];
            let cfg = load_config(&common, extra.into_iter().flatten().collect())?;
            commands::distill(&cfg, common.out.as_deref())
        }
        Command::Probe { common, data, checkpoint } => {
            let extra = [
                path_entry("data_dir", &data, "--data"),
                path_entry("checkpoint_in", &checkpoint, "--checkpoint"),
            ];
            let cfg = load_config(&common, extra.into_iter().flatten().collect())?;
            commands::probe(&cfg, common.out.as_deref())
        }
        Command::Gradcheck { common } => {
            let cfg = load_config(&common, vec![])?;
            commands::gradcheck(&cfg, common.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msgs)) => {
            for m in msgs {
                eprintln!("error: {m}");
            }
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
