mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;
use crate::config::CliConfig;

/// Entity-level video representations on synthetic token features.
#[derive(Debug, Parser)]
#[command(name = "entivid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` configuration file; defaults are used when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset: one .mvff file per video plus manifest.tsv.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Overrides `data_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on the train split of a dataset and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint path; the loss trace goes next to it with a `.loss.tsv` suffix.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the metrics of a checkpoint on a dataset as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Write one PGM attention map per (frame, entity, layer) of a video.
    Attn {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// An .mvff feature file.
        #[arg(long, value_name = "PATH")]
        video: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train and evaluate once per seed and print mean ± 2σ per metric.
    Trials {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated from the configuration when omitted.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        seeds: Vec<u64>,
        /// Also write the report as JSON.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<CliConfig, CliError> {
    let cfg = match &common.config {
        Some(path) => CliConfig::from_file(path)?,
        None => CliConfig::default(),
    };
    Ok(cfg)
}

fn echo(cfg: &CliConfig) {
    eprint!("# resolved configuration\n{}", cfg.to_text());
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common, out, seed } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            echo(&cfg);
            commands::gen(&cfg, &out)
        }
        Command::Train {
            common,
            data,
            out,
            seed,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.resolve();
            }
            echo(&cfg);
            commands::train(&cfg, &data, &out)
        }
        Command::Eval {
            common,
            data,
            checkpoint,
        } => {
            let cfg = load_config(&common)?;
            echo(&cfg);
            println!("{}", commands::eval(&cfg, &data, &checkpoint)?);
            Ok(())
        }
        Command::Attn {
            common,
            checkpoint,
            video,
            out,
        } => {
            let cfg = load_config(&common)?;
            echo(&cfg);
            let n = commands::attn(&cfg, &checkpoint, &video, &out)?;
            log::info!("wrote {n} attention maps to {}", out.display());
            Ok(())
        }
        Command::Trials {
            common,
            data,
            seeds,
            out,
        } => {
            let cfg = load_config(&common)?;
            echo(&cfg);
            let report = commands::trials(&cfg, data.as_deref(), &seeds)?;
            print!("{}", report.table());
            if let Some(path) = out {
                std::fs::write(&path, report.to_json()).map_err(|source| CliError::Write {
                    path: path.clone(),
                    source,
                })?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
