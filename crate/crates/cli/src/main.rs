use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use log::{info, warn};

use ua_cli::ablate::{cmd_ablate, run_cell, AblateOptions, AblationGrid, CellStatus};
use ua_cli::commands::{cmd_generate, cmd_pretrain, cmd_probe, load_config, write_text, ProbeArgs, PROBE_FILE};
use ua_cli::error::{io_error, CliError, CliResult, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION};
use ua_cli::report::cmd_report;
use ua_cli::verify::{render, run_all, write_report};

/// Unbalanced-atlas encoders: data generation, pretraining, probing and
/// ablation grids.
#[derive(Debug, Parser)]
#[command(name = "ua", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Write a synthetic annotated-frames dataset.
    Generate {
        /// Config whose `world.*` keys describe the dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `world.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an encoder; writes a checkpoint and a metrics log.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Dataset directory; overrides `data_path`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint in `--out` if there is one.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear-probe a frozen checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the checkpoint's own dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// First probe seed; defaults to the run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every cell of an ablation grid and write a summary CSV.
    Ablate {
        /// Grid file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plots and tables from run directories or ablation outputs.
    Report {
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the property suite.
    Verify {
        /// Include the training-dependent properties.
        #[arg(long)]
        full: bool,
        /// Where to write the JSON results.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(hide = true)]
    RunCell { dir: PathBuf },
}

fn current_exe() -> CliResult<PathBuf> {
    std::env::current_exe().map_err(|e| CliError::runtime(format!("cannot locate executable: {e}")))
}

fn execute(cmd: Cmd) -> CliResult<i32> {
    match cmd {
        Cmd::Generate { config, seed, out } => {
            let mut cfg = load_config(config.as_deref(), None, None)?;
            if let Some(s) = seed {
                cfg.world.seed = s;
            }
            let manifest = cmd_generate(&cfg, &out)?;
            println!(
                "{} episodes written to {} (spec hash {})",
                manifest.episodes.len(),
                out.display(),
                manifest.spec_hash
            );
        }
        Cmd::Pretrain {
            config,
            seed,
            epochs,
            data,
            resume,
            out,
        } => {
            let mut cfg = load_config(config.as_deref(), seed, epochs)?;
            if data.is_some() {
                cfg.data_path = data;
            }
            let outcome = cmd_pretrain(&cfg, &out, resume)?;
            if let Some(last) = outcome.metrics.last() {
                info!("final loss {:.4}, entropy {:.4}", last.losses.total, last.entropy);
            }
            println!("checkpoint written to {}", out.display());
        }
        Cmd::Probe {
            checkpoint,
            data,
            seed,
            seeds,
            out,
        } => {
            let summary = cmd_probe(&ProbeArgs {
                checkpoint,
                data,
                seed,
                seeds,
            })?;
            std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
            let path = out.join(PROBE_FILE);
            write_text(&path, &serde_json::to_string_pretty(&summary)?)?;
            println!(
                "mean F1 {:.3} ± {:.3}, accuracy {:.3} ± {:.3} -> {}",
                summary.overall.f1.mean,
                summary.overall.f1.std,
                summary.overall.accuracy.mean,
                summary.overall.accuracy.std,
                path.display()
            );
        }
        Cmd::Ablate {
            config,
            epochs,
            workers,
            out,
        } => {
            let grid = AblationGrid::load(&config)?;
            let outcome = cmd_ablate(
                &grid,
                &AblateOptions {
                    out: out.clone(),
                    workers,
                    epochs,
                    exe: current_exe()?,
                },
            )?;
            for (cell, record) in &outcome.rows {
                if record.status != CellStatus::Ok {
                    warn!("{}: {} {}", cell.dir_name(), record.status.as_str(), record.message.as_deref().unwrap_or(""));
                }
            }
            let count = |s: CellStatus| outcome.rows.iter().filter(|(_, r)| r.status == s).count();
            println!(
                "{} cells: {} ok, {} collapsed, {} failed, {} reused; summary in {}",
                outcome.rows.len(),
                count(CellStatus::Ok),
                count(CellStatus::Collapsed),
                count(CellStatus::Failed),
                outcome.skipped,
                out.display()
            );
        }
        Cmd::Report { dirs, out } => {
            let outputs = cmd_report(&dirs, &out)?;
            for w in &outputs.warnings {
                warn!("{w}");
            }
            for f in &outputs.files {
                println!("{}", f.display());
            }
        }
        Cmd::Verify { full, out } => {
            let report = run_all(&current_exe()?, !full);
            println!("{}", render(&report));
            if let Some(path) = out {
                write_report(&report, &path)?;
            }
            if !report.passed {
                return Ok(EXIT_VALIDATION);
            }
        }
        Cmd::RunCell { dir } => {
            let record = run_cell(&dir)?;
            println!("{}", record.status.as_str());
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::from(EXIT_OK as u8),
                _ => ExitCode::from(EXIT_VALIDATION as u8),
            };
        }
    };
    let code = match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.code == EXIT_RUNTIME || e.code == EXIT_VALIDATION {
                e.code
            } else {
                EXIT_RUNTIME
            }
        }
    };
    ExitCode::from(code as u8)
}
