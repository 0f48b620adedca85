//! `hop` command-line interface: dataset generation, training, evaluation,
//! the three-variant ablation and the gradient audit.
//!
//! Exit codes: 0 success, 1 contract/config errors (including a failed
//! gradient audit), 2 i/o or file-format errors.

use clap::{Parser, Subcommand};
use hop_core::commands;
use hop_core::config::RunConfig;
use hop_core::error::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "hop",
    about = "Hand-object pose estimation on synthetic scenes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
        /// Also write a JSON mirror of the dataset.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train on a dataset and write a checkpoint plus a loss log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for checkpoint.bin and loss_log.csv.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset; writes CSV and JSON reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional config override (must match the checkpoint architecture).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate the three architecture variants.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare backward gradients against central differences.
    Gradcheck {
        /// Defaults to a reduced-size audit config when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>, default: RunConfig) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => default,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { config, seed, out, json } => {
            let cfg = load_config(&config, seed, RunConfig::default())?;
            let summary = commands::generate(&cfg, &out, json.as_deref())?;
            println!(
                "generated {} scenes (mean occlusion {:.3}) -> {}",
                summary.scenes,
                summary.mean_occlusion,
                summary.path.display()
            );
            println!("sha256 {}", summary.sha256);
        }
        Command::Train { config, seed, dataset, out, checkpoint } => {
            let cfg = load_config(&config, seed, RunConfig::default())?;
            let summary = commands::train(&cfg, &dataset, &out, checkpoint.as_deref())?;
            println!(
                "trained iterations {}..{}: total loss {:.6} -> {:.6}",
                summary.start_iteration, summary.iterations, summary.first_total, summary.final_total
            );
            println!("schedule {}", summary.schedule_hash);
            println!("checkpoint {}", summary.checkpoint.display());
            println!("loss log {}", summary.loss_log.display());
        }
        Command::Eval { checkpoint, dataset, out, config } => {
            let cfg_override = match config {
                Some(p) => Some(RunConfig::load(&p)?),
                None => None,
            };
            let summary = commands::eval(&checkpoint, &dataset, &out, cfg_override.as_ref())?;
            println!("evaluated {} scenes", summary.scenes);
            for row in &summary.rows {
                println!(
                    "  {:<12} mpjpe_all {:>10} auc {:.4} mssd {:.3}",
                    row.align_mode,
                    row.mpjpe_all.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
                    row.auc,
                    row.mssd
                );
            }
            println!("reports {} / {}", summary.report_csv.display(), summary.report_json.display());
        }
        Command::Ablate { config, seed, dataset, out } => {
            let cfg = load_config(&config, seed, RunConfig::default())?;
            let report = commands::ablate(&cfg, &dataset, &out)?;
            for row in &report.rows {
                println!(
                    "{:<24} joint_err(s+t) {:.3} auc {:.4} | joint_err(procr) {:.3} auc {:.4}",
                    row.variant,
                    row.joint_err_scale_trans,
                    row.auc_scale_trans,
                    row.joint_err_procrustes,
                    row.auc_procrustes
                );
            }
        }
        Command::Gradcheck { config, seed } => {
            let cfg = load_config(&config, seed, RunConfig::gradcheck_default())?;
            let report = commands::gradcheck(&cfg)?;
            for row in &report.rows {
                println!(
                    "{} {:<24} max rel err {:.3e} ({} samples)",
                    if row.max_rel_err <= commands::GRADCHECK_THRESHOLD { "PASS" } else { "FAIL" },
                    row.group,
                    row.max_rel_err,
                    row.samples
                );
            }
            println!(
                "gradcheck {}: worst {:.3e} over {} groups (threshold {:.0e})",
                if report.pass { "PASS" } else { "FAIL" },
                report.max_rel_err,
                report.rows.len(),
                commands::GRADCHECK_THRESHOLD
            );
            if !report.pass {
                return Err(Error::Contract(format!(
                    "gradient audit failed: max relative error {:.3e}",
                    report.max_rel_err
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
