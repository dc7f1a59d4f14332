//! `gistlab`: batch commands of the gist fine-tuning lab.
//!
//! Exit codes: 0 success, 1 validation failure, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gist_cli::ablate::{ablate, Grid};
use gist_cli::config::{parse_seeds, ExperimentConfig, Precision};
use gist_cli::export::{export_attention, ExportArgs};
use gist_cli::{gradcheck, report, run, CliError};

#[derive(Parser)]
#[command(
    name = "gistlab",
    version,
    about = "Gist-token fine-tuning lab on a micro vision transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config's list.
    #[arg(long)]
    seeds: Option<String>,
    /// f32 or f64, overriding the config.
    #[arg(long)]
    precision: Option<String>,
    /// Print the machine-readable summary instead of the table.
    #[arg(long)]
    json: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = parse_seeds(seeds)?;
        }
        if let Some(p) = &self.precision {
            cfg.precision = p.parse()?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the backbone on the source task and write its checkpoint.
    Pretrain(Common),
    /// Fine-tune every task × mode × seed from the pretrained checkpoint.
    Finetune(Common),
    /// Run an ablation grid: TOKEN_LEN, LOSS_TERMS, LAMBDA or INTERACTION.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: String,
    },
    /// 64-bit finite-difference check of every op and the full loss.
    Gradcheck {
        #[arg(long)]
        json: bool,
    },
    /// Write per-layer, per-head attention maps as JSON.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file (.gstdata) holding the images.
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Number of images to export, from the start of the file.
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value = "f32")]
        precision: String,
        /// Verify both files were produced by this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Pretrain(common) => {
            let cfg = common.load()?;
            let summary = run::pretrain(&cfg)?;
            if common.json {
                print_json(&summary);
            } else {
                println!(
                    "pretrained {} classes: train {:.2}%, test {:.2}%\ncheckpoint {}",
                    summary.source_classes,
                    100.0 * summary.final_train_acc,
                    100.0 * summary.test_acc,
                    summary.checkpoint.display()
                );
            }
        }
        Command::Finetune(common) => {
            let cfg = common.load()?;
            let summary = run::finetune(&cfg)?;
            if common.json {
                print_json(&summary);
            } else {
                print!("{}", report::finetune_table(&summary));
                println!("written to {}", run::finetune_dir(&cfg).display());
            }
        }
        Command::Ablate { common, grid } => {
            let grid: Grid = grid.parse()?;
            let cfg = common.load()?;
            let table = ablate(&cfg, grid)?;
            if common.json {
                print_json(&table);
            } else {
                print!("{}", report::ablation_table(&table));
            }
        }
        Command::Gradcheck { json } => {
            let report = gradcheck::run_suite(None)?;
            if json {
                print_json(&report);
            } else {
                print!("{}", report.to_text());
            }
            for row in report.failures() {
                eprintln!(
                    "gradcheck failed: {} max relative error {:.3e}",
                    row.op, row.max_rel_error
                );
            }
            return Ok(report.passed);
        }
        Command::ExportAttention {
            checkpoint,
            images,
            out,
            count,
            precision,
            config,
        } => {
            let precision: Precision = precision.parse()?;
            let cfg = config.as_deref().map(ExperimentConfig::load).transpose()?;
            let dir = export_attention(&ExportArgs {
                checkpoint: &checkpoint,
                images: &images,
                out: &out,
                count,
                precision,
                config: cfg.as_ref(),
            })
            .context("export-attention")?;
            println!("attention maps written to {}", dir.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(2, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
