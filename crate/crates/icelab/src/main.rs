//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage errors, 2 numerical failures,
//! 3 I/O failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use icelab::config::{EditOverrides, RunConfig};
use icelab::runner;
use icelab::Result;

#[derive(Parser)]
#[command(
    name = "icelab",
    about = "Desk-scale laboratory for in-context knowledge editing",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct EditFlags {
    /// Pretrained weights produced by `pretrain`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Edit-record dataset (JSON array).
    #[arg(long)]
    dataset: PathBuf,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
    /// Editing variant: ft, ft_clamped, ft_sampling, ice_dynamic,
    /// ice_static, ice_no_context.
    #[arg(long)]
    variant: Option<String>,
    /// Consistency-loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Sampling temperature for completions.
    #[arg(long)]
    temperature: Option<f64>,
    /// Completions sampled per step.
    #[arg(long)]
    samples: Option<usize>,
    /// Length of each sampled completion.
    #[arg(long)]
    sample_len: Option<usize>,
    /// Step budget per edit.
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Elementwise gradient clip bound.
    #[arg(long)]
    clip: Option<f64>,
    /// Weight-ball radius around the pre-edit parameters.
    #[arg(long)]
    clamp: Option<f64>,
    /// Base sampling seed; record i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
}

impl EditFlags {
    fn overrides(&self) -> EditOverrides {
        EditOverrides {
            variant: self.variant.clone(),
            lambda: self.lambda,
            temperature: self.temperature,
            samples: self.samples,
            sample_len: self.sample_len,
            steps: self.steps,
            lr: self.lr,
            clip: self.clip,
            clamp: self.clamp,
            seed: self.seed,
        }
    }

    fn run_config(&self) -> Result<RunConfig> {
        let mut run = RunConfig::load_or_default(self.config.as_deref())?;
        self.overrides().apply(&mut run)?;
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and pretrain the base model on it.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// World-generation seed override.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/pretrain")]
        out: PathBuf,
    },
    /// Apply each edit to a fresh copy of the base model.
    Edit(EditFlags),
    /// Apply all edits to one model, in order.
    Continual(EditFlags),
    /// Run the 2x2 sampling-variant grid and trace one edit stepwise.
    Ablate(EditFlags),
    /// Merge run reports into a comparison table.
    Report {
        /// report.json files to merge.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Directory for merged.csv; table prints either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, seed, out } => {
            let mut run = RunConfig::load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                run.world.seed = s;
            }
            let model = runner::cmd_pretrain(&run, &out)?;
            println!(
                "pretrained {} (vocab {}, {} parameters) on {} sequences",
                model.cfg.architecture.name(),
                model.cfg.vocab_size,
                model.params.scalar_count(),
                model.world.corpus.len(),
            );
            println!(
                "corpus NLL {:.4} -> {:.4}; outputs in {}",
                model.log.initial_nll(),
                model.log.final_nll(),
                out.display()
            );
        }
        Command::Edit(flags) => {
            let run = flags.run_config()?;
            let report =
                runner::cmd_edit_like(&flags.checkpoint, &flags.dataset, &run, &flags.out, false)?;
            print_summary(&report);
            println!("outputs in {}", flags.out.display());
        }
        Command::Continual(flags) => {
            let run = flags.run_config()?;
            let report =
                runner::cmd_edit_like(&flags.checkpoint, &flags.dataset, &run, &flags.out, true)?;
            print_summary(&report);
            println!("outputs in {}", flags.out.display());
        }
        Command::Ablate(flags) => {
            let run = flags.run_config()?;
            let ablation = runner::cmd_ablate(&flags.checkpoint, &flags.dataset, &run, &flags.out)?;
            for cell in &ablation.cells {
                println!(
                    "{:<16} succ {:6.1}%  port {:6.1}%  loc {:6.1}%  final loss {:.4}",
                    cell.variant,
                    cell.summary.edit_succ_pct,
                    cell.summary.portability_pct,
                    cell.summary.locality_pct,
                    cell.loss_curve.last().copied().unwrap_or(f64::NAN),
                );
            }
            println!("outputs in {}", flags.out.display());
        }
        Command::Report { inputs, out } => {
            let table = runner::cmd_report(&inputs, out.as_deref())?;
            print!("{table}");
        }
    }
    Ok(())
}

fn print_summary(report: &icelab::report::RunReport) {
    let s = &report.summary;
    println!(
        "{} ({} records, variant {}): succ {:.1}%  port {:.1}%  loc {:.1}%  fluency {:.3}  ppl {:.3}  ppl_r {:.3}",
        report.command,
        s.records,
        report.variant,
        s.edit_succ_pct,
        s.portability_pct,
        s.locality_pct,
        s.fluency_mean,
        s.ppl_mean,
        s.ppl_r_mean,
    );
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version displays are successes; everything else
            // is a usage error (exit code 1).
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
