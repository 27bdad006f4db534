use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use distill_cli::commands::{cmd_eval, cmd_gen_data, cmd_sweep, cmd_train};
use distill_cli::split::SplitName;
use distill_cli::{resolve_config, Overrides, Result};

/// Train a CTC sequence model while distilling a frozen text encoder into
/// it, on synthetic desk-scale data.
#[derive(Parser)]
#[command(name = "distill-l2s", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired speech/text corpus file.
    GenData {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train with periodic validation; writes metrics plus best and final
    /// checkpoints.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Greedy-decode a corpus split with a checkpoint and write the report.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Checkpoint file to load.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Report destination; defaults to `<checkpoint_dir>/eval_<split>.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per lambda and tabulate validation CER against the
    /// lambda = 0 baseline.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn parse_cli() -> Cli {
    // Usage errors exit 1 (validation), not clap's default 2, which is
    // reserved for numeric failures.
    Cli::try_parse().unwrap_or_else(|e| {
        let code = if e.use_stderr() { 1 } else { 0 };
        let _ = e.print();
        std::process::exit(code);
    })
}

fn run() -> Result<()> {
    match parse_cli().command {
        Command::GenData { overrides } => {
            let config = resolve_config(&overrides)?;
            let outcome = cmd_gen_data(&config)?;
            println!(
                "wrote {} utterances to {}",
                outcome.n_utterances,
                outcome.path.display()
            );
        }
        Command::Train { overrides } => {
            let config = resolve_config(&overrides)?;
            let outcome = cmd_train(&config)?;
            println!(
                "final checkpoint {}  train_cer {}  best_val_cer {}",
                outcome.final_checkpoint.display(),
                outcome.final_train_cer,
                outcome
                    .best_val_cer
                    .map_or("n/a".to_string(), |c| c.to_string()),
            );
        }
        Command::Eval {
            overrides,
            checkpoint,
            split,
            out,
        } => {
            let config = resolve_config(&overrides)?;
            let out = out.unwrap_or_else(|| {
                config.checkpoint_dir.join(format!("eval_{split}.txt"))
            });
            let report = cmd_eval(&config, &checkpoint, split, &out)?;
            println!(
                "cer {}  density {}  report {}",
                report.cer,
                report.mean_prediction_density,
                out.display()
            );
        }
        Command::Sweep { overrides } => {
            let config = resolve_config(&overrides)?;
            let outcome = cmd_sweep(&config)?;
            for row in &outcome.rows {
                let relative = row
                    .relative_change_vs_baseline
                    .map_or("-".to_string(), |v| format!("{:+.1}%", 100.0 * v));
                println!("lambda {}\tval_cer {}\t{relative}", row.lambda, row.val_cer);
            }
            println!("table {}", outcome.table_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}
