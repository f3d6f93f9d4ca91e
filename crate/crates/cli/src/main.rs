use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qrec_cli::commands::{self, EvalSplit, DEFAULT_SWEEP};
use qrec_cli::RunConfig;
use qrec_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "qrec",
    version,
    about = "Reinforcement fine-tuning for query-based recommendation"
)]
struct Cli {
    /// JSON run configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalog, interaction graph and query set.
    Gen,
    /// Compute item embeddings from the interaction graph.
    Embed,
    /// Score a rollout file: shaped rewards, segment rewards, token advantages.
    Score {
        #[arg(long)]
        rollouts: PathBuf,
    },
    /// Train the policy and persist the run directory.
    Train {
        /// Continue from a checkpoint of an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Epoch budget (overrides the configuration).
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Greedy accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        split: EvalSplit,
    },
    /// Train once per penalty weight on a shared world.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    match cli.command {
        Command::Gen => commands::cmd_gen(&cfg).map(|_| true),
        Command::Embed => commands::cmd_embed(&cfg).map(|_| true),
        Command::Score { rollouts } => {
            commands::cmd_score(&cfg, &rollouts).map(|s| s.failures == 0)
        }
        Command::Train { resume, max_epochs } => {
            if let Some(n) = max_epochs {
                cfg.max_epochs = n;
            }
            commands::cmd_train(&cfg, resume.as_deref()).map(|_| true)
        }
        Command::Eval { checkpoint, split } => {
            commands::cmd_eval(&cfg, &checkpoint, split).map(|_| true)
        }
        Command::Sweep { values } => {
            let values = values.unwrap_or_else(|| DEFAULT_SWEEP.to_vec());
            let rows = commands::cmd_sweep(&cfg, &values)?;
            for r in rows {
                println!(
                    "w_penalty {} final_accuracy {:.4}",
                    r.w_penalty, r.final_accuracy
                );
            }
            Ok(true)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
