//! `qrnn` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "qrnn", version, about = "Train and inspect recurrent networks with quantized weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command. Flags override the config file, which
/// overrides built-in defaults.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Run configuration (TOML)
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Overrides the config's `seed`
    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory; overrides the config's `out_dir`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Full,
    Quantized,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Valid,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, best.qrnn, last.qrnn and config.toml
    Train {
        #[command(flatten)]
        common: Common,
    },

    /// Evaluate a checkpoint without sampling
    Eval {
        #[command(flatten)]
        common: Common,

        /// Checkpoint to evaluate (default: best.qrnn in the output directory)
        #[arg(long)]
        checkpoint: Option<PathBuf>,

        #[arg(long, value_enum, default_value = "both")]
        mode: Mode,

        #[arg(long, value_enum, default_value = "valid")]
        split: SplitArg,
    },

    /// Hidden-state stability sweep over quantizers; writes stability.csv
    Diagnose {
        #[command(flatten)]
        common: Common,
    },

    /// Bit-pack every quantized weight group of a checkpoint
    Pack {
        #[command(flatten)]
        common: Common,

        /// Checkpoint to pack (default: best.qrnn in the config's output directory)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common } => commands::train(&common),
        Command::Eval {
            common,
            checkpoint,
            mode,
            split,
        } => commands::eval(&common, checkpoint.as_deref(), mode, split),
        Command::Diagnose { common } => commands::diagnose(&common),
        Command::Pack { common, checkpoint } => commands::pack(&common, checkpoint.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
