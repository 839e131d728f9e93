//! `hfmf` — train, evaluate, calibrate, and explain the two-module
//! deepfake detector on a procedurally generated corpus.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::{CliError, Ctx, ModuleSel};

#[derive(Parser)]
#[command(name = "hfmf", version, about = "two-module deepfake detection pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus directory (overrides config `data_dir`)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Artifact directory (overrides config `out_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled real/fake image corpus
    Synth {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Images per class
        #[arg(long)]
        n: usize,
        /// Square image side (multiple of 16)
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the detector and write checkpoints
    Train {
        #[command(flatten)]
        common: Common,
        /// Which part to train
        #[arg(long, value_enum, default_value_t = ModuleSel::All)]
        module: ModuleSel,
    },
    /// Score saved checkpoints on every split
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a sigmoid recalibration and report expected calibration error
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Reliability-diagram bin count override
        #[arg(long)]
        bins: Option<usize>,
        /// Calibrate a `score,label` CSV instead of module-1 scores
        #[arg(long)]
        logits_file: Option<PathBuf>,
    },
    /// Export activation heatmaps and the artifact-overlap study
    Explain {
        #[command(flatten)]
        common: Common,
        /// Number of heatmaps to export
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Retrain single-stream variants and tabulate their accuracy
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn ctx(common: &Common, bins: Option<usize>, needs_data: bool) -> Result<Ctx, CliError> {
    Ctx::resolve(
        common.config.as_deref(),
        common.seed,
        common.data.clone(),
        common.out.clone(),
        bins,
        needs_data,
    )
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Synth { seed, n, size, out } => commands::cmd_synth(seed, n, size, &out),
        Cmd::Train { common, module } => commands::cmd_train(&ctx(&common, None, true)?, module),
        Cmd::Eval { common } => commands::cmd_eval(&ctx(&common, None, true)?),
        Cmd::Calibrate { common, bins, logits_file } => {
            let needs_data = logits_file.is_none();
            commands::cmd_calibrate(&ctx(&common, bins, needs_data)?, logits_file.as_deref())
        }
        Cmd::Explain { common, n } => commands::cmd_explain(&ctx(&common, None, true)?, n),
        Cmd::Ablate { common } => commands::cmd_ablate(&ctx(&common, None, true)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
