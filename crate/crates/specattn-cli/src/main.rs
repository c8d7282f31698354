use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use specattn_cli::commands::{self, GenerationMode};
use specattn_cli::config::{Overrides, RunConfig};
use specattn_cli::exit_code;

/// Speculative decoding with draft-guided sparse attention, at toy scale.
#[derive(Parser)]
#[command(name = "specattn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the top-p selection threshold.
    #[arg(long)]
    p: Option<f64>,
    /// Override the speculative lookahead.
    #[arg(long)]
    gamma: Option<usize>,
    /// Override both models' weight seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Specattn,
    DenseOnly,
    Streaming,
    Topk,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the draft-to-verifier layer mapping from the corpus.
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate a continuation of a prompt file.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Prompt bytes.
        #[arg(long)]
        prompt: PathBuf,
        /// Verification mask mode.
        #[arg(long, value_enum, default_value = "specattn")]
        mode: ModeArg,
    },
    /// Compare perplexity and KV reduction across methods.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Cross-check the sorting-free selection and the layer-mapping solver
    /// against their reference oracles.
    OracleCheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Corrupt one expected value to exercise the failure path.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn load(common: &CommonArgs) -> anyhow::Result<RunConfig> {
    RunConfig::load(
        &common.config,
        &Overrides {
            out_dir: common.out_dir.clone(),
            p: common.p,
            gamma: common.gamma,
            seed: common.seed,
        },
    )
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Calibrate { common } => commands::cmd_calibrate(&load(&common)?),
        Command::Generate {
            common,
            prompt,
            mode,
        } => {
            let mode = match mode {
                ModeArg::Specattn => GenerationMode::SpecAttn,
                ModeArg::DenseOnly => GenerationMode::DenseOnly,
                ModeArg::Streaming => GenerationMode::Streaming,
                ModeArg::Topk => GenerationMode::TopK,
            };
            commands::cmd_generate(&load(&common)?, &prompt, mode)
        }
        Command::Bench { common } => commands::cmd_bench(&load(&common)?),
        Command::OracleCheck {
            common,
            inject_fault,
        } => commands::cmd_oracle_check(&load(&common)?, inject_fault),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPECATTN_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
