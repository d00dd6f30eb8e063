//! `krona`: train, evaluate, merge, benchmark and gradient-check Kronecker
//! adapters on a small synthetic-task encoder.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::CliResult;
use config::Overrides;
use krona::Precision;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "krona", version, about = "Kronecker adapters on a toy encoder")]
struct Cli {
    /// TOML run file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the run file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// f32 or f64.
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train (or load) a backbone, fine-tune the configured adapter and
    /// save its checkpoint and metrics.
    Train,
    /// Evaluate a backbone, optionally with an adapter checkpoint.
    Eval { backbone: PathBuf, checkpoint: Option<PathBuf> },
    /// Fold a krona or lora checkpoint into the backbone weights.
    Merge {
        backbone: PathBuf,
        checkpoint: PathBuf,
        output: PathBuf,
    },
    /// Time the forward pass of several method variants.
    Bench {
        /// Comma separated; defaults to the run file's list.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Finite-difference check of every trainable tensor of the configured adapter.
    Gradcheck {
        /// Inject a known fault into the Kronecker backward pass.
        #[arg(long)]
        corrupt: bool,
    },
    /// List every factor shape for a `d_in × d_out` weight.
    Shapes { d_in: usize, d_out: usize },
}

macro_rules! with_precision {
    ($p:expr, $f:ident ( $($arg:expr),* )) => {
        match $p {
            Precision::F64 => commands::$f::<f64>($($arg),*),
            Precision::F32 => commands::$f::<f32>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> CliResult {
    if let Command::Shapes { d_in, d_out } = cli.command {
        return commands::shapes(d_in, d_out);
    }
    let overrides = Overrides {
        seed: cli.seed,
        precision: cli.precision,
        out: cli.out,
    };
    let cfg = config::load(cli.config.as_deref())?.resolve(&overrides)?;
    let p = cfg.precision;
    match cli.command {
        Command::Train => with_precision!(p, train(&cfg)),
        Command::Eval { backbone, checkpoint } => with_precision!(p, eval(&cfg, &backbone, checkpoint.as_deref())),
        Command::Merge {
            backbone,
            checkpoint,
            output,
        } => with_precision!(p, merge(&cfg, &backbone, &checkpoint, &output)),
        Command::Bench { methods } => with_precision!(p, bench(&cfg, methods)),
        Command::Gradcheck { corrupt } => with_precision!(p, gradcheck(&cfg, corrupt)),
        Command::Shapes { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
