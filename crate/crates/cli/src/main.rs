//! `flmlab` command line.

mod commands;
mod experiment;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// A check or criterion did not hold; maps to exit code 1.
#[derive(Debug)]
pub struct Failed(pub String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

#[derive(Parser)]
#[command(name = "flmlab", version, about = "Pretraining-objective laboratory on synthetic captions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the model seed in the file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train several experiment files over seeds and summarize.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.85)]
        threshold: f64,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// Skip the CLS probe.
        #[arg(long)]
        no_probe: bool,
        /// Skip greedy decoding.
        #[arg(long)]
        no_decode: bool,
    },
    /// Check the dependency-matrix builders and print measured rates.
    Verify {
        #[arg(long, value_enum, default_value_t = Kind::All)]
        kind: Kind,
        #[arg(long = "L", alias = "len", default_value_t = 8)]
        len: usize,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also validate a deliberately broken matrix.
        #[arg(long, hide = true)]
        inject_bad: bool,
    },
    /// Finite-difference check of the full model gradient in 64-bit.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Dims::Tiny)]
        dims: Dims,
        #[arg(long, value_enum, default_value_t = Obj::Flm)]
        objective: Obj,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale the analytic gradient of this parameter group by 2.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Greedy-decode validation samples from a checkpoint.
    Decode {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Train and evaluate the frozen-backbone attribute probe.
    Probe {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Synthetic data utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
}

#[derive(Args)]
struct CheckpointArgs {
    /// Path to a `checkpoint.json` manifest.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write samples as JSON lines.
    Dump {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    All,
    Mlm,
    Ar,
    Prefixlm,
    Flm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dims {
    Tiny,
    Small,
}

#[derive(Clone, Copy, ValueEnum)]
enum Obj {
    Flm,
    Mlm,
    Ar,
    Prefixlm,
}

impl From<Obj> for flmlab::objectives::Objective {
    fn from(o: Obj) -> Self {
        use flmlab::objectives::Objective;
        match o {
            Obj::Flm => Objective::Flm,
            Obj::Mlm => Objective::Mlm,
            Obj::Ar => Objective::Ar,
            Obj::Prefixlm => Objective::Prefixlm,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out } => commands::train(&config, seed, out),
        Command::Compare { configs, threshold, seeds, out, no_probe, no_decode } => {
            commands::compare(&configs, threshold, seeds, &out, !no_probe, !no_decode)
        }
        Command::Verify { kind, len, samples, seed, inject_bad } => commands::verify(kind, len, samples, seed, inject_bad),
        Command::Gradcheck { dims, objective, seed, corrupt } => {
            let dims = match dims {
                Dims::Tiny => flmlab::checks::GradDims::Tiny,
                Dims::Small => flmlab::checks::GradDims::Small,
            };
            commands::gradcheck(dims, objective.into(), seed, corrupt)
        }
        Command::Decode { ckpt, n } => commands::decode(&ckpt.checkpoint, n, ckpt.out),
        Command::Probe { ckpt, steps } => commands::probe(&ckpt.checkpoint, steps, ckpt.out),
        Command::Data { command: DataCommand::Dump { seed, n, out } } => commands::dump(seed, n, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<Failed>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
