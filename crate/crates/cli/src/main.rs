//! Command-line front end: loads a run configuration, applies overrides,
//! and dispatches to the experiment commands. Errors print as one
//! machine-parsable line on stderr and a nonzero exit code.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rudder::harness::{self, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "rudder", version, about = "Guide-steered decoding lab")]
struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-path override, e.g. --set grpo.max_steps=300 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Run directory (must not already hold a run).
    #[arg(long, global = true)]
    out: Option<String>,

    /// Run seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain a model on the task corpus and save its checkpoint.
    Pretrain,
    /// Train a guide with GRPO against a frozen backbone.
    TrainGuide,
    /// Greedy evaluation of a backbone, optionally steered by a guide.
    Eval,
    /// Evaluate a guide trained on one backbone against a larger one.
    Transfer,
    /// Sweep mixing weights over two guides on one backbone.
    ComposeSweep,
    /// Train on the enumerable micro task and compare with exact oracles.
    OracleCheck,
    /// Structural check: optimizer and gradients touch only the guide.
    Memcheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::TrainGuide => "train-guide",
            Command::Eval => "eval",
            Command::Transfer => "transfer",
            Command::ComposeSweep => "compose-sweep",
            Command::OracleCheck => "oracle-check",
            Command::Memcheck => "memcheck",
        }
    }
}

fn execute(cli: &Cli) -> rudder::Result<serde_json::Value> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.sets)?;
    cfg.command = cli.command.name().to_string();
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    harness::run(&cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(report) => {
            println!("{report:#}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error code={} {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
