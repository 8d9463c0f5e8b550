use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pii::cli::{self, Command, Overrides};

#[derive(Parser)]
#[command(name = "pii", version, about = "Post-integrated inference with negative control outcomes")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, 0 = automatic (overrides `threads`).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Replace every seed in the configuration.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Monte Carlo experiment and/or nuisance rate study.
    Simulate,
    /// Estimate a latent embedding from control outcomes.
    Embed,
    /// Doubly robust effect estimates for every non-control outcome.
    Fit,
    /// Per-outcome and Benjamini-Hochberg decisions from a fit.
    Test,
    /// Solve the discrete identification equations.
    Identify,
    /// Exact bound and identity checks.
    Diagnose,
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let cmd = match args.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::Embed => Command::Embed,
        Cmd::Fit => Command::Fit,
        Cmd::Test => Command::Test,
        Cmd::Identify => Command::Identify,
        Cmd::Diagnose => Command::Diagnose,
    };
    let Some(config) = args.common.config else {
        eprintln!("error: --config is required");
        return ExitCode::from(cli::EXIT_VALIDATION as u8);
    };
    let ov = Overrides {
        out: args.common.out,
        threads: args.common.threads,
        seed: args.common.seed_override,
    };
    match cli::run(cmd, &config, &ov) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
