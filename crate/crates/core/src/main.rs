use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use degenlab::scenario::suite::{run_suite, SuiteName};
use degenlab::scenario::{run_scenario, RunOptions};
use degenlab::Error;

#[derive(Parser)]
#[command(name = "degenlab", version, about = "Monotone-scheme laboratory for degenerate fully nonlinear elliptic equations")]
struct Cli {
    /// Output directory (a suite writes one subdirectory per config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for randomized steps; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress per-step progress and the summary table.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario config.
    Run { config: PathBuf },
    /// Run a bundled suite: sharp-1d, division, envelope-audit, barrier,
    /// abp, nonuniqueness, exponent-map-2d or all.
    Suite {
        #[arg(value_parser = parse_suite)]
        name: SuiteName,
    },
}

fn parse_suite(s: &str) -> Result<SuiteName, String> {
    SuiteName::parse(s).ok_or_else(|| {
        format!("unknown suite `{s}` (expected sharp-1d, division, envelope-audit, barrier, abp, nonuniqueness, exponent-map-2d or all)")
    })
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let opts = RunOptions {
        out: cli.out,
        seed: cli.seed,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Run { config } => {
            let m = run_scenario(&config, &opts).with_context(|| format!("running {}", config.display()))?;
            if !opts.quiet {
                println!("{}: {}", m.scenario, if m.passed { "PASS" } else { "FAIL" });
            }
            Ok(m.passed)
        }
        Command::Suite { name } => Ok(run_suite(name, &opts)?.0),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            // Config and usage problems exit with 2, anything else with 1.
            let usage = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<Error>(),
                    Some(Error::Config { .. } | Error::Expression { .. } | Error::Io(_))
                )
            });
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
