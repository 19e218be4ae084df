use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use plpgrid::harness::{load_scenario, run_command, Command, HarnessError, RunOptions};

#[derive(Parser)]
#[command(name = "plpgrid", version, about = "Peak-load-pricing planning and market clearing for distribution feeders")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory (created if missing). For `verify`, the run to check.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Price convergence tolerance, $/MWh.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Best switch set for each count k.
    PlanSwitches {
        #[command(flatten)]
        common: Common,
        /// Inclusive count range `a:b`.
        #[arg(long)]
        k_range: Option<String>,
    },
    /// Unit price versus added DER capacity.
    SweepDer {
        #[command(flatten)]
        common: Common,
        /// MW grid `start:stop:step`.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Rolling operations and investment over the configured horizon.
    RunMpc {
        #[command(flatten)]
        common: Common,
    },
    /// Re-check every clearing stored in a run directory.
    Verify {
        #[command(flatten)]
        common: Common,
    },
    /// One protocol round at a single step.
    ClearStep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        step: usize,
    },
}

fn run(cli: Cli) -> Result<String, HarnessError> {
    let (command, common, opts) = match cli.command {
        Cmd::PlanSwitches { common, k_range } => (Command::PlanSwitches, common, RunOptions { k_range, ..Default::default() }),
        Cmd::SweepDer { common, grid } => (Command::SweepDer, common, RunOptions { grid, ..Default::default() }),
        Cmd::RunMpc { common } => (Command::RunMpc, common, RunOptions::default()),
        Cmd::Verify { common } => (Command::Verify, common, RunOptions::default()),
        Cmd::ClearStep { common, step } => (Command::ClearStep, common, RunOptions { step: Some(step), ..Default::default() }),
    };
    let opts = RunOptions { seed: common.seed, tolerance: common.tolerance, max_iters: common.max_iters, ..opts };
    let loaded = load_scenario(&common.scenario)?;
    let summary = run_command(command, &loaded, &common.scenario, &common.out, &opts)?;
    Ok(summary.message)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = HarnessError::Usage(e.to_string().lines().next().unwrap_or("bad arguments").to_string());
            eprintln!("{}", err.record());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
