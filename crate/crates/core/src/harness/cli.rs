//! Command-line driver.
//!
//! Exit codes: 0 success, 1 verification failure or I/O error, 2 invalid
//! config, 3 divergence or session abort.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::Error;
use crate::harness::runners::{self, RunContext};
use crate::harness::ExperimentConfig;
use crate::runtime::Clock;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "uniflow", version, about = "Action-chunk flow policies on simulated embodiments")]
pub struct Cli {
    /// Experiment config (JSON). Without one, defaults apply and --seed is required.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub clock: Option<ClockArg>,
    /// Disable gated refinement (zero rounds).
    #[arg(long, global = true)]
    pub no_mpg: bool,
    /// Disable async chunking in sessions.
    #[arg(long, global = true)]
    pub no_uac: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ClockArg {
    Sim,
    Wall,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the toy velocity field; writes parameters and a loss CSV.
    TrainToy,
    /// Closed-loop session per embodiment; writes logs and metrics.
    Session,
    /// Latency percentiles and underflow rates across the fleet.
    Bench,
    /// Run the acceptance suite.
    Verify {
        /// Only these criteria (repeatable).
        #[arg(long = "only")]
        only: Vec<u8>,
    },
    /// Gated refinement on and off under context corruption.
    AblateMpg,
    /// Async chunking on and off over paired seeds.
    AblateUac,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Divergence { .. } | Error::TrainingDiverged { .. } | Error::Starvation { .. } => EXIT_ABORT,
        _ => EXIT_FAILED,
    }
}

/// Loads the config and applies the command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut value = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
                pointer: String::new(),
                reason: format!("{}: {e}", path.display()),
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Config {
                pointer: String::new(),
                reason: format!("not valid JSON: {e}"),
            })?
        }
        None => serde_json::json!({}),
    };
    if let (Some(seed), Some(obj)) = (cli.seed, value.as_object_mut()) {
        obj.insert("seed".into(), seed.into());
    }
    let mut cfg = ExperimentConfig::from_value(&value)?;
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if let Some(c) = cli.clock {
        cfg.session.clock = match c {
            ClockArg::Sim => Clock::Sim,
            ClockArg::Wall => Clock::Wall,
        };
    }
    if cli.no_mpg {
        cfg.policy.refine_rounds = 0;
    }
    if cli.no_uac {
        cfg.uac.enabled = false;
    }
    Ok(cfg)
}

/// Runs the parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            report_error(&e);
            return exit_code(&e);
        }
    };
    let ctx = RunContext::new(cfg);
    let result = match &cli.command {
        Command::TrainToy => runners::train_toy(&ctx),
        Command::Session => runners::session(&ctx),
        Command::Bench => runners::bench(&ctx),
        Command::AblateMpg => runners::ablate_mpg_cmd(&ctx),
        Command::AblateUac => runners::ablate_uac_cmd(&ctx),
        Command::Verify { only } => {
            let results = runners::verify(&ctx, only, |r| {
                let mark = if r.passed { "PASS" } else { "FAIL" };
                println!("[{mark}] {:>2} {:<34} {:>7.2}s  {}", r.id, r.name, r.seconds, r.detail);
            });
            match results {
                Ok(rs) => {
                    let failed = rs.iter().filter(|r| !r.passed).count();
                    println!("{} passed, {failed} failed", rs.len() - failed);
                    return if failed == 0 { EXIT_OK } else { EXIT_FAILED };
                }
                Err(e) => Err(e),
            }
        }
    };
    match result {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
            EXIT_OK
        }
        Err(e) => {
            report_error(&e);
            exit_code(&e)
        }
    }
}

fn report_error(e: &Error) {
    match e {
        Error::Config { pointer, reason } => eprintln!("config error at \"{pointer}\": {reason}"),
        other => eprintln!("error: {other}"),
    }
}
