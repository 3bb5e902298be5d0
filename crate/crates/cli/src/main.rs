//! `seelab` - batch driver for the stochastic-control verification
//! laboratory.
//!
//! Exit codes: 0 all selected checks passed (inconclusive allowed),
//! 1 at least one check failed, 2 configuration error, 3 internal error.

mod config;
mod pipeline;

use clap::{Parser, Subcommand};
use config::{builtin_config, ExperimentConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "seelab",
    about = "Spectral-truncation laboratory for stochastic optimal control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a configuration file or a built-in name
    Run {
        /// path to a TOML configuration, or a built-in name (e.g. lq1-smoke)
        config: String,
        /// output directory (default: config value, then $SEELAB_OUT_DIR, then ./out)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List built-in scenarios, configurations and checks
    ListScenarios,
    /// Re-print the summary table of a stored report.json
    Report {
        /// path to report.json
        path: PathBuf,
    },
}

fn load_config(arg: &str) -> Result<ExperimentConfig, String> {
    if let Some(c) = builtin_config(arg) {
        return Ok(c);
    }
    let path = PathBuf::from(arg);
    if !path.exists() {
        return Err(format!(
            "`{arg}` is neither a built-in configuration nor an existing file"
        ));
    }
    let text =
        std::fs::read_to_string(&path).map_err(|e| format!("cannot read {arg}: {e}"))?;
    toml::from_str(&text).map_err(|e| format!("config parse error in {arg}:\n{e}"))
}

fn resolve_out_dir(config: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    if let Some(dir) = flag {
        return dir;
    }
    if !config.output.dir.is_empty() {
        return PathBuf::from(&config.output.dir);
    }
    if let Ok(dir) = std::env::var("SEELAB_OUT_DIR") {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    PathBuf::from("out")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(msg) => {
                    eprintln!("{msg}");
                    return ExitCode::from(2);
                }
            };
            let out_dir = resolve_out_dir(&cfg, out);
            println!("effective configuration:\n");
            match toml::to_string_pretty(&cfg) {
                Ok(echo) => println!("{echo}"),
                Err(e) => {
                    eprintln!("cannot echo configuration: {e}");
                    return ExitCode::from(3);
                }
            }
            match pipeline::run_experiment(&cfg, &out_dir) {
                Ok(outcome) => {
                    println!("{}", outcome.report.summary_table());
                    println!("artifacts in {}", outcome.out_dir.display());
                    if outcome.report.any_failed() {
                        ExitCode::from(1)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => {
                    eprintln!("run failed: {e:#}");
                    ExitCode::from(3)
                }
            }
        }
        Command::ListScenarios => {
            print!("{}", pipeline::scenario_listing());
            ExitCode::SUCCESS
        }
        Command::Report { path } => {
            let text = match std::fs::read_to_string(&path) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("cannot read {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            };
            match serde_json::from_str::<seelab_core::report::RunReport>(&text) {
                Ok(report) => {
                    println!("{}", report.summary_table());
                    if report.any_failed() {
                        ExitCode::from(1)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => {
                    eprintln!("malformed report: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
