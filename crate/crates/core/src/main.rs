use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ddosim::scenario::{ScenarioConfig, ScenarioError};
use ddosim::sim::run_scenario;

#[derive(Parser)]
#[command(name = "ddosim", version, about = "Network attack and defense simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write samples.csv, events.log and summary.json.
    Run {
        /// Scenario TOML file.
        scenario: PathBuf,
        /// Output directory, created if missing.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the scenario's protection_enabled flag.
        #[arg(long, value_enum)]
        protection: Option<Toggle>,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Print nothing on success.
        #[arg(long)]
        quiet: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { scenario, out, protection, seed, quiet } => {
            run(&scenario, &out, protection, seed, quiet)
        }
    }
}

fn run(
    path: &Path,
    out: &Path,
    protection: Option<Toggle>,
    seed: Option<u64>,
    quiet: bool,
) -> ExitCode {
    let mut cfg = match ScenarioConfig::from_file(path) {
        Ok(cfg) => cfg,
        Err(err @ ScenarioError::Io { .. }) => {
            eprintln!("{err}");
            return ExitCode::from(1);
        }
        Err(err) => {
            eprintln!("{err}");
            return ExitCode::from(2);
        }
    };
    if let Some(p) = protection {
        cfg.protection_enabled = matches!(p, Toggle::On);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }

    let report = match run_scenario(&cfg) {
        Ok(report) => report,
        Err(err) => {
            eprintln!("{err}");
            return ExitCode::from(3);
        }
    };

    if let Err(err) = report.write_to_dir(out) {
        eprintln!("cannot write report to {}: {err}", out.display());
        return ExitCode::from(1);
    }

    if !quiet {
        println!(
            "{}: {} samples, {} detections, {} blocks -> {}",
            cfg.name,
            report.samples.len(),
            report.detections.len(),
            report.blocks.len(),
            out.display()
        );
    }
    ExitCode::SUCCESS
}
