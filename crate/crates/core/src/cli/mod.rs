//! Scenario files, run orchestration and table export: the `lorasim` command.

mod export;
mod run;
mod scenario;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use export::{
    export_tables, fmt_g6, write_summary, ENERGY_EVENTS, ENERGY_EVENTS_HEADER, PHY_PACKETS, PHY_PACKETS_HEADER,
    RADIO_RECEPTIONS, RADIO_RECEPTIONS_HEADER,
};
pub use run::{run_scenario, summarize, DeviceReport, RadioSummary, RunError, RunOutputs};
pub use scenario::{
    parse_scenario, ActivationSpec, ApplicationSpec, ClassSpec, DeviceSpec, GatewaySpec, LorawanSpec,
    MulticastSpec, PhySpec, ScenarioError, ScenarioSpec, TrafficSpec, SCENARIO_VERSION,
};

/// Modules accepted by `--log-level`.
pub const LOG_MODULES: [&str; 6] = ["kernel", "phy", "energy", "lorawan", "firmware_bridge", "cli"];

#[derive(Debug, Parser)]
#[command(name = "lorasim", version, about = "LoRa/LoRaWAN discrete-event simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario and export its tables.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the scenario length in seconds.
        #[arg(long)]
        length: Option<f64>,
        /// Output directory for the CSV tables.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// MODULE=LEVEL (e.g. phy=debug) or a bare LEVEL for everything.
        /// Repeatable.
        #[arg(long = "log-level", value_name = "MODULE=LEVEL")]
        log_level: Vec<String>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Scenario { path: PathBuf, source: ScenarioError },
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("--log-level {0:?}: {1}")]
    LogLevel(String, String),
}

/// Parses `MODULE=LEVEL` filters into (module path, level) pairs.
pub fn parse_log_levels(specs: &[String]) -> Result<Vec<(Option<String>, log::LevelFilter)>, CliError> {
    specs
        .iter()
        .map(|s| {
            let (module, level) = match s.split_once('=') {
                Some((m, l)) => (Some(m), l),
                None => (None, s.as_str()),
            };
            let level: log::LevelFilter = level
                .parse()
                .map_err(|_| CliError::LogLevel(s.clone(), format!("unknown level {level:?}")))?;
            let module = match module {
                None => None,
                Some(m) if LOG_MODULES.contains(&m) => Some(format!("lorasim::{m}")),
                Some(m) => {
                    return Err(CliError::LogLevel(
                        s.clone(),
                        format!("unknown module {m:?}, expected one of {}", LOG_MODULES.join(", ")),
                    ))
                }
            };
            Ok((module, level))
        })
        .collect()
}

fn init_logging(filters: &[(Option<String>, log::LevelFilter)]) {
    let mut b = env_logger::Builder::new();
    b.filter_level(log::LevelFilter::Warn);
    for (module, level) in filters {
        match module {
            Some(m) => b.filter_module(m, *level),
            None => b.filter_level(*level),
        };
    }
    let _ = b.try_init();
}

/// Entry point of the `lorasim` binary. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let Command::Run {
        scenario,
        seed,
        length,
        out,
        log_level,
    } = cli.command;
    init_logging(&parse_log_levels(&log_level)?);
    let text = std::fs::read_to_string(&scenario).map_err(|source| CliError::Io {
        path: scenario.clone(),
        source,
    })?;
    let mut spec = parse_scenario(&text).map_err(|source| CliError::Scenario {
        path: scenario.clone(),
        source,
    })?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    if let Some(length) = length {
        spec.length_s = length;
    }
    let outputs = run_scenario(&spec)?;
    let files = export_tables(&outputs, &out).map_err(|source| CliError::Io { path: out.clone(), source })?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    write_summary(&outputs.summary, &mut lock).map_err(|source| CliError::Io {
        path: "<stdout>".into(),
        source,
    })?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
