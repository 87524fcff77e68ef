//! Command-line front end for the consensus estimation simulator.
//!
//! `run` simulates a scenario and writes a CSV trace plus a
//! `<out>.metrics.json` sidecar, `inspect` prints a resolved scenario as JSON
//! and `metrics` recomputes the summary from an existing trace.

mod telemetry;

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use consensus_etkf::scenario::{ConfigError, RunError};
use consensus_etkf::trace::TraceError;
use consensus_etkf::{compute_metrics, paper_scenario, run_scenario, ScenarioConfig, TraceLog};
use thiserror::Error;

pub use telemetry::{payloads, publish, Telemetry, TelemetryPayload, TelemetryReport};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;
pub const EXIT_IO: u8 = 5;

/// Default settling band for the metrics sidecar, in volts.
pub const DEFAULT_BAND: f64 = 0.5;

#[derive(Debug, Parser)]
#[command(
    name = "etkf-sim",
    version,
    about = "Event-triggered consensus estimation simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write its trace.
    Run(RunArgs),
    /// Print the resolved scenario as canonical JSON.
    Inspect(ScenarioArgs),
    /// Recompute metrics from a trace CSV.
    Metrics {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BAND)]
        band: f64,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// `paper-5agent`, `paper-5agent-delayed` or `file:PATH`.
    #[arg(long, value_parser = parse_source)]
    pub scenario: ScenarioSource,
    #[arg(long, allow_negative_numbers = true)]
    pub delay_ms: Option<f64>,
    /// Voltage send-on-delta threshold.
    #[arg(long, allow_negative_numbers = true)]
    pub delta: Option<f64>,
    /// Estimation period in seconds.
    #[arg(long, allow_negative_numbers = true)]
    pub period: Option<f64>,
    /// Run length in seconds.
    #[arg(long, allow_negative_numbers = true)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// MQTT endpoint, e.g. `mqtt://localhost:1883`.
    #[arg(long, requires = "mqtt_topic_prefix")]
    pub mqtt_url: Option<String>,
    #[arg(long, requires = "mqtt_url")]
    pub mqtt_topic_prefix: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioSource {
    Builtin { delayed: bool },
    File(PathBuf),
}

fn parse_source(s: &str) -> Result<ScenarioSource, String> {
    match s {
        "paper-5agent" => Ok(ScenarioSource::Builtin { delayed: false }),
        "paper-5agent-delayed" => Ok(ScenarioSource::Builtin { delayed: true }),
        _ => match s.strip_prefix("file:") {
            Some(path) if !path.is_empty() => Ok(ScenarioSource::File(path.into())),
            _ => Err("expected paper-5agent, paper-5agent-delayed or file:PATH".into()),
        },
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error("simulation failed: {0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Validation(_) => EXIT_VALIDATION,
            Self::Runtime(_) => EXIT_RUNTIME,
            Self::Io { .. } => EXIT_IO,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_owned(),
            source,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => c.into(),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl ScenarioArgs {
    /// Loads the base scenario, applies overrides and validates the result.
    pub fn resolve(&self) -> Result<ScenarioConfig, CliError> {
        let mut config = match &self.scenario {
            ScenarioSource::Builtin { delayed } => paper_scenario(*delayed),
            ScenarioSource::File(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
            }
        };
        if let Some(v) = self.delay_ms {
            config.delay_ms = v;
        }
        if let Some(v) = self.delta {
            config.delta_voltage = v;
        }
        if let Some(v) = self.period {
            config.period_s = v;
        }
        if let Some(v) = self.duration {
            config.duration_s = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Path of the metrics sidecar written next to `out`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".metrics.json");
    PathBuf::from(name)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn metrics_json(trace: &TraceLog, band: f64) -> Result<String, CliError> {
    let m = compute_metrics(trace, band).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(serde_json::to_string_pretty(&m).expect("metrics serialize") + "\n")
}

/// Runs a parsed command, writing normal output to `out` and diagnostics to
/// `err`.
pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let stdout_err = |e: io::Error| CliError::io(Path::new("<stdout>"), e);
    match cli.command {
        Command::Inspect(args) => {
            let config = args.resolve()?;
            writeln!(out, "{}", config.canonical_json()).map_err(stdout_err)?;
        }
        Command::Metrics { trace, band } => {
            let file = fs::File::open(&trace).map_err(|e| CliError::io(&trace, e))?;
            let log = TraceLog::read_csv(io::BufReader::new(file)).map_err(|e| match e {
                TraceError::Csv(c) if c.is_io_error() => CliError::Runtime(c.to_string()),
                other => CliError::Validation(format!("{}: {other}", trace.display())),
            })?;
            if !(band > 0.0) {
                return Err(CliError::Usage(format!(
                    "--band must be positive, got {band}"
                )));
            }
            out.write_all(metrics_json(&log, band)?.as_bytes())
                .map_err(stdout_err)?;
        }
        Command::Run(args) => {
            let config = args.scenario.resolve()?;
            let trace = run_scenario(&config)?;
            write_file(&args.out, trace.to_csv_string().as_bytes())?;
            write_file(
                &sidecar_path(&args.out),
                metrics_json(&trace, DEFAULT_BAND)?.as_bytes(),
            )?;
            if let (Some(url), Some(prefix)) = (&args.mqtt_url, &args.mqtt_topic_prefix) {
                let messages = payloads(&trace, &config);
                let report = publish(&Telemetry::new(url, prefix), &messages);
                match &report.error {
                    None => writeln!(err, "telemetry: published {} estimates", report.published),
                    Some(e) => writeln!(
                        err,
                        "telemetry: {e} ({} of {} estimates published)",
                        report.published,
                        messages.len()
                    ),
                }
                .map_err(|e| CliError::io(Path::new("<stderr>"), e))?;
            }
            if let Some(meta) = &trace.meta {
                writeln!(
                    out,
                    "{} agents, {} ticks, {} state and {} average messages -> {}",
                    meta.agents,
                    meta.ticks,
                    meta.state_messages,
                    meta.average_messages,
                    args.out.display()
                )
                .map_err(stdout_err)?;
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit
/// status.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli, &mut io::stdout().lock(), &mut io::stderr().lock()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
