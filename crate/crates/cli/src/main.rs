use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dhtee::scenario::{
    perf_assertions, perf_csv, perf_sweep, run_extension, run_world, evaluate, ExtensionFixture, PerfConfig,
    ScenarioConfig, ScenarioError,
};
use dhtee::simnet::ScenarioTrace;

/// Minimum attestation/plain saturation throughput ratio checked by `perf`.
const PERF_MIN_RATIO: f64 = 0.5;

#[derive(Parser)]
#[command(name = "dhtee", version, about = "Cross-TEE attestation simulator")]
struct Cli {
    /// Override the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the event trace as JSON lines.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and check its assertions.
    Run { file: PathBuf },
    /// Sweep submission rates in plain and attestation mode, emitting CSV.
    Perf {
        file: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a base scenario, install a new scheme, and attest across it.
    Extend { base: PathBuf, fixture: PathBuf },
}

enum Failure {
    Config(String),
    Assertions,
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: cannot read: {e}", path.display())))
}

fn config_error(path: &Path, e: ScenarioError) -> Failure {
    match e {
        ScenarioError::Config { line, column, message } => {
            Failure::Config(format!("{}:{line}:{column}: {message}", path.display()))
        }
        other => Failure::Config(format!("{}: {other}", path.display())),
    }
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure::Config(format!("{}: cannot write: {e}", path.display())))
}

fn dump_trace(path: Option<&Path>, trace: &ScenarioTrace) -> Result<(), Failure> {
    path.map_or(Ok(()), |p| write(p, &trace.to_jsonl()))
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<(ScenarioConfig, String), Failure> {
    let text = read(path)?;
    let mut config = ScenarioConfig::from_json(&text).map_err(|e| config_error(path, e))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok((config, text))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Run { file } => {
            let (config, text) = load_scenario(file, cli.seed)?;
            let world = run_world(&config, Some(&text)).map_err(|e| config_error(file, e))?;
            let report = evaluate(&world, &config.name, &config.expect);
            dump_trace(cli.trace.as_deref(), world.sim.trace())?;
            print!("{}", report.summary());
            report.passed().then_some(()).ok_or(Failure::Assertions)
        }
        Command::Perf { file, out } => {
            let text = read(file)?;
            let mut config = PerfConfig::from_json(&text).map_err(|e| config_error(file, e))?;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            let rows = perf_sweep(&config);
            let csv = perf_csv(&rows);
            match out {
                Some(p) => write(p, &csv)?,
                None => print!("{csv}"),
            }
            let checks = perf_assertions(&rows, PERF_MIN_RATIO);
            for a in &checks {
                eprintln!("[{}] {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
            }
            checks.iter().all(|a| a.passed).then_some(()).ok_or(Failure::Assertions)
        }
        Command::Extend { base, fixture } => {
            let (config, _) = load_scenario(base, cli.seed)?;
            let ext = ExtensionFixture::from_json(&read(fixture)?).map_err(|e| config_error(fixture, e))?;
            let (report, trace) = run_extension(&config, &ext).map_err(|e| config_error(fixture, e))?;
            dump_trace(cli.trace.as_deref(), &trace)?;
            print!("{}", report.scenario.summary());
            report.passed().then_some(()).ok_or(Failure::Assertions)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Assertions) => ExitCode::from(1),
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
