use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;
use stratum_core::messages::{encode, parse, validate, MessageKind, ValidationStatus};
use stratum_core::runtime::Mode;
use stratum_core::sim::{
    activation_experiment, gain_experiment, overhead_experiment, run_scenario, ScenarioScript, SimError, Uniform,
};

#[derive(Parser)]
#[command(name = "stratum", version, about = "Layered control runtime simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its report.
    Run {
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "ctha")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
        /// Write the per-step trace table as CSV instead of the JSON report.
        #[arg(long)]
        csv: bool,
    },
    /// Composite gain of random residual chains, raw and projected.
    Gain {
        #[arg(long, default_value_t = 8)]
        depth: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Layer count (matrix size).
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        lo: f64,
        #[arg(long, default_value_t = 1.5)]
        hi: f64,
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step message and comparison totals for 1..=n-max layers.
    Overhead {
        #[arg(long, default_value_t = 8)]
        n_max: usize,
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a message file against its contract.
    Validate {
        message: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
    },
    /// Active-layer pattern of a scenario.
    Activation {
        scenario: PathBuf,
        /// Override the scenario's horizon.
        #[arg(long)]
        horizon: Option<u64>,
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ctha,
    Unconstrained,
    SingleScale,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ctha => Mode::Ctha,
            ModeArg::Unconstrained => Mode::Unconstrained,
            ModeArg::SingleScale => Mode::SingleScale,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Summary,
    Plan,
    Policy,
}

impl From<KindArg> for MessageKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Summary => MessageKind::Summary,
            KindArg::Plan => MessageKind::Plan,
            KindArg::Policy => MessageKind::Policy,
        }
    }
}

/// Failure classes, one per exit code.
enum Failure {
    Usage(String),
    Input(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Input(_) => 2,
            Failure::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Input(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidScenario(_) => Failure::Input(e.to_string()),
            SimError::Params(_) => Failure::Usage(e.to_string()),
            SimError::Runtime(_) | SimError::Hierarchy(_) => Failure::Internal(e.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn load_scenario(path: &Path) -> Result<ScenarioScript, Failure> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    ScenarioScript::from_json(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, bytes).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut stdout = io::stdout().lock();
            let tail: &[u8] = if bytes.ends_with(b"\n") { b"" } else { b"\n" };
            match stdout.write_all(bytes).and_then(|_| stdout.write_all(tail)) {
                Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Failure::Internal(e.to_string())),
                _ => Ok(()),
            }
        }
    }
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>, Failure> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    let internal = |e: csv::Error| Failure::Internal(e.to_string());
    w.write_record(header).map_err(internal)?;
    for r in rows {
        w.write_record(&r).map_err(internal)?;
    }
    w.into_inner().map_err(|e| Failure::Internal(e.to_string()))
}

fn join(layers: &[usize]) -> String {
    layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { scenario, mode, out, csv } => {
            let script = load_scenario(&scenario)?;
            let report = run_scenario(&script, mode.into())?;
            let bytes = if csv {
                let rows = report
                    .traces
                    .iter()
                    .map(|t| {
                        vec![
                            t.step.to_string(),
                            join(&t.active_layers),
                            t.messages_sent.to_string(),
                            t.comparisons.to_string(),
                            t.conflicts.to_string(),
                            t.violations_blocked.to_string(),
                            t.violations_emitted.to_string(),
                            t.emitted.len().to_string(),
                            t.final_action.id.clone(),
                            t.final_action.category.to_string(),
                        ]
                    })
                    .collect();
                csv_bytes(
                    &[
                        "step",
                        "active_layers",
                        "messages",
                        "comparisons",
                        "conflicts",
                        "violations_blocked",
                        "violations_emitted",
                        "actions_emitted",
                        "final_id",
                        "final_category",
                    ],
                    rows,
                )?
            } else {
                encode(&report)
            };
            emit(Some(&out), &bytes)
        }
        Command::Gain { depth, trials, seed, n, lo, hi, csv, out } => {
            let curve = gain_experiment(depth, trials, seed, n, Uniform { lo, hi })?;
            let bytes = if csv {
                let rows = curve
                    .rows
                    .iter()
                    .map(|r| {
                        [
                            r.depth as f64,
                            r.unconstrained_q10,
                            r.unconstrained_median,
                            r.unconstrained_q90,
                            r.constrained_median,
                            r.constrained_fwd_min,
                            r.constrained_fwd_max,
                            r.constrained_bwd_min,
                            r.constrained_bwd_max,
                        ]
                        .iter()
                        .map(ToString::to_string)
                        .collect()
                    })
                    .collect();
                csv_bytes(
                    &[
                        "depth",
                        "unconstrained_q10",
                        "unconstrained_median",
                        "unconstrained_q90",
                        "constrained_median",
                        "constrained_fwd_min",
                        "constrained_fwd_max",
                        "constrained_bwd_min",
                        "constrained_bwd_max",
                    ],
                    rows,
                )?
            } else {
                encode(&curve)
            };
            emit(out.as_deref(), &bytes)
        }
        Command::Overhead { n_max, csv, out } => {
            if n_max == 0 {
                return Err(Failure::Usage("--n-max must be at least 1".into()));
            }
            let ns: Vec<usize> = (1..=n_max).collect();
            let rows = overhead_experiment(&ns)?;
            let bytes = if csv {
                let table = rows
                    .iter()
                    .map(|r| {
                        vec![r.n.to_string(), r.mode.as_str().to_string(), r.messages.to_string(), r.comparisons.to_string()]
                    })
                    .collect();
                csv_bytes(&["depth", "mode", "messages", "comparisons"], table)?
            } else {
                encode(&rows)
            };
            emit(out.as_deref(), &bytes)
        }
        Command::Validate { message, kind } => {
            let bytes = read(&message)?;
            let raw: Value = parse(&bytes).map_err(|e| Failure::Input(format!("{}: {e}", message.display())))?;
            let outcome = validate(&raw, kind.into());
            match outcome.status {
                ValidationStatus::Valid => {
                    println!("valid");
                    Ok(())
                }
                status => {
                    let mut detail = format!("{}: {status:?}", message.display()).to_lowercase();
                    for d in &outcome.diagnostics {
                        detail.push_str("\n  ");
                        detail.push_str(d);
                    }
                    Err(Failure::Input(detail))
                }
            }
        }
        Command::Activation { scenario, horizon, csv, out } => {
            let script = load_scenario(&scenario)?;
            let report = activation_experiment(&script, horizon.unwrap_or(script.horizon))?;
            let bytes = if csv {
                let rows = report
                    .pattern
                    .iter()
                    .enumerate()
                    .map(|(k, layers)| vec![(k + 1).to_string(), layers.len().to_string(), join(layers)])
                    .collect();
                csv_bytes(&["step", "active_count", "active_layers"], rows)?
            } else {
                encode(&report)
            };
            emit(out.as_deref(), &bytes)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("stratum: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
