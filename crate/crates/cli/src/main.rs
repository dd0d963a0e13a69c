use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{ArgGroup, Parser, Subcommand, ValueEnum};

use dcgrid::existence::CertifyOptions;
use dcgrid::network::parse_network;
use dcgrid::report::analyze;
use dcgrid::simulate::{parse_scenario, simulate, Termination};
use dcgrid::sweep::{run_sweep, SweepAnalysis, SweepMode, SweepParam, SweepRequest};

const EXIT_INPUT: u8 = 64;
const EXIT_INTERNAL: u8 = 70;
const EXIT_COLLAPSED: u8 = 10;

#[derive(Parser)]
#[command(name = "dcgrid", version, about = "Equilibrium, stability and simulation of DC microgrids with constant power loads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify equilibrium existence and small-signal stability.
    Analyze {
        spec: PathBuf,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Integrate a scenario and write the trace as CSV.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one parameter, on a grid or by bisection.
    #[command(group(ArgGroup::new("mode").required(true).args(["points", "bisect"])))]
    Sweep {
        spec: PathBuf,
        #[arg(long, value_enum)]
        param: Param,
        #[arg(long)]
        min: f64,
        #[arg(long)]
        max: f64,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        bisect: Option<f64>,
        /// Space grid points logarithmically.
        #[arg(long)]
        log: bool,
        /// Defaults to existence for uref and load, stability for b.
        #[arg(long, value_enum)]
        analysis: Option<Analysis>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    Uref,
    Load,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum Analysis {
    Existence,
    Stability,
    Both,
}

enum Failure {
    Input(anyhow::Error),
    Internal(anyhow::Error),
}

impl From<dcgrid::Error> for Failure {
    fn from(e: dcgrid::Error) -> Self {
        if e.is_input_error() {
            Failure::Input(e.into())
        } else {
            Failure::Internal(e.into())
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::Input)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::Internal)
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Analyze { spec, out, seed } => {
            let network = parse_network(&read(&spec)?)?;
            let options = CertifyOptions { seed, ..CertifyOptions::default() };
            let report = analyze(&network, &options)?;
            if let Some(out) = out {
                let json = serde_json::to_string_pretty(&report.to_json()).map_err(|e| Failure::Internal(e.into()))?;
                write(&out, json.as_bytes())?;
            }
            print!("{}", report.to_text());
            Ok(report.exit_code as u8)
        }
        Command::Simulate { scenario, out } => {
            let scenario = parse_scenario(&read(&scenario)?)?;
            let trace = simulate(&scenario)?;
            let mut buf = Vec::new();
            trace.write_csv(&mut buf).map_err(|e| Failure::Internal(e.into()))?;
            write(&out, &buf)?;
            let last = trace.last();
            println!("samples: {}", trace.samples.len());
            println!("final t: {}", last.t);
            println!("final u_L: {:?}", last.u_l);
            match &trace.termination {
                Termination::Completed => {
                    println!("termination: completed");
                    Ok(0)
                }
                Termination::Collapsed { time, node, reason } => {
                    println!("termination: collapsed at t={time} node={node} ({reason})");
                    Ok(EXIT_COLLAPSED)
                }
            }
        }
        Command::Sweep { spec, param, min, max, points, bisect, log, analysis, jobs, seed, out } => {
            let base = parse_network(&read(&spec)?)?;
            let param = match param {
                Param::Uref => SweepParam::Uref,
                Param::Load => SweepParam::Load,
                Param::B => SweepParam::B,
            };
            let analysis = match analysis {
                Some(Analysis::Existence) => SweepAnalysis::Existence,
                Some(Analysis::Stability) => SweepAnalysis::Stability,
                Some(Analysis::Both) => SweepAnalysis::Both,
                None if param == SweepParam::B => SweepAnalysis::Stability,
                None => SweepAnalysis::Existence,
            };
            let mode = match (points, bisect) {
                (Some(count), _) => SweepMode::Points { count, log },
                (None, Some(tolerance)) => SweepMode::Bisect { tolerance },
                (None, None) => unreachable!("clap requires one mode"),
            };
            let request = SweepRequest { base, param, min, max, mode, analysis, jobs, seed };
            let result = run_sweep(&request)?;
            let mut buf = Vec::new();
            result.write_csv(&mut buf).map_err(|e| Failure::Internal(e.into()))?;
            match out {
                Some(out) => write(&out, &buf)?,
                None => io::stdout().write_all(&buf).map_err(|e| Failure::Internal(e.into()))?,
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INTERNAL)
        }
    }
}
