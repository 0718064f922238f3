//! `tandem-polling` command-line front end.

mod commands;
mod manifest;

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tandem_polling::{Error, Params};

use crate::commands::Artifact;
use crate::manifest::{manifest_path, Clock};

#[derive(Parser, Debug)]
#[command(name = "tandem-polling", version = manifest::VERSION, about = "Rare-event analysis of a two-queue polling system")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Regime, special points and twisted rates.
    Classify(Common),
    /// Busy-period simulation of the twisted chain with a level-visit histogram.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Simulated level fractions next to the closed-form profile.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Truncated linear-solve checks and tables.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Truncation window in levels.
        #[arg(long = "L", default_value_t = 40)]
        window: u32,
        #[arg(long, value_enum, default_value_t = Check::All)]
        check: Check,
        /// Level used by the representation check and the green table.
        #[arg(long, default_value_t = 10)]
        level: u32,
        /// Emit a table instead of the check report.
        #[arg(long, value_enum)]
        table: Option<Table>,
    },
    /// Tail asymptotics and the spiral profile.
    Asymptotics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        level: Option<u32>,
        #[arg(long)]
        spiral_profile: bool,
        /// Direction for sector asymptotics and the off-ray rate.
        #[arg(long, value_delimiter = ',')]
        direction: Option<Vec<f64>>,
        /// Boundary sum for the ray prefactor.
        #[arg(long)]
        boundary_sum: Option<f64>,
    },
    /// Exponential twist of a sheet's increments toward a direction.
    Twist {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        direction: Vec<f64>,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        sheet: u8,
        /// Use the h-transformed increments instead of the original ones.
        #[arg(long)]
        twisted: bool,
        /// Restrict to the supporting line through the direction.
        #[arg(long)]
        face: bool,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Rates lambda1,lambda2,mu; rescaled to sum to one.
    #[arg(long, value_delimiter = ',', required = true)]
    rates: Vec<f64>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Output file; a manifest is written beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct SimArgs {
    #[arg(long)]
    level: u32,
    /// Trajectories (default 100000, or 1000000 with --paper-scale).
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    paper_scale: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Pool this many independent runs with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    /// Worker threads (default: available cores).
    #[arg(long)]
    threads: Option<usize>,
}

impl SimArgs {
    fn run(&self) -> commands::SimRequest {
        commands::SimRequest {
            level: self.level,
            trajectories: self.trajectories(),
            seed: self.seed,
            seeds: self.seeds,
            threads: self.threads(),
        }
    }

    fn trajectories(&self) -> u64 {
        self.n.unwrap_or(if self.paper_scale { 1_000_000 } else { 100_000 })
    }

    fn threads(&self) -> usize {
        self.threads.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Json,
    Csv,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Check {
    All,
    Marginals,
    Representation,
    FirstPassage,
    Lyapunov,
    ChangDown,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Table {
    Stationary,
    Green,
}

/// Message and process exit code.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Regime(_) | Error::NoFaceMass => 3,
            Error::Numerical(_) => 1,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            return Failure { code: 0, message: String::new() };
        }
        Failure { code: 1, message: format!("i/o error: {e}") }
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure { code: 1, message: format!("csv error: {e}") }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure { code: 1, message: format!("json error: {e}") }
    }
}

fn parse_rates(rates: &[f64]) -> Result<([f64; 3], Params), Failure> {
    let raw: [f64; 3] = rates.try_into().map_err(|_| Failure::input("--rates takes exactly three values"))?;
    Ok((raw, Params::new(raw[0], raw[1], raw[2])?))
}

fn parse_direction(d: &[f64]) -> Result<[f64; 2], Failure> {
    d.try_into().map_err(|_| Failure::input("--direction takes exactly two values"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let clock = Clock::start();
    let (common, artifact, seed) = match cli.command {
        Command::Classify(common) => {
            let (raw, p) = parse_rates(&common.rates)?;
            (common, commands::classify(raw, p)?, None)
        }
        Command::Simulate { common, sim } => {
            let (raw, p) = parse_rates(&common.rates)?;
            let a = commands::simulate(raw, p, &sim.run())?;
            (common, a, Some(sim.seed))
        }
        Command::Compare { common, sim } => {
            let (raw, p) = parse_rates(&common.rates)?;
            let a = commands::compare(raw, p, &sim.run())?;
            (common, a, Some(sim.seed))
        }
        Command::Oracle { common, window, check, level, table } => {
            let (raw, p) = parse_rates(&common.rates)?;
            (common, commands::oracle(raw, p, window, check, level, table)?, None)
        }
        Command::Asymptotics { common, level, spiral_profile, direction, boundary_sum } => {
            let (raw, p) = parse_rates(&common.rates)?;
            let dir = direction.as_deref().map(parse_direction).transpose()?;
            (common, commands::asymptotics(raw, p, level, spiral_profile, dir, boundary_sum)?, None)
        }
        Command::Twist { common, direction, sheet, twisted, face } => {
            let (raw, p) = parse_rates(&common.rates)?;
            (common, commands::twist(raw, p, parse_direction(&direction)?, sheet, twisted, face)?, None)
        }
    };
    emit(&common, artifact, &clock, seed)
}

fn emit(common: &Common, artifact: Artifact, clock: &Clock, seed: Option<u64>) -> Result<(), Failure> {
    let format = common.format.unwrap_or(if artifact.csv.is_some() { Format::Csv } else { Format::Json });
    let body = match format {
        Format::Csv => match &artifact.csv {
            Some(bytes) => bytes.clone(),
            None => commands::flatten_csv(&artifact.summary)?,
        },
        Format::Json => {
            let mut s = serde_json::to_vec_pretty(artifact.detail.as_ref().unwrap_or(&artifact.summary))?;
            s.push(b'\n');
            s
        }
    };
    let summary = {
        let mut s = serde_json::to_vec_pretty(&artifact.summary)?;
        s.push(b'\n');
        s
    };
    match &common.out {
        Some(path) => {
            fs::write(path, &body)?;
            let m = clock.manifest(artifact.raw_rates, artifact.params, artifact.settings, seed, vec![path.clone()]);
            let mut text = serde_json::to_vec_pretty(&m)?;
            text.push(b'\n');
            fs::write(manifest_path(path), text)?;
            std::io::stdout().write_all(&summary)?;
        }
        None => {
            std::io::stdout().write_all(&body)?;
            if format == Format::Csv && artifact.csv.is_some() {
                std::io::stderr().write_all(&summary)?;
            }
        }
    }
    for w in &artifact.warnings {
        eprintln!("warning: {w}");
    }
    match artifact.failed {
        Some(msg) => Err(Failure::check(msg)),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) if f.code == 0 => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
