//! `diskopt`: command-line front end of the disk-control toolkit.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;
use crate::config::{parse_vector, ConfigError, GridDefaults, PartialConfig, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "diskopt", version, about = "Time-minimal extremals with control in the unit disk")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Registered system name (nilpotent-kepler, pendulum-kepler).
    #[arg(long, global = true)]
    system: Option<String>,
    /// Initial state `x1,x2,x3,x4`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    x0: Option<String>,
    /// Initial adjoint `p1,p2,p3,p4` (reference or guess, depending on the command).
    #[arg(long, global = true, allow_hyphen_values = true)]
    p0: Option<String>,
    /// Cost multiplier: -1 (normal) or 0 (abnormal).
    #[arg(long, global = true, allow_hyphen_values = true)]
    p0cost: Option<f64>,
    /// Final time (or its guess for `shoot`).
    #[arg(long, global = true)]
    tf: Option<f64>,
    /// Search horizon for stratum classification.
    #[arg(long, global = true)]
    horizon: Option<f64>,
    /// Integrator tolerance.
    #[arg(long, global = true)]
    tol_int: Option<f64>,
    /// Relative rho threshold accepted as a switch.
    #[arg(long, global = true)]
    tol_switch: Option<f64>,
    /// Directory receiving the output files.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// JSON configuration file; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate an extremal and write its trajectory and switches.
    Simulate,
    /// Report the stratum (S0, Ss, Su) of an initial condition.
    Classify,
    /// Second-order optimality test along an extremal.
    Jacobi {
        /// Number of grid times for the determinant profile.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Solve the two-point boundary value problem to `--xf`.
    Shoot {
        /// Target state `x1,x2,x3,x4`.
        #[arg(long, allow_hyphen_values = true)]
        xf: Option<String>,
    },
    /// Final time along a segment of endpoints through `x(tf; x0, p0)`.
    ValueMap {
        /// Segment direction `d1,d2,d3,d4` (normalized).
        #[arg(long, allow_hyphen_values = true)]
        direction: Option<String>,
        #[arg(long)]
        half_width: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        /// Treat computed final times as values of the value function.
        #[arg(long)]
        global_optimality: bool,
    },
    /// Stratum map over a square grid of covectors around `--p0`.
    Scan {
        /// Two 1-based adjoint components spanning the grid, e.g. `2,4`.
        #[arg(long)]
        axes: Option<String>,
        #[arg(long)]
        half_width: Option<f64>,
        /// Grid points per axis.
        #[arg(long)]
        n: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Classify => "classify",
            Command::Jacobi { .. } => "jacobi",
            Command::Shoot { .. } => "shoot",
            Command::ValueMap { .. } => "value-map",
            Command::Scan { .. } => "scan",
        }
    }
}

fn vector4(flag: &'static str, s: &Option<String>) -> Result<Option<[f64; 4]>, ConfigError> {
    s.as_deref().map(|v| parse_vector::<4, f64>(flag, v)).transpose()
}

fn flag_overrides(cli: &Cli) -> Result<(PartialConfig, GridDefaults), ConfigError> {
    let c = &cli.common;
    let mut p = PartialConfig {
        system: c.system.clone(),
        x0: vector4("--x0", &c.x0)?,
        p0: vector4("--p0", &c.p0)?,
        p0cost: c.p0cost,
        tf: c.tf,
        horizon: c.horizon,
        out_dir: c.out_dir.clone(),
        tol_int: c.tol_int,
        tol_switch: c.tol_switch,
        ..Default::default()
    };
    let none = GridDefaults { n: None, half_width: None, direction: None, axes: None };
    let defaults = match &cli.command {
        Command::Simulate | Command::Classify => none,
        Command::Jacobi { n } => {
            p.n = *n;
            GridDefaults { n: Some(401), ..none }
        }
        Command::Shoot { xf } => {
            p.xf = vector4("--xf", xf)?;
            none
        }
        Command::ValueMap { direction, half_width, n, global_optimality } => {
            p.direction = vector4("--direction", direction)?;
            p.half_width = *half_width;
            p.n = *n;
            p.global_optimality = global_optimality.then_some(true);
            let s = std::f64::consts::FRAC_1_SQRT_2;
            GridDefaults { n: Some(41), half_width: Some(1e-2), direction: Some([s, 0.0, 0.0, s]), axes: None }
        }
        Command::Scan { axes, half_width, n } => {
            p.axes = axes.as_deref().map(|v| parse_vector::<2, usize>("--axes", v)).transpose()?;
            p.half_width = *half_width;
            p.n = *n;
            GridDefaults { n: Some(51), half_width: Some(0.5), direction: None, axes: Some([2, 4]) }
        }
    };
    Ok((p, defaults))
}

fn resolve(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let file = match &cli.common.config {
        Some(path) => PartialConfig::load(path)?,
        None => PartialConfig::default(),
    };
    let (flags, defaults) = flag_overrides(cli)?;
    RunConfig::resolve(cli.command.name(), file.merge(flags), defaults)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    match cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Classify => commands::classify(&cfg),
        Command::Jacobi { .. } => commands::jacobi(&cfg),
        Command::Shoot { .. } => commands::shoot(&cfg),
        Command::ValueMap { .. } => commands::value_map(&cfg),
        Command::Scan { .. } => commands::scan(&cfg),
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
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
