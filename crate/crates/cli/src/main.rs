//! `crowdcal` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numerical failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "crowdcal",
    version,
    about = "Pedestrian interaction model: simulation, calibration, density analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario and write its trajectory and summary statistics.
    Simulate(SimulateArgs),
    /// Calibrate (lambda, A, R) against trajectory data.
    Calibrate(CalibrateArgs),
    /// Voronoi densities and the density/speed fundamental diagram.
    Fd(FdArgs),
    /// Compare the adjoint gradient with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Calibration config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Archive file or trajectory CSV, per `[data] format`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Archive columns as "id,frame,x,y[,z]".
    #[arg(long)]
    column_map: Option<String>,
    /// Multiplier from archive units to meters.
    #[arg(long)]
    unit_scale: Option<f64>,
    /// Archive frame rate in Hz.
    #[arg(long)]
    frame_rate: Option<f64>,
    /// Start of the data window (s).
    #[arg(long)]
    t0: Option<f64>,
    /// Length of the data window (s); replaces T.
    #[arg(long)]
    window: Option<f64>,
}

#[derive(Debug, Args)]
struct FdArgs {
    /// Scenario config to simulate; its `[fd]` table supplies region and times.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    config: Option<PathBuf>,
    /// Trajectory CSV to analyze instead of simulating.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Region of interest "x_min,x_max,y_min,y_max".
    #[arg(long, allow_hyphen_values = true)]
    region: Option<String>,
    /// Seconds between sample times.
    #[arg(long)]
    interval: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Instance config (TOML); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optional directory for the manifest and report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flip the velocity-coupling sign in the adjoint (negative control).
    #[arg(long, hide = true)]
    corrupt_adjoint_sign: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Fd(a) => commands::fd(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.error);
            ExitCode::from(e.code)
        }
    }
}
