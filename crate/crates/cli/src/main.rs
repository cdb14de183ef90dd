//! `pumpmap`: trace pump light, solve the microwave mode, and compute overlaps.
//!
//! Exit codes: 0 ok, 2 invalid arguments, 3 config error, 4 I/O error,
//! 5 numerical failure.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pumpmap_core::geom::Axis;
use pumpmap_core::pipeline::{SweepParam, DEFAULT_PITCH_MM};
use pumpmap_core::scene::RegionTag;

#[derive(Debug, Parser)]
#[command(name = "pumpmap", version, about = "Optical pump maps and microwave-mode overlap for pumped masers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ray-trace a scene config into a voxel grid of absorbed power (VGD1).
    Trace(TraceArgs),
    /// Solve (and optionally tune) the TE01δ mode of a cavity config (FMP1).
    Mode(ModeArgs),
    /// Overlap Δ of a traced grid with a field map, written as a CSV report.
    Overlap(OverlapArgs),
    /// Butt vs invasive (vs uniform) report plus projected maps.
    Compare(CompareArgs),
    /// Vary one scene parameter and tabulate absorption and Δ.
    Sweep(SweepArgs),
    /// Print the header of a VGD1, FMP1, manifest or config file.
    Inspect(InspectArgs),
}

/// Ray count; accepts `10000000` or `1e7`.
fn parse_count(s: &str) -> Result<u64, String> {
    if let Ok(n) = s.parse::<u64>() {
        return Ok(n);
    }
    let x: f64 = s.parse().map_err(|_| format!("`{s}` is not a count"))?;
    if x.is_finite() && x >= 0.0 && x.fract() == 0.0 && x <= u64::MAX as f64 {
        Ok(x as u64)
    } else {
        Err(format!("`{s}` is not a non-negative whole number"))
    }
}

#[derive(Debug, Args)]
struct TraceOpts {
    /// Number of rays (e.g. 1e7).
    #[arg(long, value_parser = parse_count)]
    rays: u64,
    /// Master seed; falls back to PUMPMAP_SEED.
    #[arg(long, env = "PUMPMAP_SEED")]
    seed: Option<u64>,
    /// Voxel pitch in mm.
    #[arg(long = "pitch-mm", alias = "pitch", default_value_t = DEFAULT_PITCH_MM)]
    pitch_mm: f64,
    /// Tracer threads. Results depend only on the seed for a fixed count;
    /// 1 (default) is the reference for bit-exact reproduction.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, Args)]
struct TraceArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    opts: TraceOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ModeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "target-ghz")]
    target_ghz: f64,
    /// Finite-difference mesh pitch in mm.
    #[arg(long = "pitch-mm", alias = "pitch", default_value_t = 0.25)]
    pitch_mm: f64,
    #[arg(long)]
    out: PathBuf,
    /// Bisect the ceiling height until the mode hits the target.
    #[arg(long)]
    tune: bool,
    #[arg(long = "tol-ghz", default_value_t = 1e-3)]
    tol_ghz: f64,
    /// Ceiling bracket for tuning, in mm.
    #[arg(long = "bracket-mm", num_args = 2, value_names = ["LO", "HI"])]
    bracket_mm: Option<Vec<f64>>,
    /// Write the tuned cavity config here.
    #[arg(long = "tuned-config")]
    tuned_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GammaOpts {
    /// Spin-system constants config; enables Γ from Δ.
    #[arg(long)]
    constants: Option<PathBuf>,
    /// Optical pump power in W, used with --constants.
    #[arg(long = "pump-power-w")]
    pump_power_w: Option<f64>,
}

#[derive(Debug, Args)]
struct OverlapArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    field: PathBuf,
    #[arg(long, default_value = "crystal")]
    region: RegionTag,
    #[arg(long)]
    out: PathBuf,
    /// Row label.
    #[arg(long)]
    label: Option<String>,
    #[command(flatten)]
    gamma: GammaOpts,
    /// Pump pulse energy in mJ; with --threshold-mj gives Γ = E / E_th.
    #[arg(long = "pulse-energy-mj")]
    pulse_energy_mj: Option<f64>,
    #[arg(long = "threshold-mj", default_value_t = 3.3)]
    threshold_mj: f64,
    /// Unloaded Q; gives Q_m = Q0 / Γ.
    #[arg(long)]
    q0: Option<f64>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    butt: PathBuf,
    #[arg(long)]
    invasive: PathBuf,
    #[arg(long)]
    field: PathBuf,
    /// Meter config; adds correction factors.
    #[arg(long)]
    meter: Option<PathBuf>,
    /// Add a uniform-pumping row over the invasive crystal.
    #[arg(long)]
    uniform: bool,
    /// Projection axis for the 2-D maps.
    #[arg(long, default_value = "y")]
    axis: Axis,
    #[command(flatten)]
    opts: TraceOpts,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// One of: tip-angle, alpha, insertion-depth, crystal-diameter.
    #[arg(long)]
    param: SweepParam,
    #[arg(long, requires_all = ["to", "steps"], conflicts_with = "values")]
    from: Option<f64>,
    #[arg(long)]
    to: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Explicit comma-separated values instead of --from/--to/--steps.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    /// Field map; adds Δ columns.
    #[arg(long)]
    field: Option<PathBuf>,
    #[command(flatten)]
    gamma: GammaOpts,
    #[command(flatten)]
    opts: TraceOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    file: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Trace(a) => commands::trace(a),
        Command::Mode(a) => commands::mode(a),
        Command::Overlap(a) => commands::overlap(a),
        Command::Compare(a) => commands::compare(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pumpmap: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
