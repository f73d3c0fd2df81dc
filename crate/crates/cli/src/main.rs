//! `dcgrid`: check, run, and emit scenarios for multi-converter dc grids.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use dcgrid_cli::scenario_file::{self, FileError};
use dcgrid_cli::trace_csv::write_trace_csv;
use dcgrid_core::lyapunov::verify_global_stability;
use dcgrid_core::presets;
use dcgrid_core::sim::{run, validate_scenario, Scenario, TraceEpoch, UnitSample};

#[derive(Parser)]
#[command(
    name = "dcgrid",
    version,
    about = "Simulator and stability checker for clusters of dc microgrid converters",
    after_help = "SCENARIO accepts a built-in preset name (see `dcgrid presets`) or a scenario file path."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify gain inequalities, per-unit certificates, and the closed-loop
    /// eigenvalues of a scenario's starting cluster.
    Check {
        /// Preset name or scenario file path.
        scenario: String,
    },
    /// Simulate a scenario, print a summary, and optionally write the trace.
    Run {
        /// Preset name or scenario file path.
        scenario: String,
        /// Write the trace as CSV to this path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the integration step in seconds.
        #[arg(long)]
        dt: Option<f64>,
        /// Override the simulated duration in seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Override the recorded seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List built-in scenarios, or emit one as an editable scenario file.
    Presets {
        /// Name to emit; omit to list all presets.
        name: Option<String>,
        /// Write the emitted file here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failures split by exit code: scenario verification problems exit 1,
/// unusable input (bad path, malformed file, unknown preset) exits 2.
enum Failure {
    Verification(String),
    Usage(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Usage(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Verification(msg) | Failure::Usage(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<FileError> for Failure {
    fn from(e: FileError) -> Self {
        match e {
            FileError::Semantic(_) => Failure::Verification(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<dcgrid_core::Error> for Failure {
    fn from(e: dcgrid_core::Error) -> Self {
        Failure::Verification(e.to_string())
    }
}

/// Built-in scenarios: short alias, canonical name, one-line description.
const PRESET_INFO: [(&str, &str, &str); 3] = [
    (
        "case1",
        "cluster-growth",
        "ring assembles unit by unit under primary control, then current references step",
    ),
    (
        "case2",
        "leader-consensus",
        "secondary layer pulls the ring onto the leader values, then the leader steps",
    ),
    (
        "case3",
        "plug-out-replug",
        "unit 2 plugs out mid-consensus, runs alone on primary control, and rejoins",
    ),
];

fn canonical_preset(name: &str) -> Option<&'static str> {
    PRESET_INFO
        .iter()
        .find(|(alias, canonical, _)| *alias == name || *canonical == name)
        .map(|(_, canonical, _)| *canonical)
}

/// A scenario argument is first tried as a preset name, then as a file path.
fn resolve_scenario(arg: &str) -> Result<Scenario, Failure> {
    if let Some(name) = canonical_preset(arg) {
        return Ok(presets::scenario(name).expect("every listed preset exists"));
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(Failure::Usage(format!(
            "'{arg}' is neither a preset name nor an existing file; see `dcgrid presets`"
        )));
    }
    Ok(scenario_file::parse_scenario(path)?)
}

fn cmd_check(arg: &str) -> Result<(), Failure> {
    let scenario = resolve_scenario(arg)?;
    validate_scenario(&scenario)?;
    let report =
        verify_global_stability(&scenario.graph, &scenario.gains, &scenario.certificate)?;
    print!("{}", report.to_kv_text());
    if report.certified {
        Ok(())
    } else {
        Err(Failure::Verification("scenario not certified".into()))
    }
}

const SETTLE_BAND_V: f64 = 0.05;
const SETTLE_BAND_I_PU: f64 = 0.005;

/// Instant of the last sample outside `band` of the signal's final value;
/// everything after it stayed put.
fn settle_time(epoch: &TraceEpoch, pick: fn(&UnitSample) -> f64, band: f64) -> Option<f64> {
    let finals: Vec<f64> = epoch.records.last()?.units.iter().map(pick).collect();
    let mut settled_at = epoch.records.first()?.t;
    for rec in &epoch.records {
        for (sample, target) in rec.units.iter().zip(&finals) {
            if (pick(sample) - target).abs() > band {
                settled_at = rec.t;
            }
        }
    }
    Some(settled_at)
}

fn cmd_run(
    arg: &str,
    out: Option<&Path>,
    dt: Option<f64>,
    duration: Option<f64>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let mut scenario = resolve_scenario(arg)?;
    if let Some(dt) = dt {
        scenario.solver.dt = dt;
    }
    if let Some(duration) = duration {
        scenario.solver.duration = duration;
    }
    if let Some(seed) = seed {
        scenario.solver.seed = seed;
    }

    let started = Instant::now();
    let output = run(&scenario)?;
    let wall = started.elapsed().as_secs_f64();

    if let Some(path) = out {
        let file = fs::File::create(path)
            .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", path.display())))?;
        let mut writer = std::io::BufWriter::new(file);
        write_trace_csv(&mut writer, &scenario, &output)
            .and_then(|()| writer.flush())
            .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))?;
    }

    println!("scenario = {arg}");
    println!("sim_time_s = {}", scenario.solver.duration);
    println!("wall_time_s = {wall:.3}");
    println!("records = {}", output.trace.record_count());
    println!("epochs = {}", output.trace.epochs.len());
    if let Some(epoch) = output.trace.epochs.iter().rev().find(|e| !e.records.is_empty()) {
        println!("settle_band_v = {SETTLE_BAND_V}");
        if let Some(t) = settle_time(epoch, |s| s.v, SETTLE_BAND_V) {
            println!("voltage_settle_s = {t}");
        }
        println!("settle_band_i_pu = {SETTLE_BAND_I_PU}");
        if let Some(t) = settle_time(epoch, |s| s.i_c_pu, SETTLE_BAND_I_PU) {
            println!("current_settle_s = {t}");
        }
    }
    print!("{}", output.report.to_kv_text());
    Ok(())
}

fn preset_header(alias: &str, canonical: &str, blurb: &str) -> String {
    format!(
        "# dcgrid scenario \"{canonical}\" (alias: {alias})\n\
         # {blurb}.\n\
         # Capacity and load values (I_cap = 5/10/15/20 A, R_L = 20 ohm) are project\n\
         # defaults chosen for the 1:2:3:4 capacity ratio, not physical constants;\n\
         # edit any of them freely.\n"
    )
}

fn cmd_presets(name: Option<&str>, out: Option<&Path>) -> Result<(), Failure> {
    let Some(name) = name else {
        for (alias, canonical, blurb) in PRESET_INFO {
            println!("{alias:7} {canonical:18} {blurb}");
        }
        return Ok(());
    };
    let canonical = canonical_preset(name)
        .ok_or_else(|| Failure::Usage(format!("unknown preset '{name}'; see `dcgrid presets`")))?;
    let (alias, _, blurb) =
        PRESET_INFO.iter().find(|(_, c, _)| *c == canonical).expect("canonical name is listed");
    let scenario = presets::scenario(canonical).expect("every listed preset exists");
    let text = format!(
        "{}\n{}",
        preset_header(alias, canonical, blurb),
        scenario_file::emit_scenario(&scenario)?
    );
    match out {
        Some(path) => fs::write(path, text)
            .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Check { scenario } => cmd_check(&scenario),
        Command::Run { scenario, out, dt, duration, seed } => {
            cmd_run(&scenario, out.as_deref(), dt, duration, seed)
        }
        Command::Presets { name, out } => cmd_presets(name.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code())
        }
    }
}
