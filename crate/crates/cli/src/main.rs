//! `aeronet`: run each pipeline stage from the command line.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 validation error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aeronet::clustering::wcss;
use aeronet::fixture;
use aeronet::marl::export_tables;
use aeronet::mobility::{build_traces, parse_checkins, MobilityError, TraceSet};
use aeronet::report;
use aeronet::scenario::{Controller, Scenario, ScenarioError};
use aeronet::sim::{self, SimError};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "aeronet", version, about = "Plan UAV base-station trajectories from predicted user movement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn check-ins into per-slot user traces.
    Ingest(IngestArgs),
    /// Fit per-user echo state networks and write one-step position predictions.
    Predict(StageArgs),
    /// Partition users among UAVs with GAK-means on the slot-0 positions.
    Cluster(StageArgs),
    /// Learn the initial UAV deployment.
    Place(ControlArgs),
    /// Train placement Q-tables and export them with the learning curve.
    Train(ControlArgs),
    /// Run the full pipeline and write a report directory.
    Simulate(ControlArgs),
    /// Repeat the pipeline over values of one scenario key.
    Sweep(SweepArgs),
    /// Summarise a report directory.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Scenario file (bundled scenario when omitted).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Check-in CSV with columns user_id,timestamp,lat,lon.
    #[arg(long, conflicts_with = "synthetic_fixture", required_unless_present = "synthetic_fixture")]
    checkins: Option<PathBuf>,
    /// Generate the bundled synthetic cohort instead of reading check-ins.
    #[arg(long)]
    synthetic_fixture: bool,
    /// Also write the generated check-ins to this CSV.
    #[arg(long, requires = "synthetic_fixture")]
    checkins_out: Option<PathBuf>,
    /// Output trace file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Fixture seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct StageArgs {
    /// Scenario file.
    #[arg(long)]
    scenario: PathBuf,
    /// Trace file written by `ingest`.
    #[arg(long)]
    traces: PathBuf,
    /// Output path: a JSON file for predict, cluster and place, a directory otherwise.
    #[arg(long)]
    out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ControlArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Controller override: learned, learned_no_power_control, static, gakmeans_follow.
    #[arg(long, value_parser = parse_controller)]
    controller: Option<Controller>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Controller override.
    #[arg(long, value_parser = parse_controller)]
    controller: Option<Controller>,
    /// Scenario key to vary.
    #[arg(long)]
    axis: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<f64>,
    /// Runs in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report directory written by `simulate`.
    #[arg(long)]
    run: PathBuf,
}

fn parse_controller(s: &str) -> std::result::Result<Controller, String> {
    Controller::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Controller::ALL.iter().map(|c| c.name()).collect();
        format!("unknown controller '{s}'; expected one of {}", names.join(", "))
    })
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Validation(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Validation(m) => f.write_str(m),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Io { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<MobilityError> for CliError {
    fn from(e: MobilityError) -> Self {
        match e {
            MobilityError::Io { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Scenario(s) => s.into(),
            SimError::UnknownAxis { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Usage(format!("{}: {e}", path.display()))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("no such file: {}", path.display())))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn load_scenario(path: &Path, seed: Option<u64>, controller: Option<Controller>) -> Result<Scenario> {
    require_file(path)?;
    let mut s = Scenario::load(path)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if let Some(c) = controller {
        s.controller = c;
    }
    Ok(s)
}

fn load_inputs(stage: &StageArgs, controller: Option<Controller>) -> Result<(Scenario, TraceSet)> {
    require_file(&stage.traces)?;
    let scenario = load_scenario(&stage.scenario, stage.seed, controller)?;
    let traces = TraceSet::load(&stage.traces)?;
    sim::check_traces(&scenario, &traces)?;
    Ok((scenario, traces))
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let scenario = match &a.scenario {
        Some(p) => load_scenario(p, None, None)?,
        None => Scenario::bundled(),
    };
    let text = if a.synthetic_fixture {
        let mut spec = scenario.fixture_spec();
        if let Some(seed) = a.seed {
            spec.seed = seed;
        }
        let csv = fixture::to_csv(&fixture::synthetic_checkins(&spec, &scenario.extent));
        if let Some(p) = &a.checkins_out {
            fs::write(p, &csv).map_err(io_err(p))?;
        }
        csv
    } else {
        let p = a.checkins.as_ref().expect("clap enforces a source");
        require_file(p)?;
        fs::read_to_string(p).map_err(io_err(p))?
    };
    let cohort = parse_checkins(&text, scenario.mobility.min_reports)?;
    let traces = build_traces(
        &cohort,
        &scenario.extent,
        scenario.mobility.start,
        scenario.slot_seconds,
        scenario.n_slots,
    )?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(&a.out, traces.to_json()).map_err(io_err(&a.out))?;
    log::info!("{} users, {} slots -> {}", traces.users.len(), traces.n_slots, a.out.display());
    Ok(())
}

fn predict(a: &StageArgs) -> Result<()> {
    let (scenario, traces) = load_inputs(a, None)?;
    let p = sim::predict_stage(&scenario, &traces)?;
    let users: Vec<_> = traces
        .users
        .iter()
        .zip(&p.predicted)
        .map(|(u, pred)| serde_json::json!({ "user_id": u.user_id, "positions": pred }))
        .collect();
    write_json(
        &a.out,
        &serde_json::json!({
            "slot_seconds": traces.slot_seconds,
            "test_start": p.test_start,
            "test_mse": p.test_mse,
            "historical_average_mse": p.historical_average_mse,
            "zero_order_hold_mse": p.zero_order_hold_mse,
            "worst_normal_residual": p.worst_normal_residual,
            "users": users,
        }),
    )
}

fn cluster(a: &StageArgs) -> Result<()> {
    let (scenario, traces) = load_inputs(a, None)?;
    let p = sim::predict_stage(&scenario, &traces)?;
    let c = sim::cluster_stage(&scenario, &p.predicted)?;
    let bound = sim::power_feasibility(&scenario, &c)?;
    let t0: Vec<[f64; 2]> = p.predicted.iter().map(|u| u[0]).collect();
    write_json(
        &a.out,
        &serde_json::json!({
            "assignment": c.assignment,
            "centroids": c.centroids,
            "sizes": c.sizes(),
            "wcss": wcss(&c, &t0),
            "pmax_lower_bound": bound,
        }),
    )
}

fn place(a: &ControlArgs, export: bool) -> Result<()> {
    let (scenario, traces) = load_inputs(&a.stage, a.controller)?;
    let p = sim::predict_stage(&scenario, &traces)?;
    let c = sim::cluster_stage(&scenario, &p.predicted)?;
    sim::power_feasibility(&scenario, &c)?;
    let placement = sim::placement_stage(&scenario, &p.predicted, &c, scenario.controller)?;
    let grid = scenario.grid();
    if export {
        let dir = &a.stage.out;
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_json(&dir.join("q_tables.json"), &export_tables(&placement.tables, &grid))?;
        let curve = report::learning_curve_csv(&placement.training.curve);
        let path = dir.join("learning_curve.csv");
        fs::write(&path, curve).map_err(io_err(&path))?;
        return Ok(());
    }
    let uavs: Vec<_> = placement.states.iter().map(|s| grid.uav(s)).collect();
    write_json(
        &a.stage.out,
        &serde_json::json!({
            "states": placement.states,
            "uavs": uavs,
            "sum_rate_bps": placement.sum_rate,
            "centroid_baseline_sum_rate_bps": placement.baseline_sum_rate,
            "constraints": placement.constraints,
            "running_best": placement.training.running_best(),
            "q_storage_entries": placement.tables.storage_entries(),
        }),
    )
}

fn simulate(a: &ControlArgs) -> Result<()> {
    let (scenario, traces) = load_inputs(&a.stage, a.controller)?;
    let out = sim::run_pipeline(&scenario, &traces)?;
    let dir = &a.stage.out;
    report::write_run(dir, &out.report, &scenario.extent).map_err(io_err(dir))?;
    report::write_timing(dir, &out.timing).map_err(io_err(dir))?;
    log::info!(
        "{}: mean sum rate {:.0} bps, {} min-rate violations",
        out.report.controller.name(),
        out.report.mean_sum_rate,
        out.report.min_rate_violations
    );
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    if !sim::SWEEP_AXES.contains(&a.axis.as_str()) {
        return Err(SimError::UnknownAxis { axis: a.axis.clone() }.into());
    }
    let (scenario, traces) = load_inputs(&a.stage, a.controller)?;
    let rows = sim::sweep(&scenario, &traces, &a.axis, &a.values, a.jobs)?;
    let dir = &a.stage.out;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("sweep.csv");
    fs::write(&path, report::sweep_csv(&rows)).map_err(io_err(&path))?;
    for (i, row) in rows.iter().enumerate() {
        let sub = dir.join(format!("run_{i:03}"));
        report::write_run(&sub, &row.report, &scenario.extent).map_err(io_err(&sub))?;
    }
    Ok(())
}

fn summarize(a: &ReportArgs) -> Result<()> {
    let path = a.run.join("report.json");
    require_file(&path)?;
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let field = |k: &str| v.get(k).cloned().unwrap_or(serde_json::Value::Null);
    println!("controller          {}", field("controller"));
    println!("seed                {}", field("seed"));
    println!("uavs x slots        {} x {}", field("n_uavs"), field("n_slots"));
    println!("mean sum rate (bps) {}", field("mean_sum_rate"));
    println!("min-rate violations {}", field("min_rate_violations"));
    println!("power lower bound   {}", field("pmax_lower_bound"));
    if let Some(p) = v.get("prediction") {
        println!("prediction mse      {}", p.get("test_mse").cloned().unwrap_or_default());
        println!("historical avg mse  {}", p.get("historical_average_mse").cloned().unwrap_or_default());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Predict(a) => predict(a),
        Command::Cluster(a) => cluster(a),
        Command::Place(a) => place(a, false),
        Command::Train(a) => place(a, true),
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => summarize(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AERONET_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
