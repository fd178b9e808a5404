use std::process::ExitCode;

use anyhow::anyhow;
use log::{info, warn};
use serde::Serialize;

use crowdcal::calibration::{calibrate as run_calibration, AdjointMethod, AdjointOptions, StopReason};
use crowdcal::config::{load_gradcheck, CalibrationRunConfig, DataOverrides, DataSummary, FdConfig, SimulationConfig};
use crowdcal::data_io::{export_csv, export_json, export_trajectory, read_trajectory};
use crowdcal::density::{bounded_voronoi, fundamental_diagram, FdWarning};
use crowdcal::gradcheck::{check_problem, random_problem, GradCheckReport, GradCheckSpec};
use crowdcal::simulator::{lane_count, simulate as run_simulation, Trajectory};
use crowdcal::{ControlVector, Error, Rect, Vec2};

use crate::manifest::RunManifest;
use crate::{CalibrateArgs, FdArgs, GradcheckArgs, SimulateArgs};

pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: 1,
        error: e.into(),
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: 2,
        error: e.into(),
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParams(_)
            | Error::InvalidScenario(_)
            | Error::Config(_)
            | Error::Parse { .. }
            | Error::DuplicateSample { .. }
            | Error::GridMismatch(_)
            | Error::NoCoverage { .. }
            | Error::Toml { .. } => usage(e),
            _ => runtime(e),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        runtime(e)
    }
}

type CmdResult = Result<ExitCode, CliError>;

fn load_or_usage<T>(r: crowdcal::Result<T>) -> Result<T, CliError> {
    r.map_err(usage)
}

#[derive(Debug, Serialize)]
struct GroupLanes {
    name: String,
    agents: usize,
    /// Coordinate clustered for the lane count: the one across the walking
    /// direction.
    axis: &'static str,
    lanes: usize,
}

#[derive(Debug, Serialize)]
struct SimulationSummary {
    final_time: f64,
    steps: usize,
    frames: usize,
    agents: usize,
    lane_gap: f64,
    groups: Vec<GroupLanes>,
}

fn lane_summary(cfg: &SimulationConfig, traj: &Trajectory) -> Vec<GroupLanes> {
    let last = &traj.positions[traj.steps()];
    let mut offset = 0;
    cfg.groups
        .iter()
        .map(|g| {
            let members = &last[offset..offset + g.count];
            offset += g.count;
            let (axis, coords): (&'static str, Vec<f64>) = if g.desired.x.abs() >= g.desired.y.abs() {
                ("y", members.iter().map(|p| p.y).collect())
            } else {
                ("x", members.iter().map(|p| p.x).collect())
            };
            GroupLanes {
                name: g.name.clone(),
                agents: g.count,
                axis,
                lanes: lane_count(&coords, cfg.lane_gap()),
            }
        })
        .collect()
}

pub fn simulate(a: SimulateArgs) -> CmdResult {
    let mut cfg = load_or_usage(SimulationConfig::load(&a.config))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let mut manifest = RunManifest::new("simulate", cfg.seed, &cfg, &a.out);
    manifest.config_path = Some(&a.config);
    manifest.write()?;

    let traj = run_simulation(&cfg.scenario(), &cfg.params, cfg.horizon, cfg.dt)?;
    export_trajectory(&traj, &a.out.join("trajectory.csv"))?;
    let summary = SimulationSummary {
        final_time: traj.horizon(),
        steps: traj.steps(),
        frames: traj.n_frames(),
        agents: traj.n_agents(),
        lane_gap: cfg.lane_gap(),
        groups: lane_summary(&cfg, &traj),
    };
    export_json(&summary, &a.out.join("summary.json"))?;
    println!(
        "simulated {} agents to t = {} s ({} frames)",
        summary.agents, summary.final_time, summary.frames
    );
    for g in &summary.groups {
        println!(
            "group {}: {} lanes ({} clusters, gap {} m)",
            g.name, g.lanes, g.axis, summary.lane_gap
        );
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Serialize)]
struct HistoryRow {
    iteration: usize,
    lambda: f64,
    #[serde(rename = "A")]
    attraction: f64,
    #[serde(rename = "R")]
    repulsion: f64,
    #[serde(rename = "J")]
    cost: f64,
}

#[derive(Debug, Serialize)]
struct CalibrationOutput<'a> {
    u0: ControlVector,
    u: ControlVector,
    initial_cost: f64,
    final_cost: f64,
    iterations: usize,
    stop: StopReason,
    data: &'a DataSummary,
}

pub fn calibrate(a: CalibrateArgs) -> CmdResult {
    let mut cfg = load_or_usage(CalibrationRunConfig::load(&a.config))?;
    cfg.apply(&DataOverrides {
        seed: a.seed,
        column_map: a.column_map.clone(),
        unit_scale: a.unit_scale,
        frame_rate: a.frame_rate,
        t0: a.t0,
        window: a.window,
    });
    cfg.validate()?;
    let mut manifest = RunManifest::new("calibrate", cfg.seed, &cfg, &a.out);
    manifest.config_path = Some(&a.config);
    manifest.data_path = Some(&a.data);
    manifest.write()?;

    let (problem, summary) = cfg.prepare(&a.data)?;
    info!(
        "{} agents retained ({} dropped); groups: {}",
        summary.agents,
        summary.dropped,
        summary
            .groups
            .iter()
            .map(|g| format!("{} x{} w=({:.3}, {:.3})", g.name, g.agents, g.desired.x, g.desired.y))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let res = run_calibration(&problem, cfg.u0, &cfg.calibration())?;
    let rows: Vec<HistoryRow> = res
        .history
        .iter()
        .map(|r| HistoryRow {
            iteration: r.iteration,
            lambda: r.u.lambda,
            attraction: r.u.attraction,
            repulsion: r.u.repulsion,
            cost: r.cost,
        })
        .collect();
    export_csv(&rows, &a.out.join("history.csv"))?;
    let out = CalibrationOutput {
        u0: cfg.u0,
        u: res.u,
        initial_cost: res.history[0].cost,
        final_cost: res.cost,
        iterations: res.history.len() - 1,
        stop: res.stop,
        data: &summary,
    };
    export_json(&out, &a.out.join("result.json"))?;
    println!(
        "J {:.6e} -> {:.6e} after {} iterations; u = (lambda {:.6}, A {:.6}, R {:.6})",
        out.initial_cost, out.final_cost, out.iterations, res.u.lambda, res.u.attraction, res.u.repulsion
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_region(s: &str) -> Result<Rect, CliError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(anyhow!("region {s:?}: {e}")))?;
    match v[..] {
        [x0, x1, y0, y1] if x0 < x1 && y0 < y1 => Ok(Rect::new(x0, x1, y0, y1)),
        _ => Err(usage(anyhow!(
            "region {s:?} must be x_min,x_max,y_min,y_max with positive extent"
        ))),
    }
}

fn show(r: &Rect) -> String {
    format!("[{}, {}] x [{}, {}]", r.x_min, r.x_max, r.y_min, r.y_max)
}

fn bounding_box(traj: &Trajectory) -> Option<Rect> {
    let mut it = traj.positions.iter().flatten();
    let first = *it.next()?;
    let (mut lo, mut hi) = (first, first);
    for p in it {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    Some(Rect::new(lo.x, hi.x, lo.y, hi.y))
}

#[derive(Debug, Serialize)]
struct CellRecord {
    agent: usize,
    area: f64,
    polygon: Vec<[f64; 2]>,
}

#[derive(Debug, Serialize)]
struct FrameCells {
    t: f64,
    cells: Vec<CellRecord>,
}

#[derive(Debug, Serialize)]
struct FdSummary<'a> {
    region: Rect,
    sample_times: usize,
    samples: usize,
    correlation: Option<f64>,
    warnings: &'a [FdWarning],
}

#[derive(Debug, Serialize)]
struct FdRunConfig<'a> {
    simulation: Option<&'a SimulationConfig>,
    region: Rect,
    interval: f64,
}

pub fn fd(a: FdArgs) -> CmdResult {
    let sim_cfg = match &a.config {
        Some(path) => {
            let mut cfg = load_or_usage(SimulationConfig::load(path))?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            Some(cfg)
        }
        None => None,
    };
    let region = match (&a.region, sim_cfg.as_ref().and_then(|c| c.fd.as_ref())) {
        (Some(s), _) => parse_region(s)?,
        (None, Some(fd)) => fd.region,
        (None, None) => return Err(usage(anyhow!("no region: pass --region or add an [fd] table"))),
    };
    let interval = a
        .interval
        .or(sim_cfg.as_ref().and_then(|c| c.fd.as_ref()).map(|f| f.interval))
        .unwrap_or(0.5);
    if let Some(cfg) = &sim_cfg {
        if !cfg.domain.contains_rect(&region) {
            return Err(usage(anyhow!(
                "region {} is not inside the domain {}",
                show(&region),
                show(&cfg.domain)
            )));
        }
    }
    let run = FdRunConfig {
        simulation: sim_cfg.as_ref(),
        region,
        interval,
    };
    let mut manifest = RunManifest::new("fd", sim_cfg.as_ref().map_or(0, |c| c.seed), &run, &a.out);
    manifest.config_path = a.config.as_deref();
    manifest.data_path = a.data.as_deref();
    manifest.write()?;

    let traj = match (&sim_cfg, &a.data) {
        (Some(cfg), _) => run_simulation(&cfg.scenario(), &cfg.params, cfg.horizon, cfg.dt)?,
        (None, Some(path)) => {
            let traj = read_trajectory(path).map_err(usage)?;
            let overlaps = bounding_box(&traj).is_some_and(|b| {
                region.x_min < b.x_max && region.x_max > b.x_min && region.y_min < b.y_max && region.y_max > b.y_min
            });
            if !overlaps {
                return Err(usage(anyhow!(
                    "region {} lies outside the trajectory's extent",
                    show(&region)
                )));
            }
            traj
        }
        (None, None) => return Err(usage(anyhow!("pass --config or --data"))),
    };
    let times = FdConfig {
        region,
        interval,
        start: 0.0,
    }
    .sample_times(traj.horizon())?;
    let diagram = fundamental_diagram(&traj, &region, &times)?;
    for w in &diagram.warnings {
        println!(
            "warning: t = {} s: {} ({} agents in region)",
            w.t, w.reason, w.agents_in_region
        );
    }
    export_csv(&diagram.samples, &a.out.join("fd_samples.csv"))?;

    let mut frames = Vec::new();
    for &t in &times {
        if diagram
            .warnings
            .iter()
            .any(|w| w.t == traj.time((t / traj.dt).round() as usize))
        {
            continue;
        }
        let k = (t / traj.dt).round() as usize;
        let cells = bounded_voronoi(&traj.positions[k], &region)?;
        frames.push(FrameCells {
            t: traj.time(k),
            cells: cells
                .into_iter()
                .filter(|c| c.area > 0.0)
                .map(|c| CellRecord {
                    agent: c.owner,
                    area: c.area,
                    polygon: c.polygon.iter().map(|v| [v.x, v.y]).collect(),
                })
                .collect(),
        });
    }
    export_json(&frames, &a.out.join("voronoi_cells.json"))?;
    let summary = FdSummary {
        region,
        sample_times: times.len(),
        samples: diagram.samples.len(),
        correlation: diagram.correlation(),
        warnings: &diagram.warnings,
    };
    export_json(&summary, &a.out.join("fd_summary.json"))?;
    match summary.correlation {
        Some(r) => println!(
            "{} samples; Pearson correlation(density, speed) = {r:.4}",
            summary.samples
        ),
        None => println!("{} samples; correlation undefined", summary.samples),
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Serialize)]
struct GradcheckOutput {
    method: AdjointMethod,
    report: GradCheckReport,
    reference_method: AdjointMethod,
    reference: GradCheckReport,
    tolerance: f64,
    passed: bool,
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let mut spec = match &a.config {
        Some(path) => load_or_usage(load_gradcheck(path))?,
        None => GradCheckSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(out) = &a.out {
        let mut manifest = RunManifest::new("gradcheck", spec.seed, &spec, out);
        manifest.config_path = a.config.as_deref();
        manifest.write()?;
    }
    let options = AdjointOptions {
        flip_velocity_coupling: a.corrupt_adjoint_sign,
    };
    if a.corrupt_adjoint_sign {
        warn!("adjoint velocity-coupling sign deliberately flipped");
    }
    let problem = random_problem(&spec)?;
    let reference_method = match spec.adjoint {
        AdjointMethod::Discrete => AdjointMethod::Continuous,
        AdjointMethod::Continuous => AdjointMethod::Discrete,
    };
    let report = check_problem(&problem, &spec, spec.adjoint, options)?;
    let reference = check_problem(&problem, &spec, reference_method, options)?;
    let passed = report.passes(spec.tolerance);
    println!(
        "gradient check: N = {}, T = {} s, dt = {} s, {:?} adjoint",
        spec.agents, spec.horizon, spec.dt, spec.adjoint
    );
    print!("{}", report.table());
    println!(
        "{reference_method:?} adjoint max relative error {:.3e}",
        reference.max_rel_error
    );
    println!(
        "{} (tolerance {:.0e})",
        if passed { "PASS" } else { "FAIL" },
        spec.tolerance
    );
    if let Some(out) = &a.out {
        let result = GradcheckOutput {
            method: spec.adjoint,
            report,
            reference_method,
            reference,
            tolerance: spec.tolerance,
            passed,
        };
        export_json(&result, &out.join("gradcheck.json"))?;
    }
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
