//! End-to-end twin experiments: configuration files, seeded runs, metrics and
//! CSV/SVG output.
//!
//! A run generates the truth once, then steps the dual filter through the
//! horizon. In drone mode the planner moves the drone after every filter step
//! and the drone reports from the cell it occupies at the next step.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info};
use serde::Deserialize;

use crate::ctm::{updated_critical_density, CorridorGeometry, FundamentalDiagram};
use crate::dual::{ClampStats, DualFilterState, EstimatorConfig, SensorFeed};
use crate::error::{config, Error, Result};
use crate::planner::{plan_step, DroneState, Heading};
use crate::rng::derive_seed;
use crate::scenario::{
    emit_drone_obs, emit_loop_obs, emit_probe_speed_obs, generate_truth, place, IncidentEvent,
    ScenarioConfig, SensorConfig, TruthTrace,
};
use crate::svg::{Chart, Series, Stroke};

/// Half-width of the band a v_max estimate must hold to count as converged [km/h].
pub const CONVERGENCE_TOLERANCE: f64 = 3.0;
/// Consecutive in-band steps required for convergence.
pub const CONVERGENCE_HOLD: usize = 30;

const SENSOR_STREAM: u64 = 1;
const ESTIMATOR_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Loop detectors and probe speeds only.
    #[default]
    Baseline,
    /// Baseline sensors plus one routed drone.
    Drone,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Drone => "drone",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "drone" => Ok(Mode::Drone),
            other => Err(config("run.mode", format!("expected baseline or drone, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub estimator: EstimatorConfig,
    pub mode: Mode,
    /// Weight on the v_max covariance trace in the planner objective.
    pub lambda: f64,
    pub horizon_steps: u64,
    /// Where CSV and SVG output goes; `None` skips writing.
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            estimator: EstimatorConfig::default(),
            mode: Mode::Baseline,
            lambda: 0.5,
            horizon_steps: 360,
            output_dir: None,
            seed: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(config("run.lambda", "must lie in [0, 1]"));
        }
        if self.horizon_steps == 0 {
            return Err(config("run.horizon_steps", "must be at least 1"));
        }
        self.scenario.validate()?;
        self.estimator.validate(&self.scenario.fd0)
    }

    /// Parses and validates a TOML run file. Validation failures carry the
    /// line of the offending key when it can be found.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: RunFile = toml::from_str(text)?;
        let cfg = file.into_config();
        cfg.validate().map_err(|e| match e {
            Error::Config { field, reason } => match locate_field(text, &field) {
                Some(line) => Error::ConfigAt { line, field, reason },
                None => Error::Config { field, reason },
            },
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunFile {
    run: RunSection,
    scenario: ScenarioSection,
    estimator: EstimatorConfig,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunSection {
    mode: Mode,
    lambda: f64,
    horizon_steps: u64,
    seed: u64,
    output_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        let d = RunConfig::default();
        Self {
            mode: d.mode,
            lambda: d.lambda,
            horizon_steps: d.horizon_steps,
            seed: d.seed,
            output_dir: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScenarioSection {
    demand: f64,
    offramp_split: f64,
    initial_density: f64,
    warmup_steps: u64,
    capacity_clamp: bool,
    drone_start_cell: usize,
    drone_launch_step: u64,
    fundamental_diagram: FundamentalDiagram,
    geometry: GeometrySection,
    /// Omitted: every incident cell runs a 20 km/h incident for the whole run.
    incidents: Option<Vec<IncidentEvent>>,
    sensors: SensorConfig,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let d = ScenarioConfig::default();
        Self {
            demand: d.demand,
            offramp_split: d.offramp_split,
            initial_density: d.initial_density,
            warmup_steps: d.warmup_steps,
            capacity_clamp: d.capacity_clamp,
            drone_start_cell: d.drone_start_cell,
            drone_launch_step: d.drone_launch_step,
            fundamental_diagram: d.fd0,
            geometry: GeometrySection::default(),
            incidents: None,
            sensors: d.sensors,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GeometrySection {
    num_cells: usize,
    dt_seconds: f64,
    offramp_cell: Option<usize>,
    incident_cells: Vec<usize>,
    lanes: u32,
}

impl Default for GeometrySection {
    fn default() -> Self {
        let g = CorridorGeometry::freeway_with_offramp();
        Self {
            num_cells: g.num_cells,
            dt_seconds: g.dt * 3600.0,
            offramp_cell: g.offramp_cell,
            incident_cells: g.incident_cells,
            lanes: g.lanes,
        }
    }
}

impl RunFile {
    fn into_config(self) -> RunConfig {
        let s = self.scenario;
        let fd0 = s.fundamental_diagram;
        let dt = s.geometry.dt_seconds / 3600.0;
        let geometry = CorridorGeometry {
            num_cells: s.geometry.num_cells,
            dx: fd0.v_max * dt,
            dt,
            entry_cell: 0,
            offramp_cell: s.geometry.offramp_cell,
            exit_cell: s.geometry.num_cells.saturating_sub(1),
            incident_cells: s.geometry.incident_cells,
            lanes: s.geometry.lanes,
        };
        let incident_schedule = s.incidents.unwrap_or_else(|| {
            geometry
                .incident_cells
                .iter()
                .map(|&cell| IncidentEvent {
                    cell,
                    start_step: 0,
                    end_step: None,
                    reduced_v_max: 20.0,
                })
                .collect()
        });
        RunConfig {
            scenario: ScenarioConfig {
                geometry,
                fd0,
                demand: s.demand,
                offramp_split: s.offramp_split,
                incident_schedule,
                sensors: s.sensors,
                initial_density: s.initial_density,
                warmup_steps: s.warmup_steps,
                capacity_clamp: s.capacity_clamp,
                drone_start_cell: s.drone_start_cell,
                drone_launch_step: s.drone_launch_step,
                seed: self.run.seed,
            },
            estimator: self.estimator,
            mode: self.run.mode,
            lambda: self.run.lambda,
            horizon_steps: self.run.horizon_steps,
            output_dir: self.run.output_dir,
            seed: self.run.seed,
        }
    }
}

fn table_header(line: &str) -> Option<(&str, bool)> {
    let t = line.trim();
    if let Some(inner) = t.strip_prefix("[[").and_then(|r| r.split("]]").next()) {
        return Some((inner.trim(), true));
    }
    t.strip_prefix('[')
        .and_then(|r| r.split(']').next())
        .map(|inner| (inner.trim(), false))
}

/// Finds the 1-based line of a dotted field path such as
/// `scenario.incidents[1].reduced_v_max`, falling back to the nearest
/// enclosing table header.
fn locate_field(text: &str, field: &str) -> Option<usize> {
    // Resolve each line to the table path it belongs to.
    let mut tables = Vec::new();
    let mut current = String::new();
    let mut counts: std::collections::HashMap<String, usize> = Default::default();
    for line in text.lines() {
        if let Some((name, array)) = table_header(line) {
            current = if array {
                let k = counts.entry(name.to_string()).or_insert(0);
                *k += 1;
                format!("{name}[{}]", *k - 1)
            } else {
                name.to_string()
            };
            tables.push((current.clone(), true));
        } else {
            tables.push((current.clone(), false));
        }
    }
    let segs: Vec<&str> = field.split('.').collect();
    for n in (1..=segs.len()).rev() {
        let table = segs[..n - 1].join(".");
        let key = segs[n - 1];
        for (i, line) in text.lines().enumerate() {
            let (t, is_header) = &tables[i];
            if *is_header || *t != table {
                continue;
            }
            let trimmed = line.trim_start();
            if let Some(rest) = trimmed.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
        let full = segs[..n].join(".");
        if let Some(i) = tables.iter().position(|(t, h)| *h && *t == full) {
            return Some(i + 1);
        }
    }
    None
}

/// Per-step traces of one run, everything needed to recompute the metrics.
/// Rows are indexed by step, `0..=horizon`; row 0 is the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub mode: Mode,
    pub truth: TruthTrace,
    pub density_mean: Vec<Vec<f64>>,
    pub density_std: Vec<Vec<f64>>,
    /// Columns follow `truth.incident_cells`.
    pub vmax_mean: Vec<Vec<f64>>,
    pub vmax_std: Vec<Vec<f64>>,
    pub density_trace: Vec<f64>,
    pub vmax_trace: Vec<f64>,
    pub speed_event: Vec<bool>,
    /// Cumulative clamp counters after each step.
    pub clamps: Vec<ClampStats>,
    /// Drone position at each step; empty in baseline mode.
    pub drone: Vec<DroneSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DroneSample {
    pub cell: usize,
    pub heading: Heading,
    /// False while the drone waits for launch; it observes nothing then.
    pub airborne: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dwell {
    pub segment: &'static str,
    pub fraction: f64,
}

pub const DWELL_SEGMENTS: [&str; 4] = [
    "before_upstream_incident",
    "upstream_incident_to_start",
    "start_to_downstream_incident",
    "after_downstream_incident",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub mode: Mode,
    pub steps: usize,
    /// Over all cells and steps `1..=steps`.
    pub density_rmse: f64,
    pub density_rmse_per_cell: Vec<f64>,
    pub incident_cells: Vec<usize>,
    /// `[step][incident]`, steps `0..=steps`.
    pub vmax_mean: Vec<Vec<f64>>,
    pub vmax_std: Vec<Vec<f64>>,
    pub convergence_step: Vec<Option<usize>>,
    pub speed_event_steps: Vec<usize>,
    pub drone_cells: Vec<usize>,
    /// Empty in baseline mode.
    pub dwell: Vec<Dwell>,
    pub density_clamp_fraction: f64,
    pub vmax_clamp_fraction: f64,
}

/// Generates the truth and runs the filter (and the planner in drone mode).
pub fn simulate(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let sc = &cfg.scenario;
    let geom = &sc.geometry;
    let truth = generate_truth(sc, cfg.horizon_steps)?;
    let sensor_seed = derive_seed(cfg.seed, &[SENSOR_STREAM]);
    let mut state = DualFilterState::new(
        geom.clone(),
        sc.fd0,
        sc.boundary(),
        cfg.estimator.clone(),
        derive_seed(cfg.seed, &[ESTIMATOR_STREAM]),
    )?;
    let mut drone = match cfg.mode {
        Mode::Drone => Some(DroneState::new(
            sc.drone_start_cell,
            Heading::Upstream,
            sc.sensors.drone_view_cells,
        )),
        Mode::Baseline => None,
    };

    let steps = cfg.horizon_steps as usize;
    let mut rec = RunRecord {
        mode: cfg.mode,
        truth,
        density_mean: Vec::with_capacity(steps + 1),
        density_std: Vec::with_capacity(steps + 1),
        vmax_mean: Vec::with_capacity(steps + 1),
        vmax_std: Vec::with_capacity(steps + 1),
        density_trace: Vec::with_capacity(steps + 1),
        vmax_trace: Vec::with_capacity(steps + 1),
        speed_event: Vec::with_capacity(steps + 1),
        clamps: Vec::with_capacity(steps + 1),
        drone: Vec::new(),
    };
    record_state(&mut rec, &state, false, drone.as_ref().map(|d| (d, false)));

    for step in 1..=cfg.horizon_steps {
        let airborne = step > sc.drone_launch_step;
        let field = rec.truth.field(step as usize);
        let true_fds = sc.true_fds(step)?;
        let mut feed = SensorFeed::default();
        if sc.sensors.loop_due(step) {
            feed.loop_density = Some(emit_loop_obs(
                &field,
                sc.sensors.loop_noise_std,
                sc.fd0.rho_j,
                sensor_seed,
                step,
            ));
        }
        feed.probe_speed = emit_probe_speed_obs(
            &field,
            &true_fds,
            &geom.incident_cells,
            &sc.sensors,
            sensor_seed,
            step,
        )?;
        if let Some(d) = drone.as_ref().filter(|_| airborne) {
            feed.drone = Some(emit_drone_obs(
                &field,
                &sc.true_vmax(step),
                d,
                geom,
                &sc.sensors,
                sc.fd0.rho_j,
                sensor_seed,
                step,
            )?);
        }
        let report = state.run_step(&feed)?;
        record_state(
            &mut rec,
            &state,
            report.speed_assimilated,
            drone.as_ref().map(|d| (d, airborne)),
        );
        if let Some(d) = drone.as_mut().filter(|_| step >= sc.drone_launch_step) {
            let plan = plan_step(d, &state, cfg.lambda, &sc.sensors)?;
            debug!(
                "step {step}: drone {} -> {} ({})",
                d.cell,
                plan.next.cell,
                plan.next.heading.as_str()
            );
            *d = plan.next;
        }
    }
    info!(
        "{} run finished: {} steps, {} speed assimilations",
        cfg.mode, steps, state.speed_events
    );
    Ok(rec)
}

fn record_state(
    rec: &mut RunRecord,
    state: &DualFilterState,
    event: bool,
    drone: Option<(&DroneState, bool)>,
) {
    rec.density_mean.push(state.density_mean().iter().copied().collect());
    rec.density_std.push(state.density_ens.std_dev().iter().copied().collect());
    rec.vmax_mean.push(state.vmax_mean().iter().copied().collect());
    rec.vmax_std.push(state.vmax_ens.std_dev().iter().copied().collect());
    rec.density_trace.push(state.density_trace());
    rec.vmax_trace.push(state.vmax_trace());
    rec.speed_event.push(event);
    rec.clamps.push(state.clamps);
    if let Some((d, airborne)) = drone {
        rec.drone.push(DroneSample {
            cell: d.cell,
            heading: d.heading,
            airborne,
        });
    }
}

/// First step from which `mean` stays within `tol` of `truth` for `hold`
/// consecutive steps. Index 0 is skipped (it holds the prior).
pub fn convergence_step(mean: &[f64], truth: &[f64], tol: f64, hold: usize) -> Option<usize> {
    let mut run = 0;
    for t in 1..mean.len().min(truth.len()) {
        if (mean[t] - truth[t]).abs() <= tol {
            run += 1;
            if run >= hold {
                return Some(t + 1 - hold);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// Fraction of `cells` falling in each segment of [`DWELL_SEGMENTS`], split
/// at the first and last incident cells and the drone start cell.
pub fn dwell_fractions(cells: &[usize], start: usize, incident_cells: &[usize]) -> Vec<Dwell> {
    let (Some(&u), Some(&d)) = (incident_cells.iter().min(), incident_cells.iter().max()) else {
        return Vec::new();
    };
    if cells.is_empty() {
        return Vec::new();
    }
    let mut counts = [0usize; 4];
    for &c in cells {
        let k = if c < u {
            0
        } else if c <= start {
            1
        } else if c <= d {
            2
        } else {
            3
        };
        counts[k] += 1;
    }
    let total = cells.len() as f64;
    DWELL_SEGMENTS
        .iter()
        .zip(counts)
        .map(|(&segment, n)| Dwell {
            segment,
            fraction: n as f64 / total,
        })
        .collect()
}

pub fn compute_metrics(rec: &RunRecord) -> Result<RunMetrics> {
    let steps = rec.truth.steps();
    let rows = steps + 1;
    for (name, len) in [
        ("density_mean", rec.density_mean.len()),
        ("density_std", rec.density_std.len()),
        ("vmax_mean", rec.vmax_mean.len()),
        ("vmax_std", rec.vmax_std.len()),
        ("truth_vmax", rec.truth.vmax.len()),
        ("density_trace", rec.density_trace.len()),
        ("vmax_trace", rec.vmax_trace.len()),
        ("speed_event", rec.speed_event.len()),
        ("clamps", rec.clamps.len()),
    ] {
        if len != rows {
            return Err(Error::Misaligned(format!("{name} has {len} rows, truth has {rows}")));
        }
    }
    if rec.mode == Mode::Drone && rec.drone.len() != rows {
        return Err(Error::Misaligned(format!(
            "drone trace has {} rows, truth has {rows}",
            rec.drone.len()
        )));
    }
    let k = rec.truth.densities.first().map_or(0, Vec::len);
    let v = rec.truth.incident_cells.len();
    for t in 0..rows {
        if rec.density_mean[t].len() != k || rec.truth.densities[t].len() != k {
            return Err(Error::Misaligned(format!("step {t}: cell counts differ")));
        }
        if rec.vmax_mean[t].len() != v || rec.truth.vmax[t].len() != v {
            return Err(Error::Misaligned(format!("step {t}: incident counts differ")));
        }
    }

    let mut per_cell = vec![0.0; k];
    for t in 1..rows {
        for (i, acc) in per_cell.iter_mut().enumerate() {
            let e = rec.density_mean[t][i] - rec.truth.densities[t][i];
            *acc += e * e;
        }
    }
    let total: f64 = per_cell.iter().sum();
    let n = steps.max(1) as f64;
    let density_rmse = (total / (n * k.max(1) as f64)).sqrt();
    let density_rmse_per_cell = per_cell.iter().map(|s| (s / n).sqrt()).collect();

    let convergence = (0..v)
        .map(|i| {
            let mean: Vec<f64> = rec.vmax_mean.iter().map(|r| r[i]).collect();
            let truth: Vec<f64> = rec.truth.vmax.iter().map(|r| r[i]).collect();
            convergence_step(&mean, &truth, CONVERGENCE_TOLERANCE, CONVERGENCE_HOLD)
        })
        .collect();

    let drone_cells: Vec<usize> = rec.drone.iter().map(|d| d.cell).collect();
    let flown: Vec<usize> = rec.drone.iter().filter(|d| d.airborne).map(|d| d.cell).collect();
    let dwell = match drone_cells.first() {
        Some(&start) => dwell_fractions(&flown, start, &rec.truth.incident_cells),
        None => Vec::new(),
    };
    let last = rec.clamps.last().copied().unwrap_or_default();

    Ok(RunMetrics {
        mode: rec.mode,
        steps,
        density_rmse,
        density_rmse_per_cell,
        incident_cells: rec.truth.incident_cells.clone(),
        vmax_mean: rec.vmax_mean.clone(),
        vmax_std: rec.vmax_std.clone(),
        convergence_step: convergence,
        speed_event_steps: (0..rows).filter(|&t| rec.speed_event[t]).collect(),
        drone_cells,
        dwell,
        density_clamp_fraction: last.density_fraction(),
        vmax_clamp_fraction: last.vmax_fraction(),
    })
}

/// Runs the experiment and, when an output directory is configured, writes
/// all CSV traces and SVG plots there.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunMetrics> {
    let rec = simulate(cfg)?;
    let metrics = compute_metrics(&rec)?;
    if let Some(dir) = &cfg.output_dir {
        write_outputs(&rec, &metrics, dir)?;
    }
    Ok(metrics)
}

pub fn write_outputs(rec: &RunRecord, metrics: &RunMetrics, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    rec.truth.write_csv(dir)?;
    write_estimates(rec, dir)?;
    write_covtrace(rec, dir)?;
    write_drone(rec, dir)?;
    write_metrics(metrics, dir)?;
    render_plots(rec, dir)
}

fn write_estimates(rec: &RunRecord, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("estimates.csv"))?;
    w.write_record(["step", "quantity", "cell", "mean", "std"])?;
    for t in 0..rec.density_mean.len() {
        for (cell, (m, s)) in rec.density_mean[t].iter().zip(&rec.density_std[t]).enumerate() {
            w.write_record([t.to_string(), "density".into(), cell.to_string(), m.to_string(), s.to_string()])?;
        }
        for (i, cell) in rec.truth.incident_cells.iter().enumerate() {
            w.write_record([
                t.to_string(),
                "vmax".into(),
                cell.to_string(),
                rec.vmax_mean[t][i].to_string(),
                rec.vmax_std[t][i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_covtrace(rec: &RunRecord, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("covtrace.csv"))?;
    w.write_record([
        "step",
        "density_trace",
        "vmax_trace",
        "speed_event",
        "density_clamped",
        "density_total",
        "vmax_clamped",
        "vmax_total",
    ])?;
    for t in 0..rec.density_trace.len() {
        let c = rec.clamps[t];
        w.write_record([
            t.to_string(),
            rec.density_trace[t].to_string(),
            rec.vmax_trace[t].to_string(),
            u8::from(rec.speed_event[t]).to_string(),
            c.density_clamped.to_string(),
            c.density_total.to_string(),
            c.vmax_clamped.to_string(),
            c.vmax_total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_drone(rec: &RunRecord, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("drone.csv"))?;
    w.write_record(["step", "cell", "heading", "airborne"])?;
    for (t, d) in rec.drone.iter().enumerate() {
        w.write_record([
            t.to_string(),
            d.cell.to_string(),
            d.heading.as_str().to_string(),
            u8::from(d.airborne).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_metrics(m: &RunMetrics, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record(["metric", "key", "value"])?;
    let mut row = |metric: &str, key: String, value: String| w.write_record([metric.to_string(), key, value]);
    row("mode", "run".into(), m.mode.to_string())?;
    row("steps", "run".into(), m.steps.to_string())?;
    row("density_rmse", "all".into(), m.density_rmse.to_string())?;
    for (i, r) in m.density_rmse_per_cell.iter().enumerate() {
        row("density_rmse", format!("cell_{i}"), r.to_string())?;
    }
    for (i, cell) in m.incident_cells.iter().enumerate() {
        let conv = m.convergence_step[i].map_or_else(|| "none".to_string(), |s| s.to_string());
        row("convergence_step", format!("cell_{cell}"), conv)?;
        if let (Some(mean), Some(std)) = (m.vmax_mean.last(), m.vmax_std.last()) {
            row("final_vmax_mean", format!("cell_{cell}"), mean[i].to_string())?;
            row("final_vmax_std", format!("cell_{cell}"), std[i].to_string())?;
        }
    }
    row("speed_events", "count".into(), m.speed_event_steps.len().to_string())?;
    for d in &m.dwell {
        row("dwell_fraction", d.segment.to_string(), d.fraction.to_string())?;
    }
    row("clamp_fraction", "density".into(), m.density_clamp_fraction.to_string())?;
    row("clamp_fraction", "vmax".into(), m.vmax_clamp_fraction.to_string())?;
    w.flush()?;
    Ok(())
}

/// Reads the traces written by [`write_outputs`] back into a record.
pub fn read_record(dir: &Path) -> Result<RunRecord> {
    let truth = TruthTrace::read_csv(dir)?;
    let mut density_mean = Vec::new();
    let mut density_std = Vec::new();
    let mut vmax_mean = Vec::new();
    let mut vmax_std = Vec::new();
    let mut rdr = csv::Reader::from_path(dir.join("estimates.csv"))?;
    for rec in rdr.deserialize() {
        let (step, quantity, cell, mean, std): (usize, String, usize, f64, f64) = rec?;
        match quantity.as_str() {
            "density" => {
                place(&mut density_mean, step, cell, mean)?;
                place(&mut density_std, step, cell, std)?;
            }
            "vmax" => {
                let idx = truth
                    .incident_cells
                    .iter()
                    .position(|&c| c == cell)
                    .ok_or_else(|| Error::Misaligned(format!("v_max row for non-incident cell {cell}")))?;
                place(&mut vmax_mean, step, idx, mean)?;
                place(&mut vmax_std, step, idx, std)?;
            }
            other => return Err(Error::Misaligned(format!("unknown quantity `{other}`"))),
        }
    }

    let mut density_trace = Vec::new();
    let mut vmax_trace = Vec::new();
    let mut speed_event = Vec::new();
    let mut clamps = Vec::new();
    let mut rdr = csv::Reader::from_path(dir.join("covtrace.csv"))?;
    for (i, rec) in rdr.deserialize().enumerate() {
        let (step, dt, vt, ev, dc, dtot, vc, vtot): (usize, f64, f64, u8, u64, u64, u64, u64) = rec?;
        if step != i {
            return Err(Error::Misaligned(format!("covtrace row {i} has step {step}")));
        }
        density_trace.push(dt);
        vmax_trace.push(vt);
        speed_event.push(ev != 0);
        clamps.push(ClampStats {
            density_clamped: dc,
            density_total: dtot,
            vmax_clamped: vc,
            vmax_total: vtot,
        });
    }

    let mut drone = Vec::new();
    let mut rdr = csv::Reader::from_path(dir.join("drone.csv"))?;
    for (i, rec) in rdr.deserialize().enumerate() {
        let (step, cell, heading, airborne): (usize, usize, Heading, u8) = rec?;
        if step != i {
            return Err(Error::Misaligned(format!("drone row {i} has step {step}")));
        }
        drone.push(DroneSample {
            cell,
            heading,
            airborne: airborne != 0,
        });
    }

    Ok(RunRecord {
        mode: if drone.is_empty() { Mode::Baseline } else { Mode::Drone },
        truth,
        density_mean,
        density_std,
        vmax_mean,
        vmax_std,
        density_trace,
        vmax_trace,
        speed_event,
        clamps,
        drone,
    })
}

fn steps_of(values: impl Iterator<Item = f64>) -> Vec<(f64, f64)> {
    values.enumerate().map(|(t, y)| (t as f64, y)).collect()
}

fn series(label: impl Into<String>, points: Vec<(f64, f64)>, stroke: Stroke) -> Series {
    Series {
        label: label.into(),
        points,
        stroke,
    }
}

/// Writes the SVG line charts for a record: density and v_max at every
/// incident cell, both covariance traces, and the drone trajectory.
pub fn render_plots(rec: &RunRecord, dir: &Path) -> Result<()> {
    let fd0 = FundamentalDiagram::default();
    for (i, &cell) in rec.truth.incident_cells.iter().enumerate() {
        let mut rules = Vec::new();
        if let Some(v) = rec.truth.vmax.last().map(|r| r[i]) {
            if let Ok(rc) = updated_critical_density(v, &fd0) {
                rules.push((rc, format!("rho_cr({v})")));
            }
        }
        let chart = Chart {
            title: format!("Density at cell {cell} ({})", rec.mode),
            x_label: "step".into(),
            y_label: "density [veh/km]".into(),
            series: vec![
                series("truth", steps_of(rec.truth.densities.iter().map(|r| r[cell])), Stroke::Solid),
                series("estimate", steps_of(rec.density_mean.iter().map(|r| r[cell])), Stroke::Dashed),
            ],
            rules,
        };
        fs::write(dir.join(format!("density_cell{cell}.svg")), chart.render())?;

        let mean = || rec.vmax_mean.iter().map(move |r| r[i]);
        let std = |t: usize| rec.vmax_std[t][i];
        let chart = Chart {
            title: format!("Free-flow speed at cell {cell} ({})", rec.mode),
            x_label: "step".into(),
            y_label: "v_max [km/h]".into(),
            series: vec![
                series("truth", steps_of(rec.truth.vmax.iter().map(|r| r[i])), Stroke::Solid),
                series("mean", steps_of(mean()), Stroke::Dashed),
                series("mean + std", steps_of(mean().enumerate().map(|(t, m)| m + std(t))), Stroke::Dotted),
                series("mean - std", steps_of(mean().enumerate().map(|(t, m)| m - std(t))), Stroke::Dotted),
            ],
            rules: Vec::new(),
        };
        fs::write(dir.join(format!("vmax_cell{cell}.svg")), chart.render())?;
    }

    for (name, values, label) in [
        ("trace_density.svg", &rec.density_trace, "tr P (density)"),
        ("trace_vmax.svg", &rec.vmax_trace, "tr P (v_max)"),
    ] {
        let chart = Chart {
            title: format!("Covariance trace ({})", rec.mode),
            x_label: "step".into(),
            y_label: label.into(),
            series: vec![series(label, steps_of(values.iter().copied()), Stroke::Solid)],
            rules: Vec::new(),
        };
        fs::write(dir.join(name), chart.render())?;
    }

    if !rec.drone.is_empty() {
        let chart = Chart {
            title: "Drone position".into(),
            x_label: "step".into(),
            y_label: "cell".into(),
            series: vec![series(
                "drone",
                steps_of(rec.drone.iter().map(|d| d.cell as f64)),
                Stroke::Solid,
            )],
            rules: rec
                .truth
                .incident_cells
                .iter()
                .map(|&c| (c as f64, format!("incident {c}")))
                .collect(),
        };
        fs::write(dir.join("drone.svg"), chart.render())?;
    }
    Ok(())
}

/// One row of a seed sweep summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    pub mode: Mode,
    pub metrics: RunMetrics,
}

/// Runs both modes for `count` consecutive seeds starting at `base.seed`.
/// Each run writes into `out/seed_<seed>/<mode>/`; a summary goes to
/// `out/sweep.csv`. Runs execute on parallel threads with no shared state.
pub fn sweep(base: &RunConfig, count: u64, out: &Path) -> Result<Vec<SweepRow>> {
    base.validate()?;
    let jobs: Vec<(u64, Mode)> = (0..count)
        .flat_map(|k| [(base.seed + k, Mode::Baseline), (base.seed + k, Mode::Drone)])
        .collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).max(1);
    let mut rows = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(workers) {
        let results: Vec<Result<SweepRow>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&(seed, mode)| {
                    let mut cfg = base.clone();
                    cfg.seed = seed;
                    cfg.scenario.seed = seed;
                    cfg.mode = mode;
                    cfg.output_dir = Some(out.join(format!("seed_{seed}")).join(mode.as_str()));
                    scope.spawn(move || {
                        run_experiment(&cfg).map(|metrics| SweepRow { seed, mode, metrics })
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        });
        for r in results {
            rows.push(r?);
        }
    }
    write_sweep_summary(&rows, out)?;
    Ok(rows)
}

fn write_sweep_summary(rows: &[SweepRow], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    let cells = rows.first().map(|r| r.metrics.incident_cells.clone()).unwrap_or_default();
    let mut header = vec!["seed".to_string(), "mode".into(), "density_rmse".into()];
    for c in &cells {
        header.push(format!("convergence_step_cell_{c}"));
        header.push(format!("final_vmax_mean_cell_{c}"));
    }
    header.push("dwell_upstream_incident_to_start".into());
    w.write_record(&header)?;
    for r in rows {
        let m = &r.metrics;
        let mut rec = vec![r.seed.to_string(), r.mode.to_string(), m.density_rmse.to_string()];
        for i in 0..cells.len() {
            rec.push(m.convergence_step[i].map_or_else(|| "none".into(), |s| s.to_string()));
            rec.push(m.vmax_mean.last().map_or_else(String::new, |v| v[i].to_string()));
        }
        rec.push(
            m.dwell
                .iter()
                .find(|d| d.segment == DWELL_SEGMENTS[1])
                .map_or_else(String::new, |d| d.fraction.to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
