//! Synthetic ground truth for twin experiments.
//!
//! The truth corridor runs the same CTM family as the estimator, with the
//! baseline diagram everywhere except at scheduled incident cells. Sensors
//! read the truth with Gaussian noise drawn from seeded substreams keyed by
//! sensor and step, so every mode of an experiment sees the same readings.

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ctm::{
    ctm_step_with, speed_from_density, BoundaryConditions, CorridorGeometry, DensityField,
    Downstream, FlowLedger, FundamentalDiagram, StepOutcome,
};
use crate::dual::{DensityObservations, DroneObservations, SpeedObservations, VmaxReading};
use crate::error::{config, Error, Result};
use crate::planner::DroneState;
use crate::rng::{purpose, substream};

const LOOP: u64 = 0;
const PROBE: u64 = 1;
const DRONE_DENSITY: u64 = 2;
const DRONE_VMAX: u64 = 3;

/// A reduced-speed zone at one cell, active on `[start_step, end_step)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncidentEvent {
    pub cell: usize,
    #[serde(default)]
    pub start_step: u64,
    /// `None` keeps the incident active for the rest of the run.
    #[serde(default)]
    pub end_step: Option<u64>,
    pub reduced_v_max: f64,
}

impl IncidentEvent {
    pub fn active_at(&self, step: u64) -> bool {
        step >= self.start_step && self.end_step.is_none_or(|e| step < e)
    }
}

/// Sensor noise levels and reporting cadences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    /// [veh/km]
    pub loop_noise_std: f64,
    pub loop_cadence: u64,
    /// [km/h]
    pub probe_noise_std: f64,
    pub probe_cadence: u64,
    /// [veh/km]
    pub drone_density_noise_std: f64,
    /// [km/h]
    pub drone_vmax_noise_std: f64,
    /// Cells visible to the drone each step.
    pub drone_view_cells: usize,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            loop_noise_std: 10.0,
            loop_cadence: 1,
            probe_noise_std: 5.0,
            probe_cadence: 30,
            drone_density_noise_std: 1.0,
            drone_vmax_noise_std: 2.0,
            drone_view_cells: 1,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.loop_cadence == 0 {
            return Err(config("scenario.sensors.loop_cadence", "must be a positive integer"));
        }
        if self.probe_cadence == 0 {
            return Err(config("scenario.sensors.probe_cadence", "must be a positive integer"));
        }
        if self.drone_view_cells == 0 {
            return Err(config("scenario.sensors.drone_view_cells", "must be at least 1"));
        }
        for (name, v) in [
            ("sensors.loop_noise_std", self.loop_noise_std),
            ("sensors.probe_noise_std", self.probe_noise_std),
            ("sensors.drone_density_noise_std", self.drone_density_noise_std),
            ("sensors.drone_vmax_noise_std", self.drone_vmax_noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config(name, "must be a non-negative number"));
            }
        }
        Ok(())
    }

    pub fn probe_due(&self, step: u64) -> bool {
        step > 0 && step.is_multiple_of(self.probe_cadence)
    }

    pub fn loop_due(&self, step: u64) -> bool {
        step > 0 && step.is_multiple_of(self.loop_cadence)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub geometry: CorridorGeometry,
    pub fd0: FundamentalDiagram,
    /// Upstream demand [veh/h].
    pub demand: f64,
    pub offramp_split: f64,
    pub incident_schedule: Vec<IncidentEvent>,
    pub sensors: SensorConfig,
    /// Uniform truth density at step 0 [veh/km].
    pub initial_density: f64,
    /// Truth steps simulated before step 0 (incidents at their step-0 state).
    pub warmup_steps: u64,
    pub capacity_clamp: bool,
    pub drone_start_cell: usize,
    /// The drone waits at its start cell until this step, so the first
    /// routing decision sees at least one probe assimilation.
    pub drone_launch_step: u64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    /// 5 km freeway, 6,600 veh/h demand, half leaving at the off-ramp, and
    /// 20 km/h incidents at cells 5 and 15 for the whole run.
    fn default() -> Self {
        let geometry = CorridorGeometry::freeway_with_offramp();
        let incident_schedule = geometry
            .incident_cells
            .iter()
            .map(|&cell| IncidentEvent {
                cell,
                start_step: 0,
                end_step: None,
                reduced_v_max: 20.0,
            })
            .collect();
        Self {
            geometry,
            fd0: FundamentalDiagram::default(),
            demand: 6600.0,
            offramp_split: 0.5,
            incident_schedule,
            sensors: SensorConfig::default(),
            initial_density: 20.0,
            warmup_steps: 0,
            capacity_clamp: true,
            drone_start_cell: 10,
            drone_launch_step: 30,
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.fd0
            .validate()
            .map_err(|e| config("scenario.fundamental_diagram", e.to_string()))?;
        self.geometry
            .validate(&self.fd0)
            .map_err(|e| config("scenario.geometry", e.to_string()))?;
        if !(self.demand >= 0.0 && self.demand.is_finite()) {
            return Err(config("scenario.demand", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.offramp_split) {
            return Err(config("scenario.offramp_split", "must lie in [0, 1]"));
        }
        if !(0.0..=self.fd0.rho_j).contains(&self.initial_density) {
            return Err(config("scenario.initial_density", "must lie in [0, rho_j]"));
        }
        if self.drone_start_cell >= self.geometry.num_cells {
            return Err(config("scenario.drone_start_cell", "outside corridor"));
        }
        for (k, ev) in self.incident_schedule.iter().enumerate() {
            let field = format!("scenario.incidents[{k}]");
            if !self.geometry.incident_cells.contains(&ev.cell) {
                return Err(config(
                    format!("{field}.cell"),
                    format!("cell {} is not an incident-prone cell", ev.cell),
                ));
            }
            if !(ev.reduced_v_max > 0.0 && ev.reduced_v_max < self.fd0.v_max) {
                return Err(config(
                    format!("{field}.reduced_v_max"),
                    "must lie in (0, baseline v_max)",
                ));
            }
            if ev.end_step.is_some_and(|e| e <= ev.start_step) {
                return Err(config(format!("{field}.end_step"), "must exceed start_step"));
            }
        }
        self.sensors.validate()
    }

    pub fn boundary(&self) -> BoundaryConditions {
        BoundaryConditions {
            inflow_demand: self.demand,
            offramp_split: self.offramp_split,
            downstream: Downstream::Free,
        }
    }

    /// True free-flow speed at each incident cell for `step`.
    pub fn true_vmax(&self, step: u64) -> Vec<f64> {
        self.geometry
            .incident_cells
            .iter()
            .map(|&cell| {
                self.incident_schedule
                    .iter()
                    .filter(|ev| ev.cell == cell && ev.active_at(step))
                    .map(|ev| ev.reduced_v_max)
                    .next_back()
                    .unwrap_or(self.fd0.v_max)
            })
            .collect()
    }

    /// Per-cell diagrams in force at `step`.
    pub fn true_fds(&self, step: u64) -> Result<Vec<FundamentalDiagram>> {
        let mut fds = vec![self.fd0; self.geometry.num_cells];
        for (&cell, v) in self.geometry.incident_cells.iter().zip(self.true_vmax(step)) {
            if v != self.fd0.v_max {
                fds[cell] = self.fd0.with_free_flow_speed(v)?;
            }
        }
        Ok(fds)
    }

    pub fn initial_field(&self) -> Result<DensityField> {
        let mut field = DensityField::uniform(self.geometry.num_cells, self.initial_density);
        for _ in 0..self.warmup_steps {
            field = simulate_truth_step(self, &field, 0)?.field;
        }
        Ok(field)
    }
}

/// Advances the truth from `step - 1` to `step`.
pub fn simulate_truth_step(cfg: &ScenarioConfig, field: &DensityField, step: u64) -> Result<StepOutcome> {
    let fds = cfg.true_fds(step)?;
    ctm_step_with(field, &fds, &cfg.boundary(), &cfg.geometry, cfg.capacity_clamp)
}

/// True densities and free-flow speeds for steps `0..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthTrace {
    pub densities: Vec<Vec<f64>>,
    pub vmax: Vec<Vec<f64>>,
    /// `ledgers[s - 1]` holds the boundary flows of the step ending at `s`.
    pub ledgers: Vec<FlowLedger>,
    pub incident_cells: Vec<usize>,
}

impl TruthTrace {
    pub fn steps(&self) -> usize {
        self.densities.len().saturating_sub(1)
    }

    pub fn field(&self, step: usize) -> DensityField {
        DensityField::new(self.densities[step].clone())
    }

    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("truth.csv"))?;
        w.write_record(["step", "cell", "density"])?;
        for (step, row) in self.densities.iter().enumerate() {
            for (cell, rho) in row.iter().enumerate() {
                w.write_record([step.to_string(), cell.to_string(), rho.to_string()])?;
            }
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("truth_vmax.csv"))?;
        w.write_record(["step", "incident_cell", "v_max"])?;
        for (step, row) in self.vmax.iter().enumerate() {
            for (cell, v) in self.incident_cells.iter().zip(row) {
                w.write_record([step.to_string(), cell.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("ledger.csv"))?);
        write_ledger_csv(self, &mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(dir: &Path) -> Result<Self> {
        let mut densities: Vec<Vec<f64>> = Vec::new();
        let mut rdr = csv::Reader::from_path(dir.join("truth.csv"))?;
        for rec in rdr.deserialize() {
            let (step, cell, rho): (usize, usize, f64) = rec?;
            place(&mut densities, step, cell, rho)?;
        }
        let mut vmax: Vec<Vec<f64>> = Vec::new();
        let mut incident_cells: Vec<usize> = Vec::new();
        let mut rdr = csv::Reader::from_path(dir.join("truth_vmax.csv"))?;
        for rec in rdr.deserialize() {
            let (step, cell, v): (usize, usize, f64) = rec?;
            let idx = match incident_cells.iter().position(|&c| c == cell) {
                Some(i) => i,
                None => {
                    incident_cells.push(cell);
                    incident_cells.len() - 1
                }
            };
            place(&mut vmax, step, idx, v)?;
        }
        // The ledger is optional so hand-made truth directories still load.
        let mut ledgers = Vec::new();
        let ledger_path = dir.join("ledger.csv");
        if ledger_path.exists() {
            let mut rdr = csv::Reader::from_path(ledger_path)?;
            for rec in rdr.deserialize() {
                let (step, inflow, offramp_outflow, downstream_outflow): (usize, f64, f64, f64) = rec?;
                if step != ledgers.len() + 1 {
                    return Err(Error::Misaligned(format!("ledger row for step {step} out of order")));
                }
                ledgers.push(FlowLedger {
                    inflow,
                    offramp_outflow,
                    downstream_outflow,
                });
            }
        }
        Ok(Self {
            densities,
            vmax,
            ledgers,
            incident_cells,
        })
    }
}

pub(crate) fn place(rows: &mut Vec<Vec<f64>>, step: usize, col: usize, value: f64) -> Result<()> {
    if step > rows.len() {
        return Err(Error::Misaligned(format!("step {step} appears out of order")));
    }
    if step == rows.len() {
        rows.push(Vec::new());
    }
    let row = &mut rows[step];
    if col != row.len() {
        return Err(Error::Misaligned(format!("step {step}: column {col} out of order")));
    }
    row.push(value);
    Ok(())
}

/// Simulates the truth for `steps` steps after the (warmed-up) initial field.
pub fn generate_truth(cfg: &ScenarioConfig, steps: u64) -> Result<TruthTrace> {
    cfg.validate()?;
    let mut field = cfg.initial_field()?;
    let mut densities = vec![field.rho.clone()];
    let mut vmax = vec![cfg.true_vmax(0)];
    let mut ledgers = Vec::with_capacity(steps as usize);
    for step in 1..=steps {
        let out = simulate_truth_step(cfg, &field, step)?;
        field = out.field;
        densities.push(field.rho.clone());
        vmax.push(cfg.true_vmax(step));
        ledgers.push(out.ledger);
    }
    Ok(TruthTrace {
        densities,
        vmax,
        ledgers,
        incident_cells: cfg.geometry.incident_cells.clone(),
    })
}

fn gaussian(std: f64, rng: &mut impl rand::Rng) -> f64 {
    if std > 0.0 {
        Normal::new(0.0, std).expect("finite std").sample(rng)
    } else {
        0.0
    }
}

/// Loop-detector densities at every cell, clamped to `[0, rho_j]`.
pub fn emit_loop_obs(truth: &DensityField, noise_std: f64, rho_j: f64, seed: u64, step: u64) -> DensityObservations {
    let mut rng = substream(seed, &[purpose::SENSOR, LOOP, step]);
    let values = truth
        .rho
        .iter()
        .map(|r| (r + gaussian(noise_std, &mut rng)).clamp(0.0, rho_j))
        .collect();
    DensityObservations::all_cells(values, noise_std)
}

/// Probe speeds at every incident cell on cadence steps, `None` otherwise.
pub fn emit_probe_speed_obs(
    truth: &DensityField,
    true_fds: &[FundamentalDiagram],
    incident_cells: &[usize],
    sensors: &SensorConfig,
    seed: u64,
    step: u64,
) -> Result<Option<SpeedObservations>> {
    if !sensors.probe_due(step) {
        return Ok(None);
    }
    let mut rng = substream(seed, &[purpose::SENSOR, PROBE, step]);
    let mut values = Vec::with_capacity(incident_cells.len());
    for &cell in incident_cells {
        let v = speed_from_density(truth.rho[cell], &true_fds[cell])?;
        values.push((v + gaussian(sensors.probe_noise_std, &mut rng)).max(0.0));
    }
    Ok(Some(SpeedObservations {
        values,
        noise_std: sensors.probe_noise_std,
    }))
}

/// Densities over the drone's view plus direct free-flow speed readings at
/// any incident cell in view.
pub fn emit_drone_obs(
    truth: &DensityField,
    true_vmax: &[f64],
    drone: &DroneState,
    geom: &CorridorGeometry,
    sensors: &SensorConfig,
    rho_j: f64,
    seed: u64,
    step: u64,
) -> Result<DroneObservations> {
    if drone.cell >= geom.num_cells {
        return Err(crate::error::domain(format!("drone at cell {} outside corridor", drone.cell)));
    }
    let cells: Vec<usize> = drone.viewed_cells(geom).collect();
    let mut rng = substream(seed, &[purpose::SENSOR, DRONE_DENSITY, step]);
    let values = cells
        .iter()
        .map(|&c| (truth.rho[c] + gaussian(sensors.drone_density_noise_std, &mut rng)).clamp(0.0, rho_j))
        .collect();
    let densities = DensityObservations {
        noise_std: vec![sensors.drone_density_noise_std; cells.len()],
        cells: cells.clone(),
        values,
    };
    let mut rng = substream(seed, &[purpose::SENSOR, DRONE_VMAX, step]);
    let vmax = geom
        .incident_cells
        .iter()
        .enumerate()
        .filter(|(_, c)| cells.contains(c))
        .map(|(i, _)| VmaxReading {
            incident: i,
            value: (true_vmax[i] + gaussian(sensors.drone_vmax_noise_std, &mut rng)).max(0.0),
            noise_std: sensors.drone_vmax_noise_std,
        })
        .collect();
    Ok(DroneObservations {
        densities: Some(densities),
        vmax,
    })
}

/// Writes a per-step ledger so boundary accounting can be checked offline.
pub fn write_ledger_csv(trace: &TruthTrace, mut out: impl Write) -> Result<()> {
    writeln!(out, "step,inflow,offramp_outflow,downstream_outflow")?;
    for (i, l) in trace.ledgers.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{}",
            i + 1,
            l.inflow,
            l.offramp_outflow,
            l.downstream_outflow
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctm::updated_critical_density;
    use crate::planner::Heading;
    use approx::assert_relative_eq;

    #[test]
    fn default_scenario_is_valid() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.true_vmax(0), vec![20.0, 20.0]);
        let fds = cfg.true_fds(3).unwrap();
        assert_relative_eq!(fds[5].rho_cr, updated_critical_density(20.0, &cfg.fd0).unwrap());
        assert_eq!(fds[4], cfg.fd0);
    }

    #[test]
    fn empty_corridor_stays_empty() {
        let cfg = ScenarioConfig {
            demand: 0.0,
            incident_schedule: Vec::new(),
            initial_density: 0.0,
            ..ScenarioConfig::default()
        };
        let trace = generate_truth(&cfg, 50).unwrap();
        assert!(trace.densities.iter().flatten().all(|&r| r == 0.0));
    }

    #[test]
    fn queue_forms_behind_upstream_incident() {
        let cfg = ScenarioConfig::default();
        let trace = generate_truth(&cfg, 360).unwrap();
        let rho_cr_t = updated_critical_density(20.0, &cfg.fd0).unwrap();
        let peak = trace.densities.iter().map(|r| r[5]).fold(0.0, f64::max);
        assert!(peak >= rho_cr_t * (1.0 - 1e-9), "peak {peak}");
        // the cell feeding the incident ends up on the congested branch
        assert!(trace.densities[360][4] > cfg.fd0.rho_cr);
    }

    #[test]
    fn incident_schedule_windows() {
        let ev = IncidentEvent {
            cell: 5,
            start_step: 10,
            end_step: Some(20),
            reduced_v_max: 30.0,
        };
        assert!(!ev.active_at(9));
        assert!(ev.active_at(10));
        assert!(!ev.active_at(20));
    }

    #[test]
    fn rejects_bad_incidents() {
        let mut cfg = ScenarioConfig::default();
        cfg.incident_schedule[0].cell = 7;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field.contains("cell")));
        let mut cfg = ScenarioConfig::default();
        cfg.incident_schedule[1].reduced_v_max = 95.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn loop_emission() {
        let field = DensityField::new(vec![10.0, 50.0, 150.0]);
        let exact = emit_loop_obs(&field, 0.0, 300.0, 3, 4);
        assert_eq!(exact.values, field.rho);
        let a = emit_loop_obs(&field, 10.0, 300.0, 3, 4);
        let b = emit_loop_obs(&field, 10.0, 300.0, 3, 4);
        assert_eq!(a, b);
        assert_ne!(a, emit_loop_obs(&field, 10.0, 300.0, 3, 5));
    }

    #[test]
    fn loop_noise_statistics() {
        let field = DensityField::new(vec![150.0]);
        let samples: Vec<f64> = (1..=10_000u64)
            .map(|s| emit_loop_obs(&field, 10.0, 300.0, 11, s).values[0] - 150.0)
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        assert!((var.sqrt() - 10.0).abs() < 0.5, "std {}", var.sqrt());
    }

    #[test]
    fn probe_cadence_and_values() {
        let cfg = ScenarioConfig::default();
        let mut sensors = cfg.sensors.clone();
        let fds = cfg.true_fds(30).unwrap();
        let mut rho = vec![20.0; 20];
        rho[5] = 200.0;
        rho[15] = 50.0;
        let field = DensityField::new(rho);
        let cells = &cfg.geometry.incident_cells;
        assert!(emit_probe_speed_obs(&field, &fds, cells, &sensors, 1, 29).unwrap().is_none());
        sensors.probe_noise_std = 0.0;
        let obs = emit_probe_speed_obs(&field, &fds, cells, &sensors, 1, 30).unwrap().unwrap();
        // 200 veh/km on the incident diagram: 22.5 * (300 - 200) / 200
        assert_relative_eq!(obs.values[0], 11.25, max_relative = 1e-12);
        assert_relative_eq!(obs.values[1], 20.0, max_relative = 1e-12);
    }

    #[test]
    fn drone_emission() {
        let cfg = ScenarioConfig::default();
        let field = DensityField::uniform(20, 40.0);
        let geom = &cfg.geometry;
        let mut drone = DroneState::new(5, Heading::Upstream, 1);
        let obs = emit_drone_obs(&field, &[20.0, 20.0], &drone, geom, &cfg.sensors, 300.0, 1, 1).unwrap();
        let dens = obs.densities.unwrap();
        assert_eq!(dens.cells, vec![5]);
        assert_eq!(obs.vmax.len(), 1);
        assert_eq!(obs.vmax[0].incident, 0);
        drone.cell = 8;
        let obs = emit_drone_obs(&field, &[20.0, 20.0], &drone, geom, &cfg.sensors, 300.0, 1, 1).unwrap();
        assert!(obs.vmax.is_empty());
        drone.cell = 25;
        assert!(emit_drone_obs(&field, &[20.0, 20.0], &drone, geom, &cfg.sensors, 300.0, 1, 1).is_err());
    }

    #[test]
    fn drone_vmax_noise_model() {
        let cfg = ScenarioConfig::default();
        let field = DensityField::uniform(20, 40.0);
        let drone = DroneState::new(5, Heading::Upstream, 1);
        let xs: Vec<f64> = (0..4000u64)
            .map(|s| {
                emit_drone_obs(&field, &[20.0, 20.0], &drone, &cfg.geometry, &cfg.sensors, 300.0, 5, s)
                    .unwrap()
                    .vmax[0]
                    .value
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
        assert!((mean - 20.0).abs() < 0.15, "mean {mean}");
        assert!((sd - 2.0).abs() < 0.1, "sd {sd}");
    }

    #[test]
    fn truth_is_deterministic() {
        let cfg = ScenarioConfig::default();
        assert_eq!(generate_truth(&cfg, 100).unwrap(), generate_truth(&cfg, 100).unwrap());
    }
}
