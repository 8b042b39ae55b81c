//! One-step-lookahead drone routing.
//!
//! Each tick the planner enumerates the paths available from the drone's
//! cell, runs a private copy of the dual filter forward along each path with
//! simulated observations, scores the resulting covariance traces, and moves
//! the drone one cell toward the cheapest path.
//!
//! Simulated observations replace data by model predictions: loop and drone
//! densities equal the forecast ensemble mean, probe speeds equal the speed
//! implied by the mean density and mean free-flow speed, and a direct
//! free-flow-speed reading at an incident cell equals the current parameter
//! mean. The innovation values therefore carry no information; only the
//! covariance reduction each path buys is measured.

use std::ops::RangeInclusive;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::ctm::{speed_from_density, CorridorGeometry};
use crate::dual::{DensityObservations, DualFilterState, SpeedObservations, VmaxReading};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, purpose};
use crate::scenario::SensorConfig;

/// Score difference, relative to the best score (or absolute below 1),
/// under which two paths count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heading {
    /// Toward the entry node (decreasing cell index).
    Upstream,
    /// Toward the exit node.
    Downstream,
}

impl Heading {
    fn tag(self) -> u64 {
        match self {
            Heading::Upstream => 1,
            Heading::Downstream => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Heading::Upstream => "upstream",
            Heading::Downstream => "downstream",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DroneState {
    pub cell: usize,
    pub heading: Heading,
    /// Cells visible each step, centred on the drone.
    pub view_cells: usize,
}

impl DroneState {
    pub fn new(cell: usize, heading: Heading, view_cells: usize) -> Self {
        Self {
            cell,
            heading,
            view_cells: view_cells.max(1),
        }
    }

    pub fn viewed_cells(&self, geom: &CorridorGeometry) -> RangeInclusive<usize> {
        let back = (self.view_cells - 1) / 2;
        let first = self.cell.saturating_sub(back);
        let last = (first + self.view_cells - 1).min(geom.num_cells - 1);
        first..=last
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidatePath {
    pub direction: Heading,
    pub horizon: usize,
    /// Drone cell after each of the `horizon` steps.
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyScore {
    pub j_vmax: f64,
    pub j_rho: f64,
    pub lambda: f64,
    pub num_cells: usize,
    pub num_params: usize,
    pub j: f64,
}

impl UncertaintyScore {
    /// `lambda / V * J_vmax + (1 - lambda) / K * J_rho`.
    pub fn combine(j_vmax: f64, j_rho: f64, lambda: f64, num_cells: usize, num_params: usize) -> Self {
        let j = lambda / num_params as f64 * j_vmax + (1.0 - lambda) / num_cells as f64 * j_rho;
        Self {
            j_vmax,
            j_rho,
            lambda,
            num_cells,
            num_params,
            j,
        }
    }
}

/// Steps needed to reach the corridor end in `direction`.
pub fn lookahead_horizon(direction: Heading, drone: &DroneState, geom: &CorridorGeometry) -> usize {
    match direction {
        Heading::Upstream => drone.cell.saturating_sub(geom.entry_cell),
        Heading::Downstream => geom.exit_cell.saturating_sub(drone.cell),
    }
}

/// Paths that keep one direction until the corridor end; empty ones are dropped.
pub fn enumerate_paths(drone: &DroneState, geom: &CorridorGeometry) -> Vec<CandidatePath> {
    [Heading::Upstream, Heading::Downstream]
        .into_iter()
        .filter_map(|direction| {
            let horizon = lookahead_horizon(direction, drone, geom);
            if horizon == 0 {
                return None;
            }
            let cells = (1..=horizon)
                .map(|s| match direction {
                    Heading::Upstream => drone.cell - s,
                    Heading::Downstream => drone.cell + s,
                })
                .collect();
            Some(CandidatePath {
                direction,
                horizon,
                cells,
            })
        })
        .collect()
}

/// Runs a copy of `snapshot` along `path` and scores the final covariances.
pub fn score_path(
    path: &CandidatePath,
    snapshot: &DualFilterState,
    lambda: f64,
    sensors: &SensorConfig,
    view_cells: usize,
) -> Result<UncertaintyScore> {
    let mut sim = snapshot.clone();
    sim.stream = derive_seed(snapshot.stream, &[purpose::LOOKAHEAD, snapshot.clock, path.direction.tag()]);
    let geom = sim.geom.clone();
    for &cell in &path.cells {
        sim.clock += 1;
        let clock = sim.clock;
        sim.propagate_densities()?;
        let forecast = sim.density_mean();

        let mut obs = if sensors.loop_due(clock) {
            DensityObservations::all_cells(forecast.iter().copied().collect(), sensors.loop_noise_std)
        } else {
            DensityObservations {
                cells: Vec::new(),
                values: Vec::new(),
                noise_std: Vec::new(),
            }
        };
        let drone = DroneState::new(cell, path.direction, view_cells);
        let viewed: Vec<usize> = drone.viewed_cells(&geom).collect();
        for &c in &viewed {
            obs.cells.push(c);
            obs.values.push(forecast[c]);
            obs.noise_std.push(sensors.drone_density_noise_std);
        }
        sim.update_densities(Some(&obs))?;

        let vmax_mean = sim.vmax_mean();
        let probe = if sensors.probe_due(clock) {
            let density = sim.density_mean();
            let mut values = Vec::with_capacity(geom.incident_cells.len());
            for (i, &c) in geom.incident_cells.iter().enumerate() {
                let fd = sim.fd0.with_free_flow_speed(vmax_mean[i])?;
                values.push(speed_from_density(density[c].clamp(0.0, fd.rho_j), &fd)?);
            }
            Some(SpeedObservations {
                values,
                noise_std: sensors.probe_noise_std,
            })
        } else {
            None
        };
        let readings: Vec<VmaxReading> = geom
            .incident_cells
            .iter()
            .enumerate()
            .filter(|(_, c)| viewed.contains(c))
            .map(|(i, _)| VmaxReading {
                incident: i,
                value: vmax_mean[i],
                noise_std: sensors.drone_vmax_noise_std,
            })
            .collect();
        if probe.is_some() || !readings.is_empty() {
            sim.assimilate_speeds(probe.as_ref(), &readings)?;
            sim.writeback_parameters()?;
        }
    }
    Ok(UncertaintyScore::combine(
        sim.vmax_trace(),
        sim.density_trace(),
        lambda,
        sim.num_cells(),
        sim.num_params(),
    ))
}

/// Moves one cell toward the lowest-scoring path. Ties keep the current
/// heading, then prefer upstream.
pub fn choose_and_move(
    drone: &DroneState,
    scores: &[(CandidatePath, UncertaintyScore)],
) -> Result<DroneState> {
    let best = scores
        .iter()
        .map(|(_, s)| s.j)
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::NoCandidates);
    }
    let tied: Vec<Heading> = scores
        .iter()
        .filter(|(_, s)| s.j - best <= TIE_TOLERANCE * best.abs().max(1.0))
        .map(|(p, _)| p.direction)
        .collect();
    let direction = if tied.contains(&drone.heading) {
        drone.heading
    } else if tied.contains(&Heading::Upstream) {
        Heading::Upstream
    } else {
        tied[0]
    };
    let cell = match direction {
        Heading::Upstream => drone.cell.checked_sub(1).ok_or(Error::NoCandidates)?,
        Heading::Downstream => drone.cell + 1,
    };
    Ok(DroneState {
        cell,
        heading: direction,
        view_cells: drone.view_cells,
    })
}

/// Result of one planning tick.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub next: DroneState,
    pub scores: Vec<(CandidatePath, UncertaintyScore)>,
}

/// Scores every candidate path (concurrently) and moves the drone.
pub fn plan_step(
    drone: &DroneState,
    state: &DualFilterState,
    lambda: f64,
    sensors: &SensorConfig,
) -> Result<PlanOutcome> {
    let paths = enumerate_paths(drone, &state.geom);
    let results: Vec<(CandidatePath, Result<UncertaintyScore>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = paths
            .into_iter()
            .map(|path| {
                scope.spawn(move || {
                    let score = score_path(&path, state, lambda, sensors, drone.view_cells);
                    (path, score)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("path scoring panicked"))
            .collect()
    });
    let mut scores = Vec::with_capacity(results.len());
    for (path, score) in results {
        match score {
            Ok(s) => scores.push((path, s)),
            Err(e) => warn!("skipping {} path: {e}", path.direction.as_str()),
        }
    }
    let next = choose_and_move(drone, &scores)?;
    Ok(PlanOutcome { next, scores })
}
