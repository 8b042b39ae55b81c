//! Dual ensemble Kalman filter for cell densities and incident free-flow speeds.
//!
//! Two filters run side by side. The density filter propagates every member
//! through the CTM using the currently active fundamental diagrams and
//! assimilates loop-detector (and drone) densities with a row-selector
//! operator. The free-flow-speed filter holds one parameter per incident cell;
//! when speed data arrives it random-walks its members, predicts the speed each
//! member implies at the assimilated mean density, and updates against the
//! measured speeds. The parameter mean is then written back into the CTM.
//! The two filters never share a covariance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ctm::{
    ctm_step_with, speed_from_density, BoundaryConditions, CorridorGeometry, DensityField,
    FundamentalDiagram,
};
use crate::enkf::{
    analysis_linear, analysis_nonlinear, ensemble_trace, perturb_observations, propagate,
    Ensemble, NoiseSpec, ObservationBatch, ObservationOperator,
};
use crate::error::{config, Error, Result};
use crate::rng::{derive_seed, purpose, substream};

/// Estimator tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub ensemble_size: usize,
    /// Additive density model noise per cell per step [veh/km].
    pub density_model_noise_std: f64,
    /// Random-walk std applied to v_max members at each speed assimilation [km/h].
    pub vmax_walk_std: f64,
    pub initial_density_mean: f64,
    pub initial_density_std: f64,
    /// v_max members start uniform on this interval [km/h].
    pub initial_vmax_low: f64,
    pub initial_vmax_high: f64,
    /// Lower clamp for v_max members [km/h].
    pub min_vmax: f64,
    pub capacity_clamp: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            ensemble_size: crate::enkf::DEFAULT_ENSEMBLE_SIZE,
            density_model_noise_std: 6.0,
            vmax_walk_std: 1.0,
            initial_density_mean: 30.0,
            initial_density_std: 15.0,
            initial_vmax_low: 15.0,
            initial_vmax_high: 90.0,
            min_vmax: 1.0,
            capacity_clamp: true,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self, fd0: &FundamentalDiagram) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(config("estimator.ensemble_size", "must be at least 2"));
        }
        for (name, v) in [
            ("estimator.density_model_noise_std", self.density_model_noise_std),
            ("estimator.vmax_walk_std", self.vmax_walk_std),
            ("estimator.initial_density_std", self.initial_density_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config(name, "must be a non-negative number"));
            }
        }
        if !(self.min_vmax > 0.0 && self.min_vmax <= fd0.v_max) {
            return Err(config("estimator.min_vmax", "must lie in (0, baseline v_max]"));
        }
        if !(self.initial_vmax_low >= self.min_vmax
            && self.initial_vmax_low <= self.initial_vmax_high
            && self.initial_vmax_high <= fd0.v_max)
        {
            return Err(config(
                "estimator.initial_vmax_low",
                "need min_vmax <= low <= high <= baseline v_max",
            ));
        }
        Ok(())
    }
}

/// Density measurements at a subset of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityObservations {
    pub cells: Vec<usize>,
    pub values: Vec<f64>,
    pub noise_std: Vec<f64>,
}

impl DensityObservations {
    pub fn all_cells(values: Vec<f64>, noise_std: f64) -> Self {
        let n = values.len();
        Self {
            cells: (0..n).collect(),
            values,
            noise_std: vec![noise_std; n],
        }
    }

    fn extend(&mut self, other: &DensityObservations) {
        self.cells.extend_from_slice(&other.cells);
        self.values.extend_from_slice(&other.values);
        self.noise_std.extend_from_slice(&other.noise_std);
    }

    fn check(&self, cells: usize) -> Result<()> {
        if self.values.len() != self.cells.len() || self.noise_std.len() != self.cells.len() {
            return Err(Error::Dimension("density observation vectors differ in length".into()));
        }
        if let Some(c) = self.cells.iter().find(|&&c| c >= cells) {
            return Err(Error::Dimension(format!("observed cell {c} outside corridor")));
        }
        Ok(())
    }
}

/// Probe-vehicle speeds, one per incident cell in corridor order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedObservations {
    pub values: Vec<f64>,
    pub noise_std: f64,
}

/// A direct free-flow-speed reading for one incident cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VmaxReading {
    /// Position in the incident-cell list.
    pub incident: usize,
    pub value: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DroneObservations {
    pub densities: Option<DensityObservations>,
    pub vmax: Vec<VmaxReading>,
}

/// Everything observed during one time step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SensorFeed {
    pub loop_density: Option<DensityObservations>,
    pub probe_speed: Option<SpeedObservations>,
    pub drone: Option<DroneObservations>,
}

impl SensorFeed {
    fn drone_vmax(&self) -> &[VmaxReading] {
        self.drone.as_ref().map(|d| d.vmax.as_slice()).unwrap_or(&[])
    }

    pub fn has_speed_data(&self) -> bool {
        self.probe_speed.is_some() || !self.drone_vmax().is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClampStats {
    pub density_clamped: u64,
    pub density_total: u64,
    pub vmax_clamped: u64,
    pub vmax_total: u64,
}

impl ClampStats {
    pub fn density_fraction(&self) -> f64 {
        ratio(self.density_clamped, self.density_total)
    }

    pub fn vmax_fraction(&self) -> f64 {
        ratio(self.vmax_clamped, self.vmax_total)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub clock: u64,
    pub speed_assimilated: bool,
    pub density_trace: f64,
    pub vmax_trace: f64,
}

/// Snapshot of the dual filter. Cloning yields an independent estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct DualFilterState {
    pub geom: CorridorGeometry,
    pub fd0: FundamentalDiagram,
    pub bc: BoundaryConditions,
    pub config: EstimatorConfig,
    pub density_ens: Ensemble,
    pub vmax_ens: Ensemble,
    pub active_fds: Vec<FundamentalDiagram>,
    pub clock: u64,
    pub seed: u64,
    /// Substream tag; 0 for the live filter, distinct tags for simulated copies.
    pub stream: u64,
    pub clamps: ClampStats,
    pub speed_events: u64,
}

impl DualFilterState {
    /// Draws the initial ensembles: densities Gaussian around a flat prior,
    /// free-flow speeds uniform on the configured interval.
    pub fn new(
        geom: CorridorGeometry,
        fd0: FundamentalDiagram,
        bc: BoundaryConditions,
        config: EstimatorConfig,
        seed: u64,
    ) -> Result<Self> {
        fd0.validate()?;
        geom.validate(&fd0)?;
        bc.validate()?;
        config.validate(&fd0)?;
        let n = config.ensemble_size;
        let k = geom.num_cells;
        let v = geom.incident_cells.len();
        if v == 0 {
            return Err(config_err("geometry.incident_cells", "need at least one incident cell"));
        }

        let mut density = DMatrix::zeros(k, n);
        let normal = Normal::new(config.initial_density_mean, config.initial_density_std)
            .map_err(|e| config_err("estimator.initial_density_std", e.to_string()))?;
        let mut vmax = DMatrix::zeros(v, n);
        for j in 0..n {
            let mut rng = substream(seed, &[purpose::INITIAL_ENSEMBLE, j as u64]);
            for i in 0..k {
                density[(i, j)] = normal.sample(&mut rng).clamp(0.0, fd0.rho_j);
            }
            for i in 0..v {
                vmax[(i, j)] = if config.initial_vmax_high > config.initial_vmax_low {
                    rng.random_range(config.initial_vmax_low..=config.initial_vmax_high)
                } else {
                    config.initial_vmax_low
                };
            }
        }

        Ok(Self {
            active_fds: vec![fd0; k],
            density_ens: Ensemble::new(density)?,
            vmax_ens: Ensemble::new(vmax)?,
            geom,
            fd0,
            bc,
            config,
            clock: 0,
            seed,
            stream: 0,
            clamps: ClampStats::default(),
            speed_events: 0,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.geom.num_cells
    }

    pub fn num_params(&self) -> usize {
        self.geom.incident_cells.len()
    }

    pub fn density_mean(&self) -> DVector<f64> {
        self.density_ens.mean()
    }

    pub fn vmax_mean(&self) -> DVector<f64> {
        self.vmax_ens.mean()
    }

    pub fn density_trace(&self) -> f64 {
        ensemble_trace(&self.density_ens)
    }

    pub fn vmax_trace(&self) -> f64 {
        ensemble_trace(&self.vmax_ens)
    }

    fn step_seed(&self, what: u64, extra: u64) -> u64 {
        derive_seed(self.seed, &[self.stream, self.clock, what, extra])
    }

    fn clamp_densities(&mut self) {
        let fds = self.active_fds.clone();
        let changed = self
            .density_ens
            .map_entries(|i, x| x.clamp(0.0, fds[i].rho_j));
        self.clamps.density_clamped += changed as u64;
        self.clamps.density_total += (self.density_ens.state_dim() * self.density_ens.size()) as u64;
    }

    fn clamp_vmax(&mut self) {
        let (lo, hi) = (self.config.min_vmax, self.fd0.v_max);
        let changed = self.vmax_ens.map_entries(|_, x| x.clamp(lo, hi));
        self.clamps.vmax_clamped += changed as u64;
        self.clamps.vmax_total += (self.vmax_ens.state_dim() * self.vmax_ens.size()) as u64;
    }

    /// CTM forecast of every density member plus model noise.
    pub fn propagate_densities(&mut self) -> Result<()> {
        let fds = self.active_fds.clone();
        let (bc, geom, clamp) = (self.bc, self.geom.clone(), self.config.capacity_clamp);
        let noise = NoiseSpec {
            model_noise_std: DVector::from_element(
                self.num_cells(),
                self.config.density_model_noise_std,
            ),
            seed: self.step_seed(purpose::MODEL_NOISE, 0),
        };
        self.density_ens = propagate(
            &self.density_ens,
            |x| {
                let field = DensityField::new(x.iter().copied().collect());
                let out = ctm_step_with(&field, &fds, &bc, &geom, clamp)?;
                Ok(DVector::from_vec(out.field.rho))
            },
            &noise,
        )?;
        self.clamp_densities();
        Ok(())
    }

    /// Forecast, then update against whatever densities were observed.
    pub fn assimilate_densities(&mut self, obs: Option<&DensityObservations>) -> Result<()> {
        self.propagate_densities()?;
        self.update_densities(obs)
    }

    /// Density analysis with a row-selector operator; no forecast.
    pub fn update_densities(&mut self, obs: Option<&DensityObservations>) -> Result<()> {
        let Some(obs) = obs.filter(|o| !o.cells.is_empty()) else {
            return Ok(());
        };
        obs.check(self.num_cells())?;
        let m = obs.cells.len();
        let mut h = DMatrix::zeros(m, self.num_cells());
        for (row, &cell) in obs.cells.iter().enumerate() {
            h[(row, cell)] = 1.0;
        }
        let batch = ObservationBatch::sample(
            DVector::from_column_slice(&obs.values),
            DVector::from_column_slice(&obs.noise_std),
            self.density_ens.size(),
            self.step_seed(purpose::OBS_PERTURBATION, 0),
            ObservationOperator::Linear(h),
        )?;
        self.density_ens = analysis_linear(&self.density_ens, &batch)?.posterior;
        self.clamp_densities();
        Ok(())
    }

    /// Predicted probe speeds: row i, column j is the speed member j's
    /// free-flow speed implies at incident cell i, given `density_mean`.
    pub fn build_diagnostic_matrix(&self, density_mean: &DVector<f64>) -> Result<DMatrix<f64>> {
        let v = self.num_params();
        let n = self.vmax_ens.size();
        let members = self.vmax_ens.members();
        let mut a_hat = DMatrix::zeros(v, n);
        for (i, &cell) in self.geom.incident_cells.iter().enumerate() {
            let rho = density_mean[cell].clamp(0.0, self.fd0.rho_j);
            for j in 0..n {
                let fd = self.fd0.with_free_flow_speed(members[(i, j)])?;
                a_hat[(i, j)] = speed_from_density(rho, &fd)?;
            }
        }
        Ok(a_hat)
    }

    /// Random walk on the free-flow speeds followed by the nonlinear update
    /// against probe speeds and direct drone readings.
    pub fn assimilate_speeds(
        &mut self,
        probe: Option<&SpeedObservations>,
        drone_vmax: &[VmaxReading],
    ) -> Result<()> {
        let v = self.num_params();
        if let Some(p) = probe {
            if p.values.len() != v {
                return Err(Error::Dimension(format!(
                    "{} probe speeds for {v} incident cells",
                    p.values.len()
                )));
            }
        }
        if let Some(r) = drone_vmax.iter().find(|r| r.incident >= v) {
            return Err(Error::Dimension(format!("drone reading for incident {}", r.incident)));
        }

        let walk = NoiseSpec {
            model_noise_std: DVector::from_element(v, self.config.vmax_walk_std),
            seed: self.step_seed(purpose::PARAM_WALK, 0),
        };
        self.vmax_ens = propagate(&self.vmax_ens, |x| Ok(x.clone()), &walk)?;
        self.clamp_vmax();

        let n = self.vmax_ens.size();
        let mut rows: Vec<DVector<f64>> = Vec::new();
        let mut d = Vec::new();
        let mut std = Vec::new();
        if let Some(p) = probe {
            let a_hat = self.build_diagnostic_matrix(&self.density_mean())?;
            self.check_monotone(&a_hat)?;
            for i in 0..v {
                rows.push(a_hat.row(i).transpose());
                d.push(p.values[i]);
                std.push(p.noise_std);
            }
        }
        for r in drone_vmax {
            rows.push(self.vmax_ens.members().row(r.incident).transpose());
            d.push(r.value);
            std.push(r.noise_std);
        }
        if rows.is_empty() {
            return Ok(());
        }
        let a_hat = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
        let (big_d, upsilon) = perturb_observations(
            &DVector::from_vec(d),
            &DVector::from_vec(std),
            n,
            self.step_seed(purpose::OBS_PERTURBATION, 1),
        )?;
        self.vmax_ens = analysis_nonlinear(&self.vmax_ens, &a_hat, &big_d, &upsilon)?.posterior;
        self.clamp_vmax();
        self.speed_events += 1;
        Ok(())
    }

    /// Predicted speed must not decrease as a member's v_max grows.
    fn check_monotone(&self, a_hat: &DMatrix<f64>) -> Result<()> {
        let members = self.vmax_ens.members();
        for i in 0..a_hat.nrows() {
            let mut order: Vec<usize> = (0..members.ncols()).collect();
            order.sort_by(|&a, &b| members[(i, a)].total_cmp(&members[(i, b)]));
            for w in order.windows(2) {
                if a_hat[(i, w[1])] < a_hat[(i, w[0])] - 1e-9 * a_hat[(i, w[0])].abs().max(1.0) {
                    return Err(Error::NonMonotone {
                        cell: self.geom.incident_cells[i],
                    });
                }
            }
        }
        Ok(())
    }

    /// Installs the mean free-flow speed (and matching critical density) at
    /// every incident cell. Other cells keep the baseline diagram.
    pub fn writeback_parameters(&mut self) -> Result<()> {
        let mean = self.vmax_mean();
        for (i, &cell) in self.geom.incident_cells.iter().enumerate() {
            self.active_fds[cell] = self.fd0.with_free_flow_speed(mean[i])?;
        }
        Ok(())
    }

    /// One estimation step: density forecast and update every call; the
    /// parameter update and write-back only when speed data is present.
    pub fn run_step(&mut self, feed: &SensorFeed) -> Result<StepReport> {
        self.clock += 1;
        let mut densities = feed.loop_density.clone();
        if let Some(drone) = feed.drone.as_ref().and_then(|d| d.densities.as_ref()) {
            match densities.as_mut() {
                Some(all) => all.extend(drone),
                None => densities = Some(drone.clone()),
            }
        }
        self.assimilate_densities(densities.as_ref())?;

        let speed_assimilated = feed.has_speed_data();
        if speed_assimilated {
            self.assimilate_speeds(feed.probe_speed.as_ref(), feed.drone_vmax())?;
            self.writeback_parameters()?;
        }
        Ok(StepReport {
            clock: self.clock,
            speed_assimilated,
            density_trace: self.density_trace(),
            vmax_trace: self.vmax_trace(),
        })
    }
}

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    config(field, reason)
}
