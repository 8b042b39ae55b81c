//! Cell transmission model on a linear freeway corridor.
//!
//! Densities are carried in veh/km per cell; flows between cells are counted
//! in vehicles per time step. The corridor discretization ties the cell length
//! to the baseline free-flow speed (`dx = v_max * dt`), so for a cell running
//! the baseline diagram the sending flow is the full cell content and the
//! receiving flow is `rho_cr / (rho_j - rho_cr) * (rho_j * dx - n)`.
//! Cells with a reduced free-flow speed send only the fraction
//! `v_max * dt / dx` of their content.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Relative slack allowed when checking densities against their physical
/// range, to absorb floating round-off from upstream arithmetic.
const RANGE_SLACK: f64 = 1e-9;

/// Triangular flow-density relation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundamentalDiagram {
    /// Free-flow speed [km/h].
    pub v_max: f64,
    /// Critical density [veh/km].
    pub rho_cr: f64,
    /// Jam density [veh/km].
    pub rho_j: f64,
}

impl FundamentalDiagram {
    pub fn new(v_max: f64, rho_cr: f64, rho_j: f64) -> Result<Self> {
        let fd = Self { v_max, rho_cr, rho_j };
        fd.validate()?;
        Ok(fd)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return Err(domain(format!("v_max must be positive, got {}", self.v_max)));
        }
        if !(self.rho_cr > 0.0 && self.rho_cr < self.rho_j && self.rho_j.is_finite()) {
            return Err(domain(format!(
                "need 0 < rho_cr < rho_j, got rho_cr = {}, rho_j = {}",
                self.rho_cr, self.rho_j
            )));
        }
        Ok(())
    }

    /// Slope magnitude of the congested branch [km/h].
    pub fn backward_wave_speed(&self) -> f64 {
        self.v_max * self.rho_cr / (self.rho_j - self.rho_cr)
    }

    /// Maximum flow [veh/h].
    pub fn capacity(&self) -> f64 {
        self.v_max * self.rho_cr
    }

    /// Flow [veh/h] at density `rho`.
    pub fn flow(&self, rho: f64) -> Result<f64> {
        Ok(rho * speed_from_density(rho, self)?)
    }

    /// Diagram for a reduced free-flow speed `v_max_t`, keeping the jam density
    /// and backward wave speed of `self` (treated as the incident-free baseline).
    pub fn with_free_flow_speed(&self, v_max_t: f64) -> Result<Self> {
        let rho_cr = updated_critical_density(v_max_t, self)?;
        Ok(Self {
            v_max: v_max_t,
            rho_cr,
            rho_j: self.rho_j,
        })
    }
}

impl Default for FundamentalDiagram {
    /// Three-lane freeway baseline: 90 km/h, 60 veh/km, 300 veh/km.
    fn default() -> Self {
        Self {
            v_max: 90.0,
            rho_cr: 60.0,
            rho_j: 300.0,
        }
    }
}

/// Discretized corridor layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorridorGeometry {
    pub num_cells: usize,
    /// Cell length [km].
    pub dx: f64,
    /// Time step [h].
    pub dt: f64,
    /// Cell fed by the upstream demand (node 1).
    pub entry_cell: usize,
    /// Diverge cell (node 2); the off-ramp branch (node 3) attaches here.
    pub offramp_cell: Option<usize>,
    /// Last mainline cell (node 4).
    pub exit_cell: usize,
    /// Incident-prone cells, upstream to downstream.
    pub incident_cells: Vec<usize>,
    pub lanes: u32,
}

impl CorridorGeometry {
    /// Builds a corridor whose cell length satisfies `dx = v_max * dt` for the
    /// given baseline diagram.
    pub fn for_baseline(num_cells: usize, dt_hours: f64, fd0: &FundamentalDiagram) -> Result<Self> {
        let geom = Self {
            num_cells,
            dx: fd0.v_max * dt_hours,
            dt: dt_hours,
            entry_cell: 0,
            offramp_cell: None,
            exit_cell: num_cells.saturating_sub(1),
            incident_cells: Vec::new(),
            lanes: 3,
        };
        geom.validate(fd0)?;
        Ok(geom)
    }

    /// The 5 km, 20-cell corridor with an off-ramp at cell 10 and incident
    /// zones at cells 5 and 15.
    pub fn freeway_with_offramp() -> Self {
        let fd0 = FundamentalDiagram::default();
        let dt = 10.0 / 3600.0;
        Self {
            num_cells: 20,
            dx: fd0.v_max * dt,
            dt,
            entry_cell: 0,
            offramp_cell: Some(10),
            exit_cell: 19,
            incident_cells: vec![5, 15],
            lanes: 3,
        }
    }

    pub fn validate(&self, fd0: &FundamentalDiagram) -> Result<()> {
        if self.num_cells == 0 {
            return Err(domain("corridor needs at least one cell"));
        }
        if !(self.dx > 0.0 && self.dt > 0.0) {
            return Err(domain("dx and dt must be positive"));
        }
        let cfl = fd0.v_max * self.dt;
        if ((cfl - self.dx) / self.dx).abs() > 1e-9 {
            return Err(domain(format!(
                "cell length {} km does not match v_max * dt = {} km",
                self.dx, cfl
            )));
        }
        if self.entry_cell != 0 || self.exit_cell != self.num_cells - 1 {
            return Err(domain("entry must be cell 0 and exit the last cell"));
        }
        if let Some(c) = self.offramp_cell {
            if c >= self.num_cells {
                return Err(domain(format!("off-ramp cell {c} outside corridor")));
            }
        }
        for &c in &self.incident_cells {
            if c >= self.num_cells {
                return Err(domain(format!("incident cell {c} outside corridor")));
            }
        }
        Ok(())
    }

    pub fn length_km(&self) -> f64 {
        self.dx * self.num_cells as f64
    }
}

/// Densities per cell [veh/km].
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub rho: Vec<f64>,
}

impl DensityField {
    pub fn new(rho: Vec<f64>) -> Self {
        Self { rho }
    }

    pub fn uniform(num_cells: usize, rho: f64) -> Self {
        Self { rho: vec![rho; num_cells] }
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    /// Vehicle counts per cell, `n = rho * dx`.
    pub fn vehicles(&self, dx: f64) -> Vec<f64> {
        self.rho.iter().map(|r| r * dx).collect()
    }

    pub fn total_vehicles(&self, dx: f64) -> f64 {
        self.rho.iter().sum::<f64>() * dx
    }

    pub fn validate(&self, fds: &[FundamentalDiagram]) -> Result<()> {
        if self.rho.len() != fds.len() {
            return Err(Error::Dimension(format!(
                "{} densities but {} fundamental diagrams",
                self.rho.len(),
                fds.len()
            )));
        }
        for (i, (&r, fd)) in self.rho.iter().zip(fds).enumerate() {
            check_density(r, fd).map_err(|_| {
                domain(format!("cell {i}: density {r} outside [0, {}]", fd.rho_j))
            })?;
        }
        Ok(())
    }
}

/// Downstream boundary behaviour of the last cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Downstream {
    /// Unbounded receiving flow.
    Free,
    /// Nothing leaves the corridor.
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryConditions {
    /// Upstream demand [veh/h].
    pub inflow_demand: f64,
    /// Fraction of the diverge cell's outflow taken by the off-ramp.
    pub offramp_split: f64,
    pub downstream: Downstream,
}

impl BoundaryConditions {
    pub fn closed() -> Self {
        Self {
            inflow_demand: 0.0,
            offramp_split: 0.0,
            downstream: Downstream::Closed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inflow_demand >= 0.0 && self.inflow_demand.is_finite()) {
            return Err(domain("inflow demand must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.offramp_split) {
            return Err(domain("off-ramp split must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Vehicles crossing the corridor boundary during one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FlowLedger {
    pub inflow: f64,
    pub offramp_outflow: f64,
    pub downstream_outflow: f64,
}

impl FlowLedger {
    pub fn net(&self) -> f64 {
        self.inflow - self.offramp_outflow - self.downstream_outflow
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub field: DensityField,
    pub ledger: FlowLedger,
}

fn check_density(rho: f64, fd: &FundamentalDiagram) -> Result<()> {
    let slack = RANGE_SLACK * fd.rho_j;
    if rho.is_nan() || rho < -slack || rho > fd.rho_j + slack {
        return Err(domain(format!("density {rho} outside [0, {}]", fd.rho_j)));
    }
    Ok(())
}

/// Speed [km/h] on the triangular diagram at density `rho`.
pub fn speed_from_density(rho: f64, fd: &FundamentalDiagram) -> Result<f64> {
    check_density(rho, fd)?;
    let rho = rho.clamp(0.0, fd.rho_j);
    if rho <= fd.rho_cr {
        Ok(fd.v_max)
    } else {
        Ok(fd.v_max * fd.rho_cr * (fd.rho_j - rho) / (rho * (fd.rho_j - fd.rho_cr)))
    }
}

/// Critical density for a reduced free-flow speed that keeps the baseline
/// backward wave speed and jam density.
pub fn updated_critical_density(v_max_t: f64, fd0: &FundamentalDiagram) -> Result<f64> {
    if !(v_max_t > 0.0 && v_max_t.is_finite()) {
        return Err(domain(format!("free-flow speed must be positive, got {v_max_t}")));
    }
    let anchor = fd0.rho_cr * fd0.v_max;
    Ok(anchor * fd0.rho_j / (v_max_t * (fd0.rho_j - fd0.rho_cr) + anchor))
}

fn check_count(n: f64, fd: &FundamentalDiagram, geom: &CorridorGeometry) -> Result<()> {
    let max = fd.rho_j * geom.dx;
    if n.is_nan() || n < -RANGE_SLACK * max || n > max * (1.0 + RANGE_SLACK) {
        return Err(domain(format!("vehicle count {n} outside [0, {max}]")));
    }
    Ok(())
}

/// Vehicles a cell can send in one step.
pub fn sending_flow(n: f64, fd: &FundamentalDiagram, geom: &CorridorGeometry, capacity_clamp: bool) -> f64 {
    let courant = fd.v_max * geom.dt / geom.dx;
    let s = courant * n.max(0.0);
    if capacity_clamp {
        s.min(fd.capacity() * geom.dt)
    } else {
        s
    }
}

/// Vehicles a cell can accept in one step.
pub fn receiving_flow(n: f64, fd: &FundamentalDiagram, geom: &CorridorGeometry, capacity_clamp: bool) -> f64 {
    let wave_courant = fd.backward_wave_speed() * geom.dt / geom.dx;
    let r = (wave_courant * (fd.rho_j * geom.dx - n)).max(0.0);
    if capacity_clamp {
        r.min(fd.capacity() * geom.dt)
    } else {
        r
    }
}

/// Vehicles moving between two adjacent cells sharing one diagram.
pub fn interface_flow(
    n_up: f64,
    n_down: f64,
    fd: &FundamentalDiagram,
    geom: &CorridorGeometry,
    capacity_clamp: bool,
) -> Result<f64> {
    interface_flow_between(n_up, fd, n_down, fd, geom, capacity_clamp)
}

/// Vehicles moving from an upstream cell into a downstream cell, each with its
/// own diagram: upstream sending term against downstream receiving term.
pub fn interface_flow_between(
    n_up: f64,
    fd_up: &FundamentalDiagram,
    n_down: f64,
    fd_down: &FundamentalDiagram,
    geom: &CorridorGeometry,
    capacity_clamp: bool,
) -> Result<f64> {
    check_count(n_up, fd_up, geom)?;
    check_count(n_down, fd_down, geom)?;
    let s = sending_flow(n_up, fd_up, geom, capacity_clamp);
    let r = receiving_flow(n_down, fd_down, geom, capacity_clamp);
    Ok(s.min(r).max(0.0))
}

/// One CTM step with the flow relation taken verbatim (no capacity clamp).
pub fn ctm_step(
    field: &DensityField,
    fds: &[FundamentalDiagram],
    bc: &BoundaryConditions,
    geom: &CorridorGeometry,
) -> Result<DensityField> {
    Ok(ctm_step_with(field, fds, bc, geom, false)?.field)
}

/// One CTM step, reporting the vehicles that crossed the corridor boundary.
pub fn ctm_step_with(
    field: &DensityField,
    fds: &[FundamentalDiagram],
    bc: &BoundaryConditions,
    geom: &CorridorGeometry,
    capacity_clamp: bool,
) -> Result<StepOutcome> {
    let cells = geom.num_cells;
    if field.len() != cells {
        return Err(Error::Dimension(format!(
            "field has {} cells, corridor has {cells}",
            field.len()
        )));
    }
    field.validate(fds)?;
    bc.validate()?;
    for fd in fds {
        let limit = geom.dx / geom.dt * (1.0 + RANGE_SLACK);
        if fd.v_max > limit || fd.backward_wave_speed() > limit {
            return Err(domain(format!(
                "diagram {fd:?} violates the CFL limit of {} km/h",
                geom.dx / geom.dt
            )));
        }
    }

    let n: Vec<f64> = field
        .rho
        .iter()
        .zip(fds)
        .map(|(r, fd)| r.clamp(0.0, fd.rho_j) * geom.dx)
        .collect();

    // entering[i]: vehicles entering cell i from upstream; leaving[i]: all
    // vehicles leaving cell i (mainline plus off-ramp).
    let mut entering = vec![0.0; cells];
    let mut leaving = vec![0.0; cells];
    let mut ledger = FlowLedger::default();

    let demand = bc.inflow_demand * geom.dt;
    let inflow = demand.min(receiving_flow(n[0], &fds[0], geom, capacity_clamp));
    entering[0] = inflow;
    ledger.inflow = inflow;

    for i in 0..cells {
        let send = sending_flow(n[i], &fds[i], geom, capacity_clamp);
        let split = if geom.offramp_cell == Some(i) {
            bc.offramp_split
        } else {
            0.0
        };
        let to_ramp = split * send;
        let mainline_share = send - to_ramp;
        let mainline = if i + 1 < cells {
            mainline_share.min(receiving_flow(n[i + 1], &fds[i + 1], geom, capacity_clamp))
        } else {
            match bc.downstream {
                Downstream::Free => mainline_share,
                Downstream::Closed => 0.0,
            }
        };
        leaving[i] = to_ramp + mainline;
        ledger.offramp_outflow += to_ramp;
        if i + 1 < cells {
            entering[i + 1] = mainline;
        } else {
            ledger.downstream_outflow = mainline;
        }
    }

    let rho = (0..cells)
        .map(|i| {
            let next = n[i] + entering[i] - leaving[i];
            (next / geom.dx).clamp(0.0, fds[i].rho_j)
        })
        .collect();

    Ok(StepOutcome {
        field: DensityField { rho },
        ledger,
    })
}
