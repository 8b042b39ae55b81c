//! Freeway traffic estimation with drone-assisted incident detection.
//!
//! The crate couples four pieces:
//!
//! * [`ctm`]: a cell transmission model with a triangular fundamental diagram
//!   and incident-driven re-parameterization that keeps the backward wave fixed;
//! * [`enkf`]: stochastic ensemble Kalman filter algebra (linear and
//!   predicted-measurement analysis steps);
//! * [`dual`]: a dual filter estimating cell densities and the free-flow speed
//!   at incident-prone cells from loop detectors, probe speeds and drone readings;
//! * [`planner`]: one-step-lookahead drone routing that picks the direction
//!   whose simulated observations minimize a weighted covariance trace.
//!
//! [`scenario`] generates a synthetic ground truth with sensor emission and
//! [`experiment`] runs the end-to-end comparisons and writes CSV/SVG output.

pub mod ctm;
pub mod dual;
pub mod enkf;
pub mod error;
pub mod experiment;
pub mod planner;
pub mod rng;
pub mod scenario;
mod svg;

pub use ctm::{
    ctm_step, ctm_step_with, interface_flow, speed_from_density, updated_critical_density,
    BoundaryConditions, CorridorGeometry, DensityField, Downstream, FundamentalDiagram,
};
pub use dual::{DualFilterState, EstimatorConfig, SensorFeed};
pub use enkf::{Ensemble, ObservationBatch, ObservationOperator};
pub use error::{Error, Result};
pub use experiment::{run_experiment, Mode, RunConfig, RunMetrics};
pub use planner::{DroneState, Heading};
pub use scenario::{ScenarioConfig, TruthTrace};
