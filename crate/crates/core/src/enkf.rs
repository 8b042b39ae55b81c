//! Stochastic ensemble Kalman filter algebra.
//!
//! An [`Ensemble`] stores its members as the columns of a `state_dim x N`
//! matrix. Analysis steps use perturbed observations: every member is updated
//! against its own noisy copy of the measurement, and the innovation matrix is
//! built from the sampled perturbations rather than a nominal noise covariance.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{purpose, substream};

/// Ensemble size used when none is configured.
pub const DEFAULT_ENSEMBLE_SIZE: usize = 100;

/// Relative Tikhonov jitter added to the innovation matrix when its Cholesky
/// factorization fails.
pub const DEFAULT_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::Dimension(format!(
                "ensemble needs at least 2 members, got {}",
                members.ncols()
            )));
        }
        Ok(Self { members })
    }

    pub fn from_columns(columns: &[DVector<f64>]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Dimension("no ensemble members".into()));
        }
        Self::new(DMatrix::from_columns(columns))
    }

    pub fn state_dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn into_members(self) -> DMatrix<f64> {
        self.members
    }

    pub fn member(&self, j: usize) -> DVector<f64> {
        self.members.column(j).into_owned()
    }

    /// Applies `f` to every entry in place; returns how many entries changed.
    pub fn map_entries(&mut self, mut f: impl FnMut(usize, f64) -> f64) -> usize {
        let mut changed = 0;
        for j in 0..self.members.ncols() {
            for i in 0..self.members.nrows() {
                let old = self.members[(i, j)];
                let new = f(i, old);
                if new != old {
                    changed += 1;
                    self.members[(i, j)] = new;
                }
            }
        }
        changed
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }

    /// `A - A 1_N`.
    pub fn anomalies(&self) -> DMatrix<f64> {
        centered(&self.members)
    }

    /// Per-component sample standard deviation (N - 1 denominator).
    pub fn std_dev(&self) -> DVector<f64> {
        let n = self.size() as f64;
        let a = self.anomalies();
        DVector::from_iterator(
            a.nrows(),
            a.row_iter().map(|r| (r.norm_squared() / (n - 1.0)).sqrt()),
        )
    }
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = m.column_mean();
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        col -= &mean;
    }
    out
}

/// How predicted measurements are formed from the ensemble.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationOperator {
    /// Linear map `H` (obs_dim x state_dim).
    Linear(DMatrix<f64>),
    /// Pre-computed predicted measurements `Â` (obs_dim x N), one column per member.
    Diagnostic(DMatrix<f64>),
}

/// A measurement vector together with its per-member perturbed copies.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    pub d: DVector<f64>,
    pub noise_std: DVector<f64>,
    /// `D`: column j is `d + Upsilon[:, j]`.
    pub perturbed: DMatrix<f64>,
    /// `Upsilon`: sampled observation errors.
    pub perturbations: DMatrix<f64>,
    pub operator: ObservationOperator,
}

impl ObservationBatch {
    /// Draws `n` perturbed copies of `d` and attaches `operator`.
    pub fn sample(
        d: DVector<f64>,
        noise_std: DVector<f64>,
        n: usize,
        seed: u64,
        operator: ObservationOperator,
    ) -> Result<Self> {
        let (perturbed, perturbations) = perturb_observations(&d, &noise_std, n, seed)?;
        let batch = Self {
            d,
            noise_std,
            perturbed,
            perturbations,
            operator,
        };
        batch.check_shapes()?;
        Ok(batch)
    }

    pub fn obs_dim(&self) -> usize {
        self.d.len()
    }

    fn check_shapes(&self) -> Result<()> {
        let m = self.d.len();
        if self.noise_std.len() != m
            || self.perturbed.nrows() != m
            || self.perturbations.shape() != self.perturbed.shape()
        {
            return Err(Error::Dimension("observation batch shapes disagree".into()));
        }
        match &self.operator {
            ObservationOperator::Linear(h) if h.nrows() != m => Err(Error::Dimension(format!(
                "H has {} rows for {m} observations",
                h.nrows()
            ))),
            ObservationOperator::Diagnostic(a_hat) if a_hat.nrows() != m => Err(Error::Dimension(
                format!("predicted measurements have {} rows for {m} observations", a_hat.nrows()),
            )),
            _ => Ok(()),
        }
    }
}

/// Additive Gaussian model error.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub model_noise_std: DVector<f64>,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none(state_dim: usize) -> Self {
        Self {
            model_noise_std: DVector::zeros(state_dim),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisResult {
    pub posterior: Ensemble,
    pub covariance: DMatrix<f64>,
    pub trace: f64,
}

impl AnalysisResult {
    fn from_posterior(posterior: Ensemble) -> Self {
        let (covariance, trace) = covariance_and_trace(&posterior);
        Self {
            posterior,
            covariance,
            trace,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    /// Relative diagonal jitter used when the innovation matrix fails to
    /// factorize; `None` surfaces the failure instead.
    pub jitter: Option<f64>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            jitter: Some(DEFAULT_JITTER),
        }
    }
}

/// Maps every member through `forward_model` and adds model noise.
///
/// Member `j` draws its noise from its own substream, so the result does not
/// depend on evaluation order.
pub fn propagate<F>(ens: &Ensemble, forward_model: F, noise: &NoiseSpec) -> Result<Ensemble>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let dim = ens.state_dim();
    if noise.model_noise_std.len() != dim {
        return Err(Error::Dimension(format!(
            "noise has {} components, state has {dim}",
            noise.model_noise_std.len()
        )));
    }
    if noise.model_noise_std.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Domain("model noise std must be non-negative".into()));
    }
    let mut columns = Vec::with_capacity(ens.size());
    for j in 0..ens.size() {
        let mut next = forward_model(&ens.member(j))?;
        if next.len() != dim {
            return Err(Error::Dimension(format!(
                "forward model returned {} components, expected {dim}",
                next.len()
            )));
        }
        if noise.model_noise_std.iter().any(|s| *s > 0.0) {
            let mut rng = substream(noise.seed, &[purpose::MODEL_NOISE, j as u64]);
            for (x, &s) in next.iter_mut().zip(noise.model_noise_std.iter()) {
                if s > 0.0 {
                    let w: f64 = Normal::new(0.0, s).expect("finite std").sample(&mut rng);
                    *x += w;
                }
            }
        }
        columns.push(next);
    }
    Ensemble::from_columns(&columns)
}

/// Returns `(D, Upsilon)` with `Upsilon[:, j] ~ N(0, diag(noise_std^2))`.
pub fn perturb_observations(
    d: &DVector<f64>,
    noise_std: &DVector<f64>,
    n: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if n < 2 {
        return Err(Error::Dimension(format!("need at least 2 members, got {n}")));
    }
    if noise_std.len() != d.len() {
        return Err(Error::Dimension("noise_std and d differ in length".into()));
    }
    if noise_std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::Domain("observation noise std must be non-negative".into()));
    }
    let m = d.len();
    let mut upsilon = DMatrix::zeros(m, n);
    for j in 0..n {
        let mut rng = substream(seed, &[purpose::OBS_PERTURBATION, j as u64]);
        for i in 0..m {
            let s = noise_std[i];
            if s > 0.0 {
                upsilon[(i, j)] = Normal::new(0.0, s).expect("finite std").sample(&mut rng);
            }
        }
    }
    let mut big_d = upsilon.clone();
    for mut col in big_d.column_iter_mut() {
        col += d;
    }
    Ok((big_d, upsilon))
}

/// Cholesky factor, rejected when a pivot is lost to round-off relative to
/// the largest diagonal entry.
fn factor(c: DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let n = c.nrows();
    let scale = (0..n).map(|i| c[(i, i)]).fold(0.0, f64::max);
    let chol = Cholesky::new(c)?;
    let floor = f64::EPSILON * n as f64 * scale;
    let l = chol.l_dirty();
    (0..n).all(|i| l[(i, i)] * l[(i, i)] > floor).then_some(chol)
}

/// Solves `C X = rhs` for a symmetric innovation matrix `C`.
fn solve_innovation(c: DMatrix<f64>, rhs: &DMatrix<f64>, opts: AnalysisOptions) -> Result<DMatrix<f64>> {
    let trace = c.trace();
    if let Some(chol) = factor(c.clone()) {
        return Ok(chol.solve(rhs));
    }
    let Some(rel) = opts.jitter else {
        return Err(Error::Singular { trace });
    };
    let eps = rel * trace;
    if !(eps > 0.0) {
        return Err(Error::Singular { trace });
    }
    let mut c = c;
    for i in 0..c.nrows() {
        c[(i, i)] += eps;
    }
    factor(c)
        .map(|chol| chol.solve(rhs))
        .ok_or(Error::Singular { trace })
}

fn check_obs_shapes(a: &Ensemble, d: &DMatrix<f64>, upsilon: &DMatrix<f64>) -> Result<()> {
    if d.ncols() != a.size() || upsilon.shape() != d.shape() {
        return Err(Error::Dimension(format!(
            "ensemble has {} members but D is {:?} and Upsilon {:?}",
            a.size(),
            d.shape(),
            upsilon.shape()
        )));
    }
    Ok(())
}

/// Analysis with a linear observation operator:
/// `A + A' A'^T H^T (H A' A'^T H^T + Y Y^T)^-1 (D - H A)`.
pub fn analysis_linear(a: &Ensemble, obs: &ObservationBatch) -> Result<AnalysisResult> {
    analysis_linear_with(a, obs, AnalysisOptions::default())
}

pub fn analysis_linear_with(
    a: &Ensemble,
    obs: &ObservationBatch,
    opts: AnalysisOptions,
) -> Result<AnalysisResult> {
    let ObservationOperator::Linear(h) = &obs.operator else {
        return Err(Error::Dimension(
            "analysis_linear needs a linear operator; use analysis_nonlinear for predictions".into(),
        ));
    };
    obs.check_shapes()?;
    if h.ncols() != a.state_dim() {
        return Err(Error::Dimension(format!(
            "H has {} columns, state has {}",
            h.ncols(),
            a.state_dim()
        )));
    }
    check_obs_shapes(a, &obs.perturbed, &obs.perturbations)?;

    let anomalies = a.anomalies();
    if anomalies.iter().all(|v| *v == 0.0) {
        return Ok(AnalysisResult::from_posterior(a.clone()));
    }
    let spread = &anomalies * anomalies.transpose();
    let spread_ht = &spread * h.transpose();
    let ups = &obs.perturbations;
    let innovation_cov = h * &spread_ht + ups * ups.transpose();
    let innovation = &obs.perturbed - h * a.members();
    let weights = solve_innovation(innovation_cov, &innovation, opts)?;
    let posterior = a.members() + spread_ht * weights;
    Ok(AnalysisResult::from_posterior(Ensemble::new(posterior)?))
}

/// Analysis against predicted measurements `Â` (one column per member):
/// `A + A' Â'^T (Â' Â'^T + Y Y^T)^-1 (D - Â)`.
pub fn analysis_nonlinear(
    a: &Ensemble,
    a_hat: &DMatrix<f64>,
    d: &DMatrix<f64>,
    upsilon: &DMatrix<f64>,
) -> Result<AnalysisResult> {
    analysis_nonlinear_with(a, a_hat, d, upsilon, AnalysisOptions::default())
}

pub fn analysis_nonlinear_with(
    a: &Ensemble,
    a_hat: &DMatrix<f64>,
    d: &DMatrix<f64>,
    upsilon: &DMatrix<f64>,
    opts: AnalysisOptions,
) -> Result<AnalysisResult> {
    check_obs_shapes(a, d, upsilon)?;
    if a_hat.shape() != d.shape() {
        return Err(Error::Dimension(format!(
            "predicted measurements {:?} do not match D {:?}",
            a_hat.shape(),
            d.shape()
        )));
    }
    let anomalies = a.anomalies();
    let predicted_anomalies = centered(a_hat);
    let cross = &anomalies * predicted_anomalies.transpose();
    if cross.iter().all(|v| *v == 0.0) {
        return Ok(AnalysisResult::from_posterior(a.clone()));
    }
    let innovation_cov =
        &predicted_anomalies * predicted_anomalies.transpose() + upsilon * upsilon.transpose();
    let innovation = d - a_hat;
    let weights = solve_innovation(innovation_cov, &innovation, opts)?;
    let posterior = a.members() + cross * weights;
    Ok(AnalysisResult::from_posterior(Ensemble::new(posterior)?))
}

/// Sample covariance `(A - A 1_N)(A - A 1_N)^T / (N - 1)` and its trace.
pub fn covariance_and_trace(ens: &Ensemble) -> (DMatrix<f64>, f64) {
    let a = ens.anomalies();
    let scale = 1.0 / (ens.size() as f64 - 1.0);
    let p = &a * a.transpose() * scale;
    let p = (&p + p.transpose()) * 0.5;
    let trace = p.trace();
    (p, trace)
}

/// Trace of the sample covariance without forming the full matrix.
pub fn ensemble_trace(ens: &Ensemble) -> f64 {
    ens.anomalies().norm_squared() / (ens.size() as f64 - 1.0)
}
