//! Batch Gaussian-process regression of one sensor's object trajectory.
//!
//! The prior is the constant-acceleration (white-noise-on-jerk) motion
//! model. Its inverse kernel is block tridiagonal, so the posterior mean at
//! the measurement times comes out of a linear-time block solve, and the
//! posterior at any time inside the support depends only on the two
//! bracketing knots.
//!
//! Knot times are stored as offsets from the first measurement so that
//! wall-clock epochs never enter the `dt^5` terms.

pub mod model;
pub mod solver;

use nalgebra::{Cholesky, Matrix3, Vector3};

use crate::error::{CalibError, Result};
pub use model::{prior_mean_at, process_noise, process_noise_inverse, transition, Block, State};
pub use solver::{
    builtin_solvers, BlockTridiagonal, KnotProblem, Observation, RtsSmoother, TrajectorySolver,
    DEFAULT_SOLVER,
};

/// Position, velocity and acceleration of the tracked object at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryState {
    pub time: f64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

impl TrajectoryState {
    pub fn from_stacked(time: f64, x: &State) -> Self {
        Self {
            time,
            position: x.fixed_rows::<3>(0).into_owned(),
            velocity: x.fixed_rows::<3>(3).into_owned(),
            acceleration: x.fixed_rows::<3>(6).into_owned(),
        }
    }

    /// `[position; velocity; acceleration]`
    pub fn stacked(&self) -> State {
        let mut x = State::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.position);
        x.fixed_rows_mut::<3>(3).copy_from(&self.velocity);
        x.fixed_rows_mut::<3>(6).copy_from(&self.acceleration);
        x
    }

    pub fn is_finite(&self) -> bool {
        self.time.is_finite() && self.stacked().iter().all(|v| v.is_finite())
    }
}

fn is_symmetric(m: &Matrix3<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0)
}

fn check_spd<const D: usize>(
    m: &nalgebra::SMatrix<f64, D, D>,
    what: &str,
) -> Result<nalgebra::SMatrix<f64, D, D>> {
    if !m.iter().all(|v| v.is_finite()) || (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(CalibError::InvalidArgument(format!(
            "{what} must be finite and symmetric"
        )));
    }
    Cholesky::new(*m)
        .map(|c| c.inverse())
        .ok_or_else(|| CalibError::InvalidArgument(format!("{what} is not positive definite")))
}

/// One timestamped 3D position with its noise covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub time: f64,
    pub position: Vector3<f64>,
    pub noise_cov: Matrix3<f64>,
}

impl Measurement {
    pub fn new(time: f64, position: Vector3<f64>, noise_cov: Matrix3<f64>) -> Result<Self> {
        if !time.is_finite() || !position.iter().all(|v| v.is_finite()) {
            return Err(CalibError::InvalidArgument(format!(
                "measurement at {time} s has non-finite fields"
            )));
        }
        if !is_symmetric(&noise_cov) {
            return Err(CalibError::InvalidArgument(format!(
                "noise covariance at {time} s is not symmetric"
            )));
        }
        check_spd(&noise_cov, "measurement noise covariance")?;
        Ok(Self {
            time,
            position,
            noise_cov,
        })
    }

    /// Measurement with covariance `sigma^2 I`.
    pub fn isotropic(time: f64, position: Vector3<f64>, sigma: f64) -> Result<Self> {
        Self::new(time, position, Matrix3::identity() * (sigma * sigma))
    }
}

/// One sensor's measurements, strictly increasing in time.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    sensor_id: String,
    measurements: Vec<Measurement>,
}

impl MeasurementSet {
    pub const MIN_LEN: usize = 3;

    pub fn new(sensor_id: impl Into<String>, measurements: Vec<Measurement>) -> Result<Self> {
        if measurements.len() < Self::MIN_LEN {
            return Err(CalibError::InvalidArgument(format!(
                "a measurement set needs at least {} measurements, got {}",
                Self::MIN_LEN,
                measurements.len()
            )));
        }
        if let Some(w) = measurements.windows(2).find(|w| !(w[1].time > w[0].time)) {
            return Err(CalibError::InvalidArgument(format!(
                "measurement times must be strictly increasing ({} s followed by {} s)",
                w[0].time, w[1].time
            )));
        }
        Ok(Self {
            sensor_id: sensor_id.into(),
            measurements,
        })
    }

    pub fn sensor_id(&self) -> &str {
        &self.sensor_id
    }

    pub fn measurements(&self) -> &[Measurement] {
        &self.measurements
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.measurements.iter().map(|m| m.time)
    }

    /// Mean interval between consecutive measurements, seconds.
    pub fn mean_sample_interval(&self) -> f64 {
        let first = self.measurements[0].time;
        let last = self.measurements[self.len() - 1].time;
        (last - first) / (self.len() - 1) as f64
    }
}

/// Parameters of the constant-acceleration prior. The prior carries no
/// control input.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionPrior {
    qc: Matrix3<f64>,
    qc_inv: Matrix3<f64>,
    initial_mean: State,
    initial_cov: Block,
    initial_cov_inv: Block,
}

impl MotionPrior {
    pub fn new(qc: Matrix3<f64>, initial_mean: State, initial_cov: Block) -> Result<Self> {
        let qc_inv = check_spd(&qc, "jerk power spectral density")?;
        let initial_cov_inv = check_spd(&initial_cov, "initial state covariance")?;
        if !initial_mean.iter().all(|v| v.is_finite()) {
            return Err(CalibError::InvalidArgument(
                "initial state mean must be finite".into(),
            ));
        }
        Ok(Self {
            qc,
            qc_inv,
            initial_mean,
            initial_cov,
            initial_cov_inv,
        })
    }

    /// Weak data-anchored prior: the first measured position, zero velocity
    /// and acceleration, diagonal initial covariance.
    pub fn from_measurements(data: &MeasurementSet, settings: &PriorSettings) -> Result<Self> {
        if !(settings.qc > 0.0) || !settings.qc.is_finite() {
            return Err(CalibError::InvalidArgument(format!(
                "qc must be positive, got {}",
                settings.qc
            )));
        }
        let mut mean = State::zeros();
        mean.fixed_rows_mut::<3>(0)
            .copy_from(&data.measurements()[0].position);
        let mut cov = Block::zeros();
        for (block, &var) in settings.initial_variance.iter().enumerate() {
            for axis in 0..3 {
                cov[(3 * block + axis, 3 * block + axis)] = var;
            }
        }
        Self::new(Matrix3::identity() * settings.qc, mean, cov)
    }

    pub fn qc(&self) -> &Matrix3<f64> {
        &self.qc
    }

    pub fn qc_inv(&self) -> &Matrix3<f64> {
        &self.qc_inv
    }

    pub fn initial_mean(&self) -> &State {
        &self.initial_mean
    }

    pub fn initial_cov(&self) -> &Block {
        &self.initial_cov
    }

    pub fn initial_cov_inv(&self) -> &Block {
        &self.initial_cov_inv
    }
}

/// Scalar knobs for building a [`MotionPrior`] from data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSettings {
    /// Isotropic jerk power spectral density, m^2/s^5.
    pub qc: f64,
    /// Initial variances of position (m^2), velocity (m^2/s^2) and
    /// acceleration (m^2/s^4), applied per axis.
    pub initial_variance: [f64; 3],
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self {
            qc: 1.0,
            initial_variance: [1e2, 1e2, 1e2],
        }
    }
}

/// Posterior mean trajectory with everything needed to interpolate it.
#[derive(Debug, Clone, PartialEq)]
pub struct GpTrajectory {
    prior: MotionPrior,
    origin: f64,
    offsets: Vec<f64>,
    posterior: Vec<State>,
    prior_means: Vec<State>,
}

impl GpTrajectory {
    /// Wraps a solved knot problem. `origin` is the absolute time of offset 0.
    pub fn from_solution(origin: f64, problem: &KnotProblem, posterior: Vec<State>) -> Result<Self> {
        if posterior.len() != problem.len() {
            return Err(CalibError::InvalidArgument(format!(
                "solution has {} states for {} knots",
                posterior.len(),
                problem.len()
            )));
        }
        Ok(Self {
            prior: problem.prior().clone(),
            origin,
            offsets: problem.offsets().to_vec(),
            prior_means: problem.prior_means(),
            posterior,
        })
    }

    pub fn prior(&self) -> &MotionPrior {
        &self.prior
    }

    /// Absolute time of the first knot.
    pub fn origin(&self) -> f64 {
        self.origin
    }

    /// Knot times relative to [`Self::origin`].
    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn times(&self) -> Vec<f64> {
        self.offsets.iter().map(|o| self.origin + o).collect()
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.origin
    }

    pub fn end(&self) -> f64 {
        self.origin + self.offsets[self.len() - 1]
    }

    pub fn posterior_stacked(&self) -> &[State] {
        &self.posterior
    }

    pub fn prior_means(&self) -> &[State] {
        &self.prior_means
    }

    pub fn knot(&self, i: usize) -> TrajectoryState {
        TrajectoryState::from_stacked(self.origin + self.offsets[i], &self.posterior[i])
    }

    pub fn posterior_means(&self) -> Vec<TrajectoryState> {
        (0..self.len()).map(|i| self.knot(i)).collect()
    }

    /// Posterior state at absolute time `tau`.
    pub fn interpolate(&self, tau: f64) -> Result<TrajectoryState> {
        self.interpolate_offset(tau - self.origin)
    }

    /// Posterior state at `offset` seconds after [`Self::origin`].
    ///
    /// Only the bracketing knots contribute. Queries outside the knot span
    /// are refused.
    pub fn interpolate_offset(&self, offset: f64) -> Result<TrajectoryState> {
        let last = self.offsets[self.len() - 1];
        if !(offset >= 0.0 && offset <= last) {
            return Err(CalibError::OutOfSupport {
                tau: self.origin + offset,
                start: self.start(),
                end: self.end(),
            });
        }
        let upper = self.offsets.partition_point(|&t| t <= offset);
        let i = upper - 1;
        if self.offsets[i] == offset {
            return Ok(self.knot(i));
        }
        let (t_i, t_j) = (self.offsets[i], self.offsets[i + 1]);
        let (lambda, psi) = interpolation_weights(offset - t_i, t_j - offset);
        let prior_tau = apply_pattern(&transition_pattern(offset - t_i), &self.prior_means[i]);
        let x = prior_tau
            + apply_pattern(&lambda, &(self.posterior[i] - self.prior_means[i]))
            + apply_pattern(&psi, &(self.posterior[i + 1] - self.prior_means[i + 1]));
        Ok(TrajectoryState::from_stacked(self.origin + offset, &x))
    }
}

fn transition_pattern(dt: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, dt, 0.5 * dt * dt, 0.0, 1.0, dt, 0.0, 0.0, 1.0)
}

/// Applies `pattern (x) I_3` to a stacked state.
fn apply_pattern(pattern: &Matrix3<f64>, x: &State) -> State {
    let mut out = State::zeros();
    for i in 0..3 {
        let mut acc = Vector3::zeros();
        for j in 0..3 {
            acc += x.fixed_rows::<3>(3 * j) * pattern[(i, j)];
        }
        out.fixed_rows_mut::<3>(3 * i).copy_from(&acc);
    }
    out
}

/// Scalar patterns of the interpolation weights for a query `before`
/// seconds after knot i and `after` seconds ahead of knot i+1.
///
/// Every matrix involved is a scalar pattern Kronecker either `Qc` or `I`;
/// in `Q(i,tau) Phi(i+1,tau)^T Q(i,i+1)^-1` the `Qc` factors cancel, leaving
/// `pattern (x) I_3`.
fn interpolation_weights(before: f64, after: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let q_tau = noise_pattern_matrix(before);
    let q_inv = noise_pattern_inverse(before + after);
    let psi = q_tau * transition_pattern(after).transpose() * q_inv;
    let lambda = transition_pattern(before) - psi * transition_pattern(before + after);
    (lambda, psi)
}

fn noise_pattern_matrix(dt: f64) -> Matrix3<f64> {
    let dt2 = dt * dt;
    let dt3 = dt2 * dt;
    let dt4 = dt3 * dt;
    let dt5 = dt4 * dt;
    Matrix3::new(
        dt5 / 20.0,
        dt4 / 8.0,
        dt3 / 6.0,
        dt4 / 8.0,
        dt3 / 3.0,
        dt2 / 2.0,
        dt3 / 6.0,
        dt2 / 2.0,
        dt,
    )
}

fn noise_pattern_inverse(dt: f64) -> Matrix3<f64> {
    let i1 = 1.0 / dt;
    let i2 = i1 * i1;
    let i3 = i2 * i1;
    Matrix3::new(
        720.0 * i3 * i2,
        -360.0 * i2 * i2,
        60.0 * i3,
        -360.0 * i2 * i2,
        192.0 * i3,
        -36.0 * i2,
        60.0 * i3,
        -36.0 * i2,
        9.0 * i1,
    )
}

/// Posterior mean at every measurement time, solved with the default
/// block-tridiagonal factorisation.
pub fn regress(data: &MeasurementSet, prior: &MotionPrior) -> Result<GpTrajectory> {
    regress_with(data, prior, &BlockTridiagonal)
}

pub fn regress_with(
    data: &MeasurementSet,
    prior: &MotionPrior,
    solver: &dyn TrajectorySolver,
) -> Result<GpTrajectory> {
    let problem = KnotProblem::from_measurements(data, prior.clone());
    let posterior = solver.solve(&problem)?;
    GpTrajectory::from_solution(data.measurements()[0].time, &problem, posterior)
}

pub fn interpolate(traj: &GpTrajectory, tau: f64) -> Result<TrajectoryState> {
    traj.interpolate(tau)
}
