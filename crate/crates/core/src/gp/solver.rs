//! Posterior-mean solvers for the knot system of one trajectory.
//!
//! Both shipped solvers run in time linear in the number of knots:
//! `block-cholesky` builds the block-bidiagonal Cholesky factor of the
//! block-tridiagonal information matrix by QR of whitened rows, `rts` runs a forward Kalman filter followed by a
//! fixed-interval smoothing pass over the same prior. They agree to
//! rounding.

use nalgebra::{Cholesky, Matrix3, SMatrix, Vector3};

use crate::error::{CalibError, Result};
use crate::gp::model::{process_noise_unchecked, process_noise_whitener, transition_unchecked, Block, State};
use crate::gp::{MeasurementSet, MotionPrior};
use crate::registry::{Named, Registry};

pub const DEFAULT_SOLVER: &str = "block-cholesky";

/// A position observation attached to a knot.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub position: Vector3<f64>,
    pub noise_cov: Matrix3<f64>,
}

/// Knot times (relative to the first knot) with optional observations.
///
/// Knots without an observation are pure prior states; they let the batch
/// solve produce the posterior at arbitrary extra times.
#[derive(Debug, Clone)]
pub struct KnotProblem {
    offsets: Vec<f64>,
    observations: Vec<Option<Observation>>,
    prior: MotionPrior,
}

impl KnotProblem {
    pub fn new(
        offsets: Vec<f64>,
        observations: Vec<Option<Observation>>,
        prior: MotionPrior,
    ) -> Result<Self> {
        if offsets.is_empty() || offsets.len() != observations.len() {
            return Err(CalibError::InvalidArgument(format!(
                "{} knot times for {} observation slots",
                offsets.len(),
                observations.len()
            )));
        }
        if offsets[0] != 0.0 {
            return Err(CalibError::InvalidArgument(
                "knot offsets must start at 0".into(),
            ));
        }
        if offsets.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(CalibError::InvalidArgument(
                "knot offsets must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self {
            offsets,
            observations,
            prior,
        })
    }

    /// One knot per measurement, times re-zeroed at the first measurement.
    pub fn from_measurements(data: &MeasurementSet, prior: MotionPrior) -> Self {
        let t0 = data.measurements()[0].time;
        let offsets = data.times().map(|t| t - t0).collect();
        let observations = data
            .measurements()
            .iter()
            .map(|m| {
                Some(Observation {
                    position: m.position,
                    noise_cov: m.noise_cov,
                })
            })
            .collect();
        Self {
            offsets,
            observations,
            prior,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn observations(&self) -> &[Option<Observation>] {
        &self.observations
    }

    pub fn prior(&self) -> &MotionPrior {
        &self.prior
    }

    /// Prior mean at each knot, propagated from the initial state at the
    /// first knot.
    pub fn prior_means(&self) -> Vec<State> {
        let x0 = self.prior.initial_mean();
        self.offsets
            .iter()
            .map(|&t| transition_unchecked(t) * x0)
            .collect()
    }
}

/// A way of solving for the posterior mean at every knot.
pub trait TrajectorySolver: Named + Send + Sync {
    fn solve(&self, problem: &KnotProblem) -> Result<Vec<State>>;
}

/// Every solver shipped with the crate, keyed by name.
pub fn builtin_solvers() -> Registry<dyn TrajectorySolver> {
    let mut reg: Registry<dyn TrajectorySolver> = Registry::new("trajectory solver");
    reg.register(Box::new(BlockTridiagonal));
    reg.register(Box::new(RtsSmoother));
    reg
}

/// Lower-triangular `W` with `W m W^T = I`.
fn whitener(m: &Matrix3<f64>, block: usize, reason: &'static str) -> Result<Matrix3<f64>> {
    Cholesky::new(*m)
        .and_then(|c| c.l().solve_lower_triangular(&Matrix3::identity()))
        .ok_or(CalibError::NumericalFailure { block, reason })
}

/// Block-bidiagonal Cholesky factor of the information matrix
/// `P^-1 + C^T R^-1 C`, computed without forming it.
///
/// The whitened prior and measurement rows are triangularised knot by knot
/// with Householder reflections, then the factor is back-substituted. The
/// unknown is the deviation from the prior mean: the prior has no input, so
/// only the measurements contribute to the right-hand side.
#[derive(Debug, Clone, Copy, Default)]
pub struct BlockTridiagonal;

impl Named for BlockTridiagonal {
    fn name(&self) -> &'static str {
        "block-cholesky"
    }
}

impl TrajectorySolver for BlockTridiagonal {
    fn solve(&self, problem: &KnotProblem) -> Result<Vec<State>> {
        let n = problem.len();
        let prior_means = problem.prior_means();
        let qc_whitener = whitener(problem.prior.qc(), 0, "jerk spectral density is not positive definite")?;
        let initial = Cholesky::new(*problem.prior.initial_cov())
            .and_then(|c| c.l().solve_lower_triangular(&Block::identity()))
            .ok_or(CalibError::NumericalFailure {
                block: 0,
                reason: "initial covariance is not positive definite",
            })?;

        // (r, z): square-root information about knot k from everything
        // before it; `rows` holds the finished factor rows of each knot.
        let (mut r, mut z) = (initial, State::zeros());
        let mut rows: Vec<(Block, Block, State)> = Vec::with_capacity(n);
        for k in 0..n {
            if let Some(obs) = &problem.observations[k] {
                let w = whitener(&obs.noise_cov, k, "measurement noise covariance is not positive definite")?;
                let innovation = obs.position - prior_means[k].fixed_rows::<3>(0);
                let mut m = SMatrix::<f64, 12, 10>::zeros();
                m.fixed_view_mut::<9, 9>(0, 0).copy_from(&r);
                m.fixed_view_mut::<9, 1>(0, 9).copy_from(&z);
                m.fixed_view_mut::<3, 3>(9, 0).copy_from(&w);
                m.fixed_view_mut::<3, 1>(9, 9).copy_from(&(w * innovation));
                let t = m.qr().r();
                r = t.fixed_view::<9, 9>(0, 0).into_owned();
                z = t.fixed_view::<9, 1>(0, 9).into_owned();
            }
            if k + 1 == n {
                rows.push((r, Block::zeros(), z));
                break;
            }
            let dt = problem.offsets[k + 1] - problem.offsets[k];
            let w = process_noise_whitener(dt, &qc_whitener);
            let mut m = SMatrix::<f64, 18, 19>::zeros();
            m.fixed_view_mut::<9, 9>(0, 0).copy_from(&r);
            m.fixed_view_mut::<9, 1>(0, 18).copy_from(&z);
            m.fixed_view_mut::<9, 9>(9, 0).copy_from(&(-(w * transition_unchecked(dt))));
            m.fixed_view_mut::<9, 9>(9, 9).copy_from(&w);
            let t = m.qr().r();
            rows.push((
                t.fixed_view::<9, 9>(0, 0).into_owned(),
                t.fixed_view::<9, 9>(0, 9).into_owned(),
                t.fixed_view::<9, 1>(0, 18).into_owned(),
            ));
            r = t.fixed_view::<9, 9>(9, 9).into_owned();
            z = t.fixed_view::<9, 1>(9, 18).into_owned();
        }

        let mut x = vec![State::zeros(); n];
        for k in (0..n).rev() {
            let (diag, upper, rhs) = &rows[k];
            let b = if k + 1 < n { rhs - upper * x[k + 1] } else { *rhs };
            x[k] = diag.solve_upper_triangular(&b).ok_or(CalibError::NumericalFailure {
                block: k,
                reason: "singular diagonal factor",
            })?;
        }
        Ok(x.iter().zip(&prior_means).map(|(d, m)| m + d).collect())
    }
}

/// Forward Kalman filter plus backward fixed-interval smoothing pass over
/// the same prior.
#[derive(Debug, Clone, Copy, Default)]
pub struct RtsSmoother;

impl Named for RtsSmoother {
    fn name(&self) -> &'static str {
        "rts"
    }
}

impl TrajectorySolver for RtsSmoother {
    fn solve(&self, problem: &KnotProblem) -> Result<Vec<State>> {
        let n = problem.len();
        let prior_means = problem.prior_means();
        let qc = problem.prior.qc();

        let mut predicted: Vec<(State, Block)> = Vec::with_capacity(n);
        let mut filtered: Vec<(State, Block)> = Vec::with_capacity(n);
        for k in 0..n {
            let (x_pred, p_pred) = if k == 0 {
                (prior_means[0], *problem.prior.initial_cov())
            } else {
                let dt = problem.offsets[k] - problem.offsets[k - 1];
                let phi = transition_unchecked(dt);
                let (x, p) = &filtered[k - 1];
                let drift = prior_means[k] - phi * prior_means[k - 1];
                (
                    phi * x + drift,
                    phi * p * phi.transpose() + process_noise_unchecked(dt, qc),
                )
            };
            let (x, p) = match &problem.observations[k] {
                Some(obs) => {
                    let c = measurement_matrix();
                    let s = c * p_pred * c.transpose() + obs.noise_cov;
                    let s_chol = Cholesky::new(s).ok_or(CalibError::NumericalFailure {
                        block: k,
                        reason: "innovation covariance is not positive definite",
                    })?;
                    let gain = s_chol.solve(&(c * p_pred)).transpose();
                    let innovation = obs.position - x_pred.fixed_rows::<3>(0);
                    let x = x_pred + gain * innovation;
                    let i_kc = Block::identity() - gain * c;
                    let p = i_kc * p_pred * i_kc.transpose()
                        + gain * obs.noise_cov * gain.transpose();
                    (x, (p + p.transpose()) * 0.5)
                }
                None => (x_pred, p_pred),
            };
            predicted.push((x_pred, p_pred));
            filtered.push((x, p));
        }

        let mut smoothed = vec![State::zeros(); n];
        smoothed[n - 1] = filtered[n - 1].0;
        for k in (0..n - 1).rev() {
            let dt = problem.offsets[k + 1] - problem.offsets[k];
            let phi = transition_unchecked(dt);
            let (x_f, p_f) = &filtered[k];
            let (x_p, p_p) = &predicted[k + 1];
            let p_chol = Cholesky::new(*p_p).ok_or(CalibError::NumericalFailure {
                block: k + 1,
                reason: "predicted covariance is not positive definite",
            })?;
            // G = P_f Phi^T P_pred^-1, all covariances symmetric
            let gain = p_chol.solve(&(phi * p_f)).transpose();
            smoothed[k] = x_f + gain * (smoothed[k + 1] - x_p);
        }
        Ok(smoothed)
    }
}

fn measurement_matrix() -> SMatrix<f64, 3, 9> {
    let mut c = SMatrix::<f64, 3, 9>::zeros();
    c.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    c
}
