//! Closed forms of the constant-acceleration (white-noise-on-jerk) prior.
//!
//! States are stacked `[position; velocity; acceleration]`, each block 3
//! wide, so every 9x9 matrix here is a 3x3 scalar pattern Kronecker a 3x3
//! block.

use nalgebra::{Matrix3, SMatrix, SVector};

use crate::error::{CalibError, Result};
use crate::gp::MotionPrior;

pub type State = SVector<f64, 9>;
pub type Block = SMatrix<f64, 9, 9>;

/// Expands a 3x3 scalar pattern into a 9x9 matrix whose (i, j) block is
/// `coeffs[i][j] * m`.
pub(crate) fn kron(coeffs: &[[f64; 3]; 3], m: &Matrix3<f64>) -> Block {
    let mut out = Block::zeros();
    for (i, row) in coeffs.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c != 0.0 {
                out.fixed_view_mut::<3, 3>(3 * i, 3 * j).copy_from(&(m * c));
            }
        }
    }
    out
}

pub(crate) fn transition_unchecked(dt: f64) -> Block {
    kron(
        &[[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 1.0]],
        &Matrix3::identity(),
    )
}

/// State-transition matrix over an interval of `dt` seconds.
pub fn transition(dt: f64) -> Result<Block> {
    if !dt.is_finite() || dt < 0.0 {
        return Err(CalibError::InvalidArgument(format!(
            "transition interval must be finite and non-negative, got {dt}"
        )));
    }
    Ok(transition_unchecked(dt))
}

fn noise_pattern(dt: f64) -> [[f64; 3]; 3] {
    let dt2 = dt * dt;
    let dt3 = dt2 * dt;
    let dt4 = dt3 * dt;
    let dt5 = dt4 * dt;
    [
        [dt5 / 20.0, dt4 / 8.0, dt3 / 6.0],
        [dt4 / 8.0, dt3 / 3.0, dt2 / 2.0],
        [dt3 / 6.0, dt2 / 2.0, dt],
    ]
}

/// Zero at `dt == 0`, which the interpolator relies on at knot times.
pub(crate) fn process_noise_unchecked(dt: f64, qc: &Matrix3<f64>) -> Block {
    kron(&noise_pattern(dt), qc)
}

/// Process-noise covariance accumulated by white jerk noise of spectral
/// density `qc` over `dt` seconds.
pub fn process_noise(dt: f64, qc: &Matrix3<f64>) -> Result<Block> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(CalibError::InvalidArgument(format!(
            "process noise interval must be finite and positive, got {dt}"
        )));
    }
    Ok(process_noise_unchecked(dt, qc))
}

/// Exact inverse of [`process_noise`], given the inverse spectral density.
///
/// The scalar pattern inverts in closed form, so no factorisation of the
/// badly scaled `dt^5 .. dt` matrix is needed.
pub fn process_noise_inverse(dt: f64, qc_inv: &Matrix3<f64>) -> Block {
    let i1 = 1.0 / dt;
    let i2 = i1 * i1;
    let i3 = i2 * i1;
    let i4 = i3 * i1;
    let i5 = i4 * i1;
    kron(
        &[
            [720.0 * i5, -360.0 * i4, 60.0 * i3],
            [-360.0 * i4, 192.0 * i3, -36.0 * i2],
            [60.0 * i3, -36.0 * i2, 9.0 * i1],
        ],
        qc_inv,
    )
}

/// Whitening factor `W` with `W Q W^T = I` for the process noise over `dt`,
/// given `qc_whitener` with `qc_whitener qc qc_whitener^T = I`.
///
/// `Q = S M S (x) qc` with `S = diag(dt^2.5, dt^1.5, dt^0.5)` and a constant
/// pattern `M`, so only the well-conditioned `M` is ever factored.
pub(crate) fn process_noise_whitener(dt: f64, qc_whitener: &Matrix3<f64>) -> Block {
    let pattern = Matrix3::new(
        1.0 / 20.0, 1.0 / 8.0, 1.0 / 6.0,
        1.0 / 8.0, 1.0 / 3.0, 1.0 / 2.0,
        1.0 / 6.0, 1.0 / 2.0, 1.0,
    );
    let l = pattern.cholesky().expect("constant pattern is positive definite").l();
    let l_inv = l.solve_lower_triangular(&Matrix3::identity()).expect("nonsingular factor");
    let root = dt.sqrt();
    let scale = [1.0 / (dt * dt * root), 1.0 / (dt * root), 1.0 / root];
    let coeffs: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| l_inv[(i, j)] * scale[j]));
    kron(&coeffs, qc_whitener)
}

/// Prior mean at `t` propagated from the initial state at `t0`.
///
/// The prior carries no control input, so this is the free response
/// `transition(t - t0) * initial_mean`.
pub fn prior_mean_at(prior: &MotionPrior, t0: f64, t: f64) -> Result<State> {
    if !(t >= t0) {
        return Err(CalibError::InvalidArgument(format!(
            "prior mean queried at {t} s before its origin {t0} s"
        )));
    }
    Ok(transition(t - t0)? * prior.initial_mean())
}
