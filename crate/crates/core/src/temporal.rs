//! Time-delay estimation by aligning velocity-magnitude profiles.
//!
//! The anchor trajectory is sampled at its own knots; the other trajectory
//! is interpolated at the anchor knot times shifted by the candidate delay,
//! so that `other_time = anchor_time + delay`. Speeds are invariant under
//! rigid frame changes, so no extrinsic guess is needed.

use crate::error::{CalibError, Result};
use crate::gp::{GpTrajectory, TrajectoryState};

/// Minimum number of overlapping anchor knots for a residual evaluation.
pub const MIN_OVERLAP: usize = 10;
/// Minimum number of correspondences handed to registration.
pub const MIN_CORRESPONDENCES: usize = 3;
/// Speeds below this (m/s) contribute a zero Jacobian entry.
pub const SPEED_EPSILON: f64 = 1e-6;
/// Mean absolute Jacobian (m/s^2) below which the delay is reported
/// unobservable.
pub const OBSERVABILITY_THRESHOLD: f64 = 1e-3;

const FLAT_COST_RTOL: f64 = 1e-9;
const FLAT_COST_ATOL_PER_KNOT: f64 = 1e-14;
const POLISH_STEPS: usize = 10;
const POLISH_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayConfig {
    /// Centre of the coarse search, seconds.
    pub initial_delay: f64,
    pub coarse_search_halfwidth: f64,
    pub coarse_search_step: f64,
    pub max_iterations: usize,
    /// Relative cost decrease below which the optimiser stops.
    pub cost_tolerance: f64,
    /// Step size (seconds) below which the optimiser stops.
    pub parameter_tolerance: f64,
    pub lm_initial_damping: f64,
}

impl Default for DelayConfig {
    fn default() -> Self {
        Self {
            initial_delay: 0.0,
            coarse_search_halfwidth: 1.0,
            coarse_search_step: 0.05,
            max_iterations: 100,
            cost_tolerance: 1e-10,
            parameter_tolerance: 1e-7,
            lm_initial_damping: 1e-4,
        }
    }
}

impl DelayConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("coarse_search_halfwidth", self.coarse_search_halfwidth),
            ("coarse_search_step", self.coarse_search_step),
            ("cost_tolerance", self.cost_tolerance),
            ("parameter_tolerance", self.parameter_tolerance),
            ("lm_initial_damping", self.lm_initial_damping),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(CalibError::InvalidArgument(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if !self.initial_delay.is_finite() {
            return Err(CalibError::InvalidArgument("initial_delay must be finite".into()));
        }
        if self.max_iterations == 0 {
            return Err(CalibError::InvalidArgument("max_iterations must be positive".into()));
        }
        if self.coarse_search_step >= self.coarse_search_halfwidth {
            return Err(CalibError::InvalidArgument(format!(
                "coarse_search_step ({}) must be smaller than coarse_search_halfwidth ({})",
                self.coarse_search_step, self.coarse_search_halfwidth
            )));
        }
        Ok(())
    }

    /// Grid `initial_delay + k * step` covering `+-halfwidth`.
    pub fn coarse_grid(&self) -> Vec<f64> {
        let half_steps = (self.coarse_search_halfwidth / self.coarse_search_step + 1e-9).floor() as i64;
        (-half_steps..=half_steps)
            .map(|k| self.initial_delay + k as f64 * self.coarse_search_step)
            .collect()
    }
}

/// Result of [`estimate_delay`]. `delay` follows `other_time = anchor_time + delay`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayEstimate {
    pub delay: f64,
    /// Sum of squared speed residuals, m^2/s^2.
    pub final_cost: f64,
    /// m/s
    pub rms_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Mean absolute residual Jacobian at the estimate, m/s^2.
    pub observability: f64,
    pub n_correspondences: usize,
    /// Anchor knots whose shifted time fell outside the other trajectory.
    pub excluded_knots: usize,
    /// Starting point handed to the optimiser by the coarse search.
    pub coarse_delay: f64,
    /// The coarse cost profile showed no variation at all.
    pub flat_cost: bool,
}

impl DelayEstimate {
    pub fn is_observable(&self) -> bool {
        !self.flat_cost && self.observability >= OBSERVABILITY_THRESHOLD
    }
}

/// Anchor knot state paired with the other trajectory interpolated at the
/// shifted time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrespondencePair {
    pub anchor_state: TrajectoryState,
    pub other_state: TrajectoryState,
}

pub fn velocity_magnitude(state: &TrajectoryState) -> f64 {
    state.velocity.norm()
}

/// `d ||v(tau)|| / d tau`, zero for near-stationary states.
fn speed_rate(state: &TrajectoryState) -> f64 {
    let speed = velocity_magnitude(state);
    if speed < SPEED_EPSILON {
        0.0
    } else {
        state.velocity.dot(&state.acceleration) / speed
    }
}

/// Speed residuals at one candidate delay.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayResiduals {
    /// `||v_anchor(t_i)|| - ||v_other(t_i + delay)||` per included knot, m/s.
    pub residuals: Vec<f64>,
    /// Anchor knot index of each residual.
    pub included: Vec<usize>,
    pub excluded: usize,
}

impl DelayResiduals {
    pub fn cost(&self) -> f64 {
        self.residuals.iter().map(|r| r * r).sum()
    }

    pub fn rms(&self) -> f64 {
        (self.cost() / self.residuals.len() as f64).sqrt()
    }
}

struct Evaluation {
    residuals: DelayResiduals,
    jacobian: Vec<f64>,
}

/// Anchor knot times expressed on the other trajectory's offset axis.
struct Alignment<'a> {
    other: &'a GpTrajectory,
    /// anchor knot offset + (anchor origin - other origin)
    base: Vec<f64>,
    anchor_speeds: Vec<f64>,
}

impl<'a> Alignment<'a> {
    fn new(anchor: &GpTrajectory, other: &'a GpTrajectory) -> Self {
        let shift = anchor.origin() - other.origin();
        Self {
            other,
            base: anchor.offsets().iter().map(|o| o + shift).collect(),
            anchor_speeds: anchor
                .posterior_stacked()
                .iter()
                .map(|x| x.fixed_rows::<3>(3).norm())
                .collect(),
        }
    }

    fn included(&self, delay: f64) -> impl Iterator<Item = (usize, f64)> + '_ {
        let last = *self.other.offsets().last().expect("trajectory has knots");
        self.base
            .iter()
            .enumerate()
            .map(move |(i, b)| (i, b + delay))
            .filter(move |&(_, q)| q >= 0.0 && q <= last)
    }

    fn evaluate(&self, delay: f64, with_jacobian: bool) -> Result<Evaluation> {
        let mut residuals = Vec::with_capacity(self.base.len());
        let mut included = Vec::with_capacity(self.base.len());
        let mut jacobian = Vec::new();
        for (i, q) in self.included(delay) {
            let state = self.other.interpolate_offset(q)?;
            residuals.push(self.anchor_speeds[i] - velocity_magnitude(&state));
            included.push(i);
            if with_jacobian {
                jacobian.push(-speed_rate(&state));
            }
        }
        if included.len() < MIN_OVERLAP {
            return Err(CalibError::InsufficientOverlap {
                found: included.len(),
                required: MIN_OVERLAP,
            });
        }
        let excluded = self.base.len() - included.len();
        Ok(Evaluation {
            residuals: DelayResiduals {
                residuals,
                included,
                excluded,
            },
            jacobian,
        })
    }
}

pub fn delay_residuals(
    anchor: &GpTrajectory,
    other: &GpTrajectory,
    delay: f64,
) -> Result<DelayResiduals> {
    Ok(Alignment::new(anchor, other).evaluate(delay, false)?.residuals)
}

/// Derivative of each residual with respect to the delay,
/// `-(v . a) / ||v||` of the other trajectory at `anchor_time + delay`.
///
/// Uses the same inclusion rule as [`delay_residuals`]: times whose shifted
/// value leaves the other trajectory's support are skipped.
pub fn delay_jacobian(other: &GpTrajectory, anchor_times: &[f64], delay: f64) -> Result<Vec<f64>> {
    let last = *other.offsets().last().expect("trajectory has knots");
    let mut out = Vec::with_capacity(anchor_times.len());
    for &t in anchor_times {
        let q = (t - other.origin()) + delay;
        if q >= 0.0 && q <= last {
            out.push(-speed_rate(&other.interpolate_offset(q)?));
        }
    }
    if out.len() < MIN_OVERLAP {
        return Err(CalibError::InsufficientOverlap {
            found: out.len(),
            required: MIN_OVERLAP,
        });
    }
    Ok(out)
}

/// Summed squared speed residual at `delay`.
pub fn temporal_cost(anchor: &GpTrajectory, other: &GpTrajectory, delay: f64) -> Result<f64> {
    Ok(delay_residuals(anchor, other, delay)?.cost())
}

/// One sample of the temporal cost profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSample {
    pub delay: f64,
    pub cost: f64,
    pub n_included: usize,
}

/// Temporal cost at every delay of `grid`.
pub fn cost_curve(anchor: &GpTrajectory, other: &GpTrajectory, grid: &[f64]) -> Result<Vec<CostSample>> {
    let alignment = Alignment::new(anchor, other);
    grid.iter()
        .map(|&delay| {
            let r = alignment.evaluate(delay, false)?.residuals;
            Ok(CostSample {
                delay,
                cost: r.cost(),
                n_included: r.included.len(),
            })
        })
        .collect()
}

/// Evenly spaced grid from `min` to `max` inclusive.
pub fn delay_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(min.is_finite() && max.is_finite() && step.is_finite()) || !(step > 0.0) || max < min {
        return Err(CalibError::InvalidArgument(format!(
            "delay grid needs finite min <= max and positive step, got [{min}, {max}] step {step}"
        )));
    }
    let count = ((max - min) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|k| min + k as f64 * step).collect())
}

/// Result of the exhaustive coarse search.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseSearch {
    pub delay: f64,
    pub samples: Vec<CostSample>,
    /// No measurable cost variation across the grid; `delay` is then the
    /// configured initial delay.
    pub flat: bool,
}

pub fn coarse_delay_search(
    anchor: &GpTrajectory,
    other: &GpTrajectory,
    cfg: &DelayConfig,
) -> Result<CoarseSearch> {
    cfg.validate()?;
    let samples = cost_curve(anchor, other, &cfg.coarse_grid())?;
    let (mut best, mut lo, mut hi) = (samples[0], f64::INFINITY, f64::NEG_INFINITY);
    for s in &samples {
        if s.cost < best.cost {
            best = *s;
        }
        lo = lo.min(s.cost);
        hi = hi.max(s.cost);
    }
    let flat = hi - lo <= FLAT_COST_RTOL * hi + FLAT_COST_ATOL_PER_KNOT * anchor.len() as f64;
    Ok(CoarseSearch {
        delay: if flat { cfg.initial_delay } else { best.delay },
        samples,
        flat,
    })
}

/// Gradient `sum J r` and Gauss-Newton curvature `sum J^2`.
fn normal_terms(eval: &Evaluation) -> (f64, f64) {
    eval.jacobian
        .iter()
        .zip(&eval.residuals.residuals)
        .fold((0.0, 0.0), |(g, h), (j, r)| (g + j * r, h + j * j))
}

/// Coarse grid search followed by Levenberg-Marquardt on the scalar delay.
///
/// The inclusion set is recomputed at every evaluation. Failing to
/// converge is reported through `converged`, not as an error.
pub fn estimate_delay(
    anchor: &GpTrajectory,
    other: &GpTrajectory,
    cfg: &DelayConfig,
) -> Result<DelayEstimate> {
    let coarse = coarse_delay_search(anchor, other, cfg)?;
    let alignment = Alignment::new(anchor, other);

    let mut delay = coarse.delay;
    let mut current = alignment.evaluate(delay, true)?;
    let mut cost = current.residuals.cost();
    let mut damping = cfg.lm_initial_damping;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let (gradient, hessian) = normal_terms(&current);
        if gradient == 0.0 || hessian <= 0.0 {
            converged = true;
            break;
        }
        let step = -gradient / (hessian * (1.0 + damping));
        let candidate = delay + step;
        match alignment.evaluate(candidate, true) {
            Ok(next) if next.residuals.cost() <= cost => {
                let next_cost = next.residuals.cost();
                let relative_drop = if cost > 0.0 { (cost - next_cost) / cost } else { 0.0 };
                delay = candidate;
                cost = next_cost;
                current = next;
                damping = (damping / 10.0).max(1e-15);
                if step.abs() < cfg.parameter_tolerance || relative_drop < cfg.cost_tolerance {
                    converged = true;
                    break;
                }
            }
            Ok(_) | Err(CalibError::InsufficientOverlap { .. }) => {
                damping *= 10.0;
                if step.abs() < cfg.parameter_tolerance {
                    converged = true;
                    break;
                }
            }
            Err(e) => return Err(e),
        }
    }

    // Undamped polish inside the tolerance band, so the estimate does not
    // depend on where within it the damped iteration happened to stop.
    if converged {
        for _ in 0..POLISH_STEPS {
            let (gradient, hessian) = normal_terms(&current);
            if hessian <= 0.0 {
                break;
            }
            let step = -gradient / hessian;
            if !(step.abs() < cfg.parameter_tolerance) {
                break;
            }
            match alignment.evaluate(delay + step, true) {
                Ok(next) => {
                    delay += step;
                    cost = next.residuals.cost();
                    current = next;
                }
                Err(CalibError::InsufficientOverlap { .. }) => break,
                Err(e) => return Err(e),
            }
            if step.abs() < POLISH_TOLERANCE {
                break;
            }
        }
    }

    let observability = current.jacobian.iter().map(|j| j.abs()).sum::<f64>() / current.jacobian.len() as f64;
    Ok(DelayEstimate {
        delay,
        final_cost: cost,
        rms_residual: current.residuals.rms(),
        iterations,
        converged,
        observability,
        n_correspondences: current.residuals.included.len(),
        excluded_knots: current.residuals.excluded,
        coarse_delay: coarse.delay,
        flat_cost: coarse.flat,
    })
}

/// Pairs every anchor knot with the other trajectory at `anchor_time + delay`.
pub fn build_correspondences(
    anchor: &GpTrajectory,
    other: &GpTrajectory,
    delay: f64,
) -> Result<Vec<CorrespondencePair>> {
    if !delay.is_finite() {
        return Err(CalibError::InvalidArgument(format!("delay must be finite, got {delay}")));
    }
    let alignment = Alignment::new(anchor, other);
    let pairs = alignment
        .included(delay)
        .map(|(i, q)| {
            Ok(CorrespondencePair {
                anchor_state: anchor.knot(i),
                other_state: other.interpolate_offset(q)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if pairs.len() < MIN_CORRESPONDENCES {
        return Err(CalibError::InsufficientCorrespondences {
            found: pairs.len(),
            required: MIN_CORRESPONDENCES,
        });
    }
    Ok(pairs)
}
