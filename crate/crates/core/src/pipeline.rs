//! End-to-end calibration of a sensor pair.
//!
//! Reported delays follow `t_sensor1 = t_sensor2 + delay`, whichever sensor
//! is the anchor, and the reported transform maps sensor-2 coordinates into
//! the sensor-1 frame.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{CalibError, Result};
use crate::gp::{builtin_solvers, regress_with, GpTrajectory, MeasurementSet, MotionPrior, PriorSettings, DEFAULT_SOLVER};
use crate::registration::{builtin_registrations, refine, register_with, RegistrationResult, DEFAULT_REGISTRATION};
use crate::temporal::{build_correspondences, cost_curve, estimate_delay, CostSample, DelayConfig, DelayEstimate};

/// Relative tolerance under which two mean sample intervals count as equal.
const ANCHOR_TIE_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Anchor {
    /// The sensor with the longer mean sample interval; sensor 1 on a tie.
    #[default]
    Auto,
    Sensor1,
    Sensor2,
}

impl Anchor {
    pub fn resolve(self, sensor1: &MeasurementSet, sensor2: &MeasurementSet) -> Sensor {
        match self {
            Anchor::Sensor1 => Sensor::One,
            Anchor::Sensor2 => Sensor::Two,
            Anchor::Auto => {
                let (i1, i2) = (sensor1.mean_sample_interval(), sensor2.mean_sample_interval());
                if i2 > i1 * (1.0 + ANCHOR_TIE_RTOL) {
                    Sensor::Two
                } else {
                    Sensor::One
                }
            }
        }
    }
}

impl FromStr for Anchor {
    type Err = CalibError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Anchor::Auto),
            "sensor1" => Ok(Anchor::Sensor1),
            "sensor2" => Ok(Anchor::Sensor2),
            other => Err(CalibError::InvalidArgument(format!(
                "anchor must be auto, sensor1 or sensor2, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Anchor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Anchor::Auto => "auto",
            Anchor::Sensor1 => "sensor1",
            Anchor::Sensor2 => "sensor2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sensor {
    One,
    Two,
}

impl Sensor {
    /// Factor taking the reported delay to `other_time - anchor_time`.
    fn delay_sign(self) -> f64 {
        match self {
            Sensor::One => -1.0,
            Sensor::Two => 1.0,
        }
    }
}

impl fmt::Display for Sensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sensor::One => "sensor1",
            Sensor::Two => "sensor2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub anchor: Anchor,
    pub prior: PriorSettings,
    /// `initial_delay` uses the reported sign convention.
    pub delay: DelayConfig,
    pub solver: String,
    pub registration: String,
    /// Polish the closed-form transform with iterative refinement.
    pub refine: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            anchor: Anchor::Auto,
            prior: PriorSettings::default(),
            delay: DelayConfig::default(),
            solver: DEFAULT_SOLVER.to_string(),
            registration: DEFAULT_REGISTRATION.to_string(),
            refine: false,
        }
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Timings {
    pub regression: f64,
    pub delay: f64,
    pub registration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    NotConverged,
    Unobservable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub anchor: Sensor,
    /// `delay` and `coarse_delay` in the reported convention.
    pub delay: DelayEstimate,
    /// Error message when registration was impossible.
    pub extrinsic: std::result::Result<RegistrationResult, String>,
    pub timings: Timings,
}

impl Calibration {
    pub fn status(&self) -> Status {
        if !self.delay.is_observable() {
            Status::Unobservable
        } else if !self.delay.converged {
            Status::NotConverged
        } else {
            Status::Converged
        }
    }
}

/// Regresses both tracks, concurrently.
pub fn regress_pair(
    sensor1: &MeasurementSet,
    sensor2: &MeasurementSet,
    cfg: &PipelineConfig,
) -> Result<(GpTrajectory, GpTrajectory)> {
    let solvers = builtin_solvers();
    let solver = solvers.get(&cfg.solver)?;
    let fit = |data: &MeasurementSet| {
        let prior = MotionPrior::from_measurements(data, &cfg.prior)?;
        regress_with(data, &prior, solver)
    };
    let (a, b) = rayon::join(|| fit(sensor1), || fit(sensor2));
    Ok((a?, b?))
}

fn ordered<'a>(anchor: Sensor, t1: &'a GpTrajectory, t2: &'a GpTrajectory) -> (&'a GpTrajectory, &'a GpTrajectory) {
    match anchor {
        Sensor::One => (t1, t2),
        Sensor::Two => (t2, t1),
    }
}

/// Full calibration: regression, delay estimation, registration.
///
/// Insufficient overlap is an error; an unobservable or non-converged delay
/// and degenerate registration geometry are reported in the result.
pub fn calibrate(sensor1: &MeasurementSet, sensor2: &MeasurementSet, cfg: &PipelineConfig) -> Result<Calibration> {
    let registrations = builtin_registrations();
    let method = registrations.get(&cfg.registration)?;
    cfg.delay.validate()?;

    let clock = Instant::now();
    let (t1, t2) = regress_pair(sensor1, sensor2, cfg)?;
    let regression = clock.elapsed().as_secs_f64();

    let anchor = cfg.anchor.resolve(sensor1, sensor2);
    let sign = anchor.delay_sign();
    let (a, o) = ordered(anchor, &t1, &t2);

    let clock = Instant::now();
    let internal_cfg = DelayConfig {
        initial_delay: sign * cfg.delay.initial_delay,
        ..cfg.delay
    };
    let mut delay = estimate_delay(a, o, &internal_cfg)?;
    let delay_time = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let extrinsic = build_correspondences(a, o, delay.delay)
        .and_then(|pairs| {
            let closed = register_with(&pairs, method)?;
            if cfg.refine {
                refine(&pairs, &closed.transform)
            } else {
                Ok(closed)
            }
        })
        .map(|r| match anchor {
            Sensor::One => r,
            Sensor::Two => {
                let transform = r.transform.inverse();
                RegistrationResult {
                    transform,
                    euler_zyx: transform.euler_zyx_deg(),
                    ..r
                }
            }
        })
        .map_err(|e| e.to_string());
    let registration = clock.elapsed().as_secs_f64();

    delay.delay *= sign;
    delay.coarse_delay *= sign;
    Ok(Calibration {
        anchor,
        delay,
        extrinsic,
        timings: Timings {
            regression,
            delay: delay_time,
            registration,
        },
    })
}

/// Temporal cost over `grid`, with delays in the reported convention.
pub fn delay_cost_curve(
    sensor1: &MeasurementSet,
    sensor2: &MeasurementSet,
    grid: &[f64],
    cfg: &PipelineConfig,
) -> Result<Vec<CostSample>> {
    let (t1, t2) = regress_pair(sensor1, sensor2, cfg)?;
    let anchor = cfg.anchor.resolve(sensor1, sensor2);
    let sign = anchor.delay_sign();
    let (a, o) = ordered(anchor, &t1, &t2);
    let internal: Vec<f64> = grid.iter().map(|d| sign * d).collect();
    Ok(cost_curve(a, o, &internal)?
        .into_iter()
        .map(|s| CostSample {
            delay: sign * s.delay,
            ..s
        })
        .collect())
}
