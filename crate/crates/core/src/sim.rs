//! Synthetic two-sensor datasets and Monte Carlo evaluation.
//!
//! Trajectories are per-axis sums of sinusoids in the sensor-1 (global)
//! frame. Sensor 1 samples at `k * t_m`. Sensor 2 samples global time
//! `t_s + t_m / 2 + k * t_m` (counter-phase) but stamps from its own zero,
//! and reports positions in its own frame.
//!
//! Randomness: every stream is a ChaCha8 generator seeded by a splitmix64
//! mix of `(trajectory_seed, stream)`; Monte Carlo run `i` uses
//! `trajectory_seed = mix(seed, i)`. Results do not depend on thread count.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{CalibError, Result};
use crate::gp::{Measurement, MeasurementSet};
use crate::pipeline::{calibrate, Calibration, PipelineConfig};
use crate::registration::RigidTransform;

/// Standard deviation (m) attached to noiseless samples so the measurement
/// covariance stays positive definite.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// m/s
pub const MAX_SPEED: f64 = 3.0;
/// Smallest accepted standard deviation of the speed, m/s.
pub const MIN_SPEED_SPREAD: f64 = 0.05;
pub const MAX_DRAWS: usize = 64;
const SPEED_CHECK_STEP: f64 = 0.002;
const MIN_PERIOD: f64 = 2.0;
const MAX_PERIOD: f64 = 15.0;
const MIN_AMPLITUDE: f64 = 0.2;
const MAX_AMPLITUDE: f64 = 1.0;

const STREAM_TRAJECTORY: u64 = 1;
const STREAM_NOISE1: u64 = 2;
const STREAM_NOISE2: u64 = 3;

/// splitmix64 finaliser applied to `seed ^ golden * (stream + 1)`.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub duration: f64,
    pub sample_interval: f64,
    pub sensor2_start_offset: f64,
    pub counter_phase: bool,
    pub noise_sigma: f64,
    /// Maps sensor-2 coordinates into the sensor-1 frame.
    pub ground_truth_transform: RigidTransform,
    pub trajectory_seed: u64,
    pub n_runs: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration: 60.0,
            sample_interval: 0.05,
            sensor2_start_offset: 0.1,
            counter_phase: true,
            noise_sigma: 0.01,
            ground_truth_transform: RigidTransform::from_euler_zyx_deg(
                Vector3::new(45.0, 20.0, 0.0),
                Vector3::new(1.0, -1.0, 1.0),
            ),
            trajectory_seed: 1,
            n_runs: 500,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.duration, self.sample_interval, self.sensor2_start_offset, self.noise_sigma];
        if !finite.iter().all(|v| v.is_finite()) {
            return Err(CalibError::InvalidArgument("simulation parameters must be finite".into()));
        }
        if !(self.sample_interval > 0.0) {
            return Err(CalibError::InvalidArgument(format!(
                "sample interval must be positive, got {}",
                self.sample_interval
            )));
        }
        if !(self.duration > 10.0 * self.sample_interval) {
            return Err(CalibError::InvalidArgument(format!(
                "duration {} must exceed ten sample intervals ({})",
                self.duration,
                10.0 * self.sample_interval
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(CalibError::InvalidArgument("noise sigma must be non-negative".into()));
        }
        if self.sensor2_start_offset < 0.0 || self.true_delay() >= self.duration / 2.0 {
            return Err(CalibError::InvalidArgument(format!(
                "sensor-2 start offset must be non-negative and leave overlap, got {}",
                self.sensor2_start_offset
            )));
        }
        if self.n_runs == 0 {
            return Err(CalibError::InvalidArgument("number of runs must be positive".into()));
        }
        Ok(())
    }

    /// `t_s + t_m / 2` with counter-phase sampling, `t_s` otherwise.
    pub fn true_delay(&self) -> f64 {
        self.sensor2_start_offset + if self.counter_phase { self.sample_interval / 2.0 } else { 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

impl Sinusoid {
    fn omega(&self) -> f64 {
        std::f64::consts::TAU / self.period
    }
}

/// Smooth analytic trajectory `p(t) = sum A sin(w t + phi)` per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidTrajectory {
    pub axes: [Vec<Sinusoid>; 3],
}

impl SinusoidTrajectory {
    fn eval(&self, t: f64, order: u32) -> Vector3<f64> {
        Vector3::from_fn(|axis, _| {
            self.axes[axis]
                .iter()
                .map(|s| {
                    let w = s.omega();
                    let arg = w * t + s.phase;
                    let (value, sign) = match order % 4 {
                        0 => (arg.sin(), 1.0),
                        1 => (arg.cos(), 1.0),
                        2 => (arg.sin(), -1.0),
                        _ => (arg.cos(), -1.0),
                    };
                    sign * s.amplitude * w.powi(order as i32) * value
                })
                .sum()
        })
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        self.eval(t, 0)
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        self.eval(t, 1)
    }

    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        self.eval(t, 2)
    }

    /// Speed sampled every [`SPEED_CHECK_STEP`] over `[0, duration]`.
    pub fn speed_stats(&self, duration: f64) -> SpeedStats {
        let n = (duration / SPEED_CHECK_STEP).ceil() as usize + 1;
        let speeds: Vec<f64> = (0..n)
            .map(|k| self.velocity((k as f64 * SPEED_CHECK_STEP).min(duration)).norm())
            .collect();
        let summary = Summary::of(&speeds).expect("at least one sample");
        // |d|v|/dt| <= |a|, and |a| is bounded per axis by sum A w^2
        let accel_bound = Vector3::from_fn(|axis, _| {
            self.axes[axis].iter().map(|s| s.amplitude * s.omega().powi(2)).sum::<f64>()
        })
        .norm();
        SpeedStats {
            max: summary.max,
            bound: summary.max + accel_bound * SPEED_CHECK_STEP / 2.0,
            std_dev: summary.std_dev,
        }
    }

    /// Same terms with every amplitude set to zero: a stationary target.
    pub fn zero_amplitude(mut self) -> Self {
        for s in self.axes.iter_mut().flatten() {
            s.amplitude = 0.0;
        }
        self
    }
}

/// Seeded trajectory: 3 to 6 sinusoids per axis with amplitudes uniform in
/// 0.2 to 1.0 m, periods uniform in 2 to 15 s and uniform phases.
///
/// Draws whose speed could exceed [`MAX_SPEED`] on `[0, duration]`, or whose
/// speed standard deviation is below [`MIN_SPEED_SPREAD`], are redrawn. If
/// [`MAX_DRAWS`] draws fail, a draw is built whose per-axis speed bound holds
/// analytically.
pub fn generate_trajectory(seed: u64, duration: f64) -> SinusoidTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_TRAJECTORY));
    for _ in 0..MAX_DRAWS {
        let axes = std::array::from_fn(|_| {
            let n = rng.gen_range(3..=6);
            (0..n)
                .map(|_| Sinusoid {
                    amplitude: rng.gen_range(MIN_AMPLITUDE..=MAX_AMPLITUDE),
                    period: rng.gen_range(MIN_PERIOD..=MAX_PERIOD),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                })
                .collect()
        });
        let traj = SinusoidTrajectory { axes };
        let stats = traj.speed_stats(duration);
        if stats.bound <= MAX_SPEED && stats.std_dev >= MIN_SPEED_SPREAD {
            return traj;
        }
    }
    budgeted_trajectory(&mut rng)
}

/// Each term receives an equal share of a per-axis budget on
/// `sum A * 2 pi / T`, which caps its amplitude and sets its shortest period.
fn budgeted_trajectory(rng: &mut ChaCha8Rng) -> SinusoidTrajectory {
    let axis_budget = MAX_SPEED / 3f64.sqrt();
    let axes = std::array::from_fn(|_| {
        let n = rng.gen_range(3..=6);
        let share = axis_budget / n as f64;
        (0..n)
            .map(|_| {
                let amp_cap = MAX_AMPLITUDE.min(share * MAX_PERIOD / std::f64::consts::TAU);
                let amplitude = rng.gen_range(MIN_AMPLITUDE..=amp_cap);
                let min_period = (std::f64::consts::TAU * amplitude / share).max(MIN_PERIOD);
                Sinusoid {
                    amplitude,
                    period: rng.gen_range(min_period..=MAX_PERIOD),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect()
    });
    SinusoidTrajectory { axes }
}

/// Speed statistics of a trajectory over a time span.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedStats {
    /// Largest sampled speed, m/s.
    pub max: f64,
    /// Upper bound on the speed between samples, m/s.
    pub bound: f64,
    pub std_dev: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub sensor1: MeasurementSet,
    pub sensor2: MeasurementSet,
    /// `t_sensor1 = t_sensor2 + true_delay` for simultaneous samples.
    pub true_delay: f64,
    pub true_transform: RigidTransform,
}

fn noisy(rng: &mut ChaCha8Rng, normal: &Option<Normal<f64>>, p: Vector3<f64>) -> Vector3<f64> {
    match normal {
        Some(n) => p + Vector3::from_fn(|_, _| n.sample(rng)),
        None => p,
    }
}

pub fn sample_sensors(traj: &SinusoidTrajectory, cfg: &SimConfig) -> Result<SimDataset> {
    cfg.validate()?;
    let t_m = cfg.sample_interval;
    let delay = cfg.true_delay();
    let normal = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("valid sigma"));
    let sigma = cfg.noise_sigma.max(SIGMA_FLOOR);
    let to_sensor2 = cfg.ground_truth_transform.inverse();

    let n1 = (cfg.duration / t_m + 1e-9).floor() as usize + 1;
    let n2 = ((cfg.duration - delay) / t_m + 1e-9).floor() as usize + 1;
    let mut rng1 = ChaCha8Rng::seed_from_u64(mix_seed(cfg.trajectory_seed, STREAM_NOISE1));
    let mut rng2 = ChaCha8Rng::seed_from_u64(mix_seed(cfg.trajectory_seed, STREAM_NOISE2));

    let s1 = (0..n1)
        .map(|k| {
            let t = k as f64 * t_m;
            Measurement::isotropic(t, noisy(&mut rng1, &normal, traj.position(t)), sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    let s2 = (0..n2)
        .map(|k| {
            let local = k as f64 * t_m;
            let p = to_sensor2.apply(&traj.position(local + delay));
            Measurement::isotropic(local, noisy(&mut rng2, &normal, p), sigma)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SimDataset {
        sensor1: MeasurementSet::new("sensor1", s1)?,
        sensor2: MeasurementSet::new("sensor2", s2)?,
        true_delay: delay,
        true_transform: cfg.ground_truth_transform,
    })
}

/// Dataset for `cfg.trajectory_seed`.
pub fn simulate(cfg: &SimConfig) -> Result<SimDataset> {
    let traj = generate_trajectory(cfg.trajectory_seed, cfg.duration);
    sample_sensors(&traj, cfg)
}

/// Outcome of one Monte Carlo run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run: usize,
    pub trajectory_seed: u64,
    /// Estimated minus true delay, seconds.
    pub delay_error: Option<f64>,
    /// Largest absolute Euler angle difference, degrees.
    pub euler_error_deg: Option<f64>,
    /// Norm of the translation difference, metres.
    pub translation_error_m: Option<f64>,
    pub converged: bool,
    pub failure: Option<String>,
}

/// Mean, sample standard deviation, minimum and maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Self {
            count: values.len(),
            mean,
            std_dev: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloReport {
    pub config: SimConfig,
    pub true_delay: f64,
    pub runs: Vec<RunOutcome>,
    pub delay_error: Option<Summary>,
    pub euler_error_deg: Option<Summary>,
    pub translation_error_m: Option<Summary>,
    pub failures: usize,
}

/// Wraps an angle difference in degrees into (-180, 180].
fn wrap_degrees(d: f64) -> f64 {
    let w = d.rem_euclid(360.0);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Errors of a calibration against ground truth.
pub fn compare(cal: &Calibration, true_delay: f64, truth: &RigidTransform) -> (f64, Option<(f64, f64)>) {
    let delay_error = cal.delay.delay - true_delay;
    let extrinsic = cal.extrinsic.as_ref().ok().map(|r| {
        let diff = r.euler_zyx - truth.euler_zyx_deg();
        let euler = diff.iter().map(|d| wrap_degrees(*d).abs()).fold(0.0, f64::max);
        (euler, (r.transform.translation() - truth.translation()).norm())
    });
    (delay_error, extrinsic)
}

fn run_once(cfg: &SimConfig, pipeline: &PipelineConfig, run: usize) -> RunOutcome {
    let seed = mix_seed(cfg.trajectory_seed, run as u64);
    let run_cfg = SimConfig {
        trajectory_seed: seed,
        ..*cfg
    };
    let mut outcome = RunOutcome {
        run,
        trajectory_seed: seed,
        delay_error: None,
        euler_error_deg: None,
        translation_error_m: None,
        converged: false,
        failure: None,
    };
    let result = simulate(&run_cfg).and_then(|data| calibrate(&data.sensor1, &data.sensor2, pipeline).map(|c| (data, c)));
    match result {
        Ok((data, cal)) => {
            let (delay_error, extrinsic) = compare(&cal, data.true_delay, &data.true_transform);
            outcome.delay_error = Some(delay_error);
            outcome.converged = cal.delay.converged && cal.delay.is_observable();
            if let Some((e, t)) = extrinsic {
                outcome.euler_error_deg = Some(e);
                outcome.translation_error_m = Some(t);
            }
            if let Err(e) = &cal.extrinsic {
                outcome.failure = Some(e.clone());
            } else if !outcome.converged {
                outcome.failure = Some("delay estimate did not converge or is unobservable".into());
            }
        }
        Err(e) => outcome.failure = Some(e.to_string()),
    }
    outcome
}

/// Runs `cfg.n_runs` independent simulations through the full pipeline.
/// Per-run failures are recorded, not raised.
pub fn run_monte_carlo(cfg: &SimConfig, pipeline: &PipelineConfig) -> Result<MonteCarloReport> {
    cfg.validate()?;
    let runs: Vec<RunOutcome> = (0..cfg.n_runs)
        .into_par_iter()
        .map(|run| run_once(cfg, pipeline, run))
        .collect();
    let collect = |f: fn(&RunOutcome) -> Option<f64>| Summary::of(&runs.iter().filter_map(f).collect::<Vec<_>>());
    Ok(MonteCarloReport {
        config: *cfg,
        true_delay: cfg.true_delay(),
        delay_error: collect(|r| r.delay_error),
        euler_error_deg: collect(|r| r.euler_error_deg),
        translation_error_m: collect(|r| r.translation_error_m),
        failures: runs.iter().filter(|r| r.failure.is_some()).count(),
        runs,
    })
}
