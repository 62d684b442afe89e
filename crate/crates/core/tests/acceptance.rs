//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod support;

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use trackcal::gp::{regress, Measurement, MeasurementSet, MotionPrior, PriorSettings};
use trackcal::pipeline::PipelineConfig;
use trackcal::sim::{generate_trajectory, mix_seed, run_monte_carlo, simulate, MonteCarloReport, SimConfig};
use trackcal::temporal::{delay_jacobian, estimate_delay, velocity_magnitude, DelayConfig};

use support::{dense_posterior, max_abs_diff, random_instance, random_rotation, regress_dataset, sim_config, transform_set};

const REFERENCE_STD: f64 = 8.757e-4; // sqrt(7.67e-7) s
const TRUE_DELAY: f64 = 0.125;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

fn monte_carlo() -> (MonteCarloReport, f64) {
    let clock = Instant::now();
    let cfg = SimConfig {
        n_runs: 50,
        ..Default::default()
    };
    let report = run_monte_carlo(&cfg, &PipelineConfig::default()).expect("valid configuration");
    (report, clock.elapsed().as_secs_f64())
}

fn delay_range(report: &MonteCarloReport, seconds: f64) -> Outcome {
    let errors: Vec<f64> = report.runs.iter().filter_map(|r| r.delay_error).collect();
    let outside = errors.iter().filter(|e| !(e.abs() < 1.5e-3)).count();
    let worst = errors.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let pass = report.failures == 0 && errors.len() == 50 && outside == 0;
    outcome(
        "delay accuracy, 50 runs, every |error| < 1.5 ms",
        pass,
        format!(
            "{outside}/{} runs outside, max |error| {:.3} ms, mean {:+.3} ms, {} failed runs, {seconds:.1} s",
            errors.len(),
            worst * 1e3,
            report.delay_error.map_or(f64::NAN, |s| s.mean) * 1e3,
            report.failures
        ),
    )
}

fn delay_spread(report: &MonteCarloReport) -> Outcome {
    let std = report.delay_error.map_or(f64::NAN, |s| s.std_dev);
    let ratio = std / REFERENCE_STD;
    outcome(
        "delay error std within a factor 3 of 0.88 ms",
        (1.0 / 3.0..=3.0).contains(&ratio),
        format!("std {:.3} ms (ratio {ratio:.2})", std * 1e3),
    )
}

fn extrinsic_accuracy(report: &MonteCarloReport) -> Outcome {
    let euler = report.euler_error_deg.map_or(f64::NAN, |s| s.max);
    let trans = report.translation_error_m.map_or(f64::NAN, |s| s.max);
    let complete = report.euler_error_deg.is_some_and(|s| s.count == 50);
    outcome(
        "extrinsic accuracy, Euler <= 0.1 deg, translation <= 3 mm",
        complete && euler <= 0.1 && trans <= 3e-3,
        format!("max Euler error {euler:.4} deg, max translation error {:.3} mm", trans * 1e3),
    )
}

fn oracle_equivalence() -> Outcome {
    let clock = Instant::now();
    let errors: Vec<(f64, f64)> = (0..100u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(4, i));
            let n = rng.gen_range(3..=50);
            let inst = random_instance(rng.gen(), n);
            let traj = regress(&inst.measurement_set(0.0), &inst.prior()).unwrap();
            let solve_err = max_abs_diff(traj.posterior_stacked(), &dense_posterior(&inst));
            let k = rng.gen_range(0..n - 1);
            let tau = inst.offsets[k] + rng.gen_range(0.05..0.95) * (inst.offsets[k + 1] - inst.offsets[k]);
            let (augmented, at) = inst.with_free_knot(tau);
            let interp_err = (traj.interpolate(tau).unwrap().stacked() - dense_posterior(&augmented)[at]).amax();
            (solve_err, interp_err)
        })
        .collect();
    let seconds = clock.elapsed().as_secs_f64();
    let solve = errors.iter().fold(0.0f64, |m, e| m.max(e.0));
    let interp = errors.iter().fold(0.0f64, |m, e| m.max(e.1));
    outcome(
        "block solve vs dense solve <= 1e-9, interpolation vs augmented solve <= 1e-8",
        solve <= 1e-9 && interp <= 1e-8 && seconds < 30.0,
        format!("max errors {solve:.2e} and {interp:.2e}, {seconds:.1} s"),
    )
}

fn jacobian_check() -> Outcome {
    let worst = (0..100u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(5, i));
            let data = simulate(&sim_config(rng.gen(), 0.01)).unwrap();
            let (anchor, other) = regress_dataset(&data);
            let delay = -TRUE_DELAY + rng.gen_range(-1.0..1.0);
            let times: Vec<f64> = anchor.times().into_iter().filter(|&t| t > 1.5 && t < 58.0).collect();
            let jac = delay_jacobian(&other, &times, delay).unwrap();
            let h = 1e-6;
            times
                .iter()
                .zip(&jac)
                .map(|(t, j)| {
                    let speed = |d: f64| velocity_magnitude(&other.interpolate(t + d).unwrap());
                    (-(speed(delay + h) - speed(delay - h)) / (2.0 * h) - j).abs()
                })
                .fold(0.0f64, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    outcome(
        "delay Jacobian vs central differences <= 1e-4 m/s^2",
        worst <= 1e-4,
        format!("max error {worst:.2e} m/s^2 over 100 instances"),
    )
}

fn sensor_track(n: usize) -> MeasurementSet {
    let traj = generate_trajectory(6, n as f64 * 0.05);
    let ms = (0..n)
        .map(|k| {
            let t = k as f64 * 0.05;
            Measurement::isotropic(t, traj.position(t), 0.01).unwrap()
        })
        .collect();
    MeasurementSet::new("timing", ms).unwrap()
}

fn time_regression(n: usize) -> f64 {
    let data = sensor_track(n);
    let prior = MotionPrior::from_measurements(&data, &PriorSettings::default()).unwrap();
    (0..7)
        .map(|_| {
            let clock = Instant::now();
            std::hint::black_box(regress(&data, &prior).unwrap());
            clock.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn linear_scaling() -> Outcome {
    let sizes = [1000usize, 2000, 4000, 8000];
    let times: Vec<f64> = sizes.iter().map(|&n| time_regression(n)).collect();
    let ns: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let c = ns.iter().zip(&times).map(|(n, t)| n * t).sum::<f64>() / ns.iter().map(|n| n * n).sum::<f64>();
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let ss_res: f64 = ns.iter().zip(&times).map(|(n, t)| (t - c * n).powi(2)).sum();
    let ss_tot: f64 = times.iter().map(|t| (t - mean).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    let t1138 = time_regression(1138);
    outcome(
        "linear regression cost, R^2 >= 0.95; N = 1138 under 1 s",
        r2 >= 0.95 && t1138 < 1.0,
        format!(
            "times {} ms, R^2 {r2:.4}, N = 1138 in {:.2} ms",
            times.iter().map(|t| format!("{:.2}", t * 1e3)).collect::<Vec<_>>().join("/"),
            t1138 * 1e3
        ),
    )
}

fn convergence_basin() -> Outcome {
    let results: Vec<(f64, f64)> = (0..10u64)
        .into_par_iter()
        .map(|i| {
            let data = simulate(&sim_config(mix_seed(1, i), 0.01)).unwrap();
            let (anchor, other) = regress_dataset(&data);
            let truth = -TRUE_DELAY;
            let estimates: Vec<f64> = (-20..=20)
                .map(|k| {
                    let cfg = DelayConfig {
                        initial_delay: truth + k as f64 * 0.05,
                        ..Default::default()
                    };
                    estimate_delay(&anchor, &other, &cfg).unwrap().delay
                })
                .collect();
            let worst = estimates.iter().fold(0.0f64, |m, d| m.max((d - truth).abs()));
            let spread = estimates.iter().fold(f64::NEG_INFINITY, |m, &d| m.max(d))
                - estimates.iter().fold(f64::INFINITY, |m, &d| m.min(d));
            (worst, spread)
        })
        .collect();
    let worst = results.iter().fold(0.0f64, |m, r| m.max(r.0));
    let spread = results.iter().fold(0.0f64, |m, r| m.max(r.1));
    let failing = results.iter().filter(|r| !(r.0 <= 1.5e-3)).count();
    outcome(
        "convergence from every start within +-1 s, error <= 1.5 ms",
        failing == 0,
        format!(
            "{failing}/10 instances outside, max error {:.3} ms, max spread across starts {spread:.1e} s",
            worst * 1e3
        ),
    )
}

fn frame_invariance() -> Outcome {
    let worst = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(8, i));
            let data = simulate(&sim_config(rng.gen(), 0.01)).unwrap();
            let rot = random_rotation(&mut rng);
            let shift = Vector3::from_fn(|_, _| rng.gen_range(-50.0..50.0));
            let moved = transform_set(&data.sensor2, &rot, &shift);
            let settings = PriorSettings::default();
            let fit = |s: &MeasurementSet| regress(s, &MotionPrior::from_measurements(s, &settings).unwrap()).unwrap();
            let anchor = fit(&data.sensor1);
            let cfg = DelayConfig::default();
            let base = estimate_delay(&anchor, &fit(&data.sensor2), &cfg).unwrap().delay;
            let other = estimate_delay(&anchor, &fit(&moved), &cfg).unwrap().delay;
            (base - other).abs()
        })
        .reduce(|| 0.0, f64::max);
    outcome(
        "rigid motion of sensor 2 changes the delay by <= 1e-9 s",
        worst <= 1e-9,
        format!("max change {worst:.2e} s over 20 instances"),
    )
}

fn main() -> ExitCode {
    let (report, seconds) = monte_carlo();
    let outcomes = [
        delay_range(&report, seconds),
        delay_spread(&report),
        extrinsic_accuracy(&report),
        oracle_equivalence(),
        jacobian_check(),
        linear_scaling(),
        convergence_basin(),
        frame_invariance(),
    ];
    println!();
    for (i, o) in outcomes.iter().enumerate() {
        println!(
            "acceptance {}: {} {} ({})",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
