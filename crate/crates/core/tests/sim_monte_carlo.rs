use trackcal::io::write_monte_carlo_report;
use trackcal::pipeline::PipelineConfig;
use trackcal::sim::{run_monte_carlo, MonteCarloReport, SimConfig};

fn scaled(noise_sigma: f64, n_runs: usize) -> SimConfig {
    SimConfig {
        noise_sigma,
        n_runs,
        ..Default::default()
    }
}

fn run(cfg: &SimConfig) -> MonteCarloReport {
    run_monte_carlo(cfg, &PipelineConfig::default()).unwrap()
}

#[test]
fn fifty_runs_at_defaults_stay_within_range() {
    let report = run(&scaled(0.01, 50));
    assert_eq!(report.failures, 0);
    let summary = report.delay_error.unwrap();
    assert_eq!(summary.count, 50);
    assert!(summary.mean.abs() <= 0.3e-3, "mean delay error {:e} s", summary.mean);
    let outside: Vec<(usize, f64)> = report
        .runs
        .iter()
        .filter_map(|r| r.delay_error.map(|e| (r.run, e)))
        .filter(|(_, e)| e.abs() > 1.5e-3)
        .collect();
    assert!(outside.is_empty(), "runs with |delay error| > 1.5 ms: {outside:?}");
}

#[test]
fn noiseless_runs_recover_the_delay() {
    let report = run(&scaled(0.0, 10));
    assert_eq!(report.failures, 0);
    for r in &report.runs {
        let e = r.delay_error.unwrap();
        assert!(e.abs() <= 1e-5, "run {}: delay error {e:e} s", r.run);
    }
}

#[test]
fn noiseless_runs_recover_the_transform() {
    let report = run(&scaled(0.0, 10));
    for r in &report.runs {
        let euler = r.euler_error_deg.unwrap().to_radians();
        let trans = r.translation_error_m.unwrap();
        assert!(euler <= 1e-8, "run {}: rotation error {euler:e} rad", r.run);
        assert!(trans <= 1e-8, "run {}: translation error {trans:e} m", r.run);
    }
}

#[test]
fn report_ground_truth_matches_offsets() {
    let report = run(&scaled(0.01, 2));
    assert!((report.true_delay - 0.125).abs() < 1e-15);
    let cfg = SimConfig {
        counter_phase: false,
        n_runs: 2,
        ..Default::default()
    };
    assert_eq!(run(&cfg).true_delay, 0.1);
}

#[test]
fn report_is_independent_of_thread_count() {
    let cfg = scaled(0.01, 8);
    let pipeline = PipelineConfig::default();
    let render = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| write_monte_carlo_report(&run(&cfg), &pipeline).unwrap())
    };
    let single = render(1);
    assert_eq!(single, render(1));
    assert_eq!(single, render(4));
}
