//! `trackcal`: estimate the time delay and rigid transform between two
//! sensors tracking the same moving object.
//!
//! Exit status: 0 on success, 1 for file, parse and flag errors, 2 when the
//! delay did not converge, is unobservable, or the tracks barely overlap.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trackcal::gp::{PriorSettings, DEFAULT_SOLVER};
use trackcal::io::{self, CalibrationReport, GroundTruth, Provenance, TOOL_VERSION};
use trackcal::pipeline::{self, Anchor, PipelineConfig, Status};
use trackcal::registration::DEFAULT_REGISTRATION;
use trackcal::sim::{self, SimConfig};
use trackcal::temporal::{delay_grid, DelayConfig};
use trackcal::CalibError;

const EXIT_USAGE: u8 = 1;
const EXIT_ESTIMATION: u8 = 2;

#[derive(Parser)]
#[command(name = "trackcal", version, about = "Spatio-temporal calibration of two sensors from tracked trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate delay and extrinsics from two trajectory files
    Calibrate(CalibrateArgs),
    /// Generate a synthetic sensor pair, optionally with a Monte Carlo evaluation
    Simulate(SimulateArgs),
    /// Tabulate the temporal alignment cost over a delay grid
    CostCurve(CostCurveArgs),
}

/// Delays follow t_sensor1 = t_sensor2 + delay.
#[derive(Args)]
struct EstimationArgs {
    /// Anchor sensor: auto (lower sample rate), sensor1 or sensor2
    #[arg(long, default_value = "auto", value_parser = parse_anchor)]
    anchor: Anchor,
    /// Jerk power spectral density of the motion prior, m^2/s^5
    #[arg(long, default_value_t = 1.0)]
    qc: f64,
    /// Centre of the coarse delay search, s
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    init_delay: f64,
    /// Half-width of the coarse delay search, s
    #[arg(long, default_value_t = 1.0)]
    search_halfwidth: f64,
    /// Spacing of the coarse delay search, s
    #[arg(long, default_value_t = 0.05)]
    search_step: f64,
    /// Levenberg-Marquardt iteration limit
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Trajectory solver
    #[arg(long, default_value = DEFAULT_SOLVER)]
    solver: String,
    /// Closed-form registration method
    #[arg(long, default_value = DEFAULT_REGISTRATION)]
    registration: String,
    /// Polish the closed-form transform by iterative refinement
    #[arg(long)]
    refine: bool,
}

impl EstimationArgs {
    fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            anchor: self.anchor,
            prior: PriorSettings {
                qc: self.qc,
                ..Default::default()
            },
            delay: DelayConfig {
                initial_delay: self.init_delay,
                coarse_search_halfwidth: self.search_halfwidth,
                coarse_search_step: self.search_step,
                max_iterations: self.max_iters,
                ..Default::default()
            },
            solver: self.solver.clone(),
            registration: self.registration.clone(),
            refine: self.refine,
        }
    }
}

#[derive(Args)]
struct InputArgs {
    /// Sensor-1 trajectory file (timestamp_s,x_m,y_m,z_m[,sigma_m])
    sensor1: PathBuf,
    /// Sensor-2 trajectory file
    sensor2: PathBuf,
    /// Position noise std for files without a sigma_m column, m
    #[arg(long, default_value_t = 0.01)]
    noise_sigma: f64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    estimation: EstimationArgs,
    /// Report file (default: standard output)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the cost over the coarse search grid to this file
    #[arg(long)]
    cost_out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory for sensor1.csv, sensor2.csv and ground_truth.toml
    #[arg(long)]
    out: PathBuf,
    /// Position noise std, m
    #[arg(long, default_value_t = 0.01)]
    noise_sigma: f64,
    /// Sample interval of both sensors, s
    #[arg(long, default_value_t = 0.05)]
    sample_interval: f64,
    /// Start of sensor-2 sampling after sensor 1 (before the half-interval shift), s
    #[arg(long, default_value_t = 0.1)]
    start_offset: f64,
    /// Trajectory duration, s
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    /// Sample both sensors in phase instead of half an interval apart
    #[arg(long)]
    in_phase: bool,
    /// Trajectory and noise seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also run this many Monte Carlo calibrations (monte_carlo.toml, monte_carlo_runs.csv)
    #[arg(long)]
    runs: Option<usize>,
    #[command(flatten)]
    estimation: EstimationArgs,
}

#[derive(Args)]
struct CostCurveArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    estimation: EstimationArgs,
    /// First grid delay, s
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    grid_min: f64,
    /// Last grid delay, s
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    grid_max: f64,
    /// Grid spacing, s
    #[arg(long, default_value_t = 0.01)]
    grid_step: f64,
    /// Table file (default: standard output)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_anchor(s: &str) -> Result<Anchor, String> {
    s.parse().map_err(|e: CalibError| e.to_string())
}

/// Error carrying its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<CalibError> for Failure {
    fn from(e: CalibError) -> Self {
        let code = match e {
            CalibError::InsufficientOverlap { .. }
            | CalibError::InsufficientCorrespondences { .. }
            | CalibError::DegenerateGeometry(_)
            | CalibError::NumericalFailure { .. }
            | CalibError::OutOfSupport { .. } => EXIT_ESTIMATION,
            CalibError::InvalidArgument(_)
            | CalibError::Parse { .. }
            | CalibError::Io(_)
            | CalibError::UnknownStrategy { .. } => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| CalibError::Io(format!("{}: {e}", p.display())).into()),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| CalibError::Io(format!("standard output: {e}")).into()),
    }
}

fn read_inputs(input: &InputArgs) -> Result<(trackcal::gp::MeasurementSet, trackcal::gp::MeasurementSet), Failure> {
    Ok((
        io::read_trajectory_file(&input.sensor1, Some(input.noise_sigma))?,
        io::read_trajectory_file(&input.sensor2, Some(input.noise_sigma))?,
    ))
}

fn calibrate(args: &CalibrateArgs) -> Result<u8, Failure> {
    let cfg = args.estimation.pipeline();
    let (s1, s2) = read_inputs(&args.input)?;
    let calibration = pipeline::calibrate(&s1, &s2, &cfg)?;
    let t = &calibration.timings;
    eprintln!(
        "regression {:.3} s, delay {:.3} s, registration {:.3} s ({} + {} samples)",
        t.regression,
        t.delay,
        t.registration,
        s1.len(),
        s2.len()
    );

    let report = CalibrationReport::new(
        Provenance {
            tool_version: TOOL_VERSION.to_string(),
            sensor1_file: args.input.sensor1.display().to_string(),
            sensor2_file: args.input.sensor2.display().to_string(),
            config_hash: io::config_hash(&cfg),
        },
        &calibration,
    );
    write_output(args.out.as_deref(), io::write_report(&report)?.as_bytes())?;

    if let Some(path) = &args.cost_out {
        let samples = pipeline::delay_cost_curve(&s1, &s2, &cfg.delay.coarse_grid(), &cfg)?;
        let mut buf = Vec::new();
        io::write_cost_curve(&mut buf, &samples)?;
        write_output(Some(path), &buf)?;
    }

    if let Err(e) = &calibration.extrinsic {
        eprintln!("warning: extrinsic calibration failed: {e}");
    }
    Ok(match calibration.status() {
        Status::Converged => 0,
        Status::NotConverged => {
            eprintln!("error: delay estimate did not converge within {} iterations", cfg.delay.max_iterations);
            EXIT_ESTIMATION
        }
        Status::Unobservable => {
            eprintln!(
                "error: unobservable delay: the velocity magnitude barely changes (mean |J| = {:.3e} m/s^2)",
                calibration.delay.observability
            );
            EXIT_ESTIMATION
        }
    })
}

fn simulate(args: &SimulateArgs) -> Result<u8, Failure> {
    let cfg = SimConfig {
        duration: args.duration,
        sample_interval: args.sample_interval,
        sensor2_start_offset: args.start_offset,
        counter_phase: !args.in_phase,
        noise_sigma: args.noise_sigma,
        trajectory_seed: args.seed,
        n_runs: args.runs.unwrap_or(1),
        ..Default::default()
    };
    cfg.validate()?;
    let pipeline_cfg = args.estimation.pipeline();
    pipeline_cfg.delay.validate()?;
    fs::create_dir_all(&args.out).map_err(|e| CalibError::Io(format!("{}: {e}", args.out.display())))?;

    let data = sim::simulate(&cfg)?;
    let mut buf = Vec::new();
    io::write_trajectory(&mut buf, &data.sensor1)?;
    write_output(Some(&args.out.join("sensor1.csv")), &buf)?;
    buf.clear();
    io::write_trajectory(&mut buf, &data.sensor2)?;
    write_output(Some(&args.out.join("sensor2.csv")), &buf)?;
    let truth = GroundTruth {
        config: cfg,
        true_delay: data.true_delay,
    };
    write_output(Some(&args.out.join("ground_truth.toml")), io::write_ground_truth(&truth)?.as_bytes())?;

    if args.runs.is_some() {
        let report = sim::run_monte_carlo(&cfg, &pipeline_cfg)?;
        let text = io::write_monte_carlo_report(&report, &pipeline_cfg)?;
        write_output(Some(&args.out.join("monte_carlo.toml")), text.as_bytes())?;
        buf.clear();
        io::write_monte_carlo_runs(&mut buf, &report.runs)?;
        write_output(Some(&args.out.join("monte_carlo_runs.csv")), &buf)?;
        if let Some(d) = &report.delay_error {
            eprintln!(
                "{} runs, {} failures; delay error mean {:.3e} s, std {:.3e} s, range [{:.3e}, {:.3e}] s",
                report.runs.len(),
                report.failures,
                d.mean,
                d.std_dev,
                d.min,
                d.max
            );
        }
    }
    Ok(0)
}

fn cost_curve(args: &CostCurveArgs) -> Result<u8, Failure> {
    let cfg = args.estimation.pipeline();
    let grid = delay_grid(args.grid_min, args.grid_max, args.grid_step)?;
    let (s1, s2) = read_inputs(&args.input)?;
    let samples = pipeline::delay_cost_curve(&s1, &s2, &grid, &cfg)?;
    let mut buf = Vec::new();
    io::write_cost_curve(&mut buf, &samples)?;
    write_output(args.out.as_deref(), &buf)?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = match &cli.command {
        Command::Calibrate(args) => calibrate(args),
        Command::Simulate(args) => simulate(args),
        Command::CostCurve(args) => cost_curve(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
