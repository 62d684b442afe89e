//! File formats.
//!
//! Trajectories are comma-separated tables with a header row
//! `timestamp_s,x_m,y_m,z_m[,sigma_m]`; lines starting with `#` are
//! comments. Reports are `key = value` documents grouped in `[sections]`
//! (valid TOML) with reals written to 17 significant digits.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{CalibError, Result};
use crate::gp::{Measurement, MeasurementSet};
use crate::pipeline::{Calibration, PipelineConfig, Sensor, Status};
use crate::registration::{RegistrationResult, RigidTransform};
use crate::sim::{MonteCarloReport, RunOutcome, SimConfig, Summary};
use crate::temporal::{CostSample, DelayEstimate};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

const REQUIRED_COLUMNS: [&str; 4] = ["timestamp_s", "x_m", "y_m", "z_m"];
const SIGMA_COLUMN: &str = "sigma_m";

fn parse_error(source_name: &str, line: u64, message: impl Into<String>) -> CalibError {
    CalibError::Parse {
        source_name: source_name.to_string(),
        line,
        message: message.into(),
    }
}

fn io_error(context: &str, e: impl std::fmt::Display) -> CalibError {
    CalibError::Io(format!("{context}: {e}"))
}

/// Reads a trajectory table. `default_sigma` (m) applies when the table
/// has no `sigma_m` column.
pub fn parse_trajectory<R: Read>(reader: R, source_name: &str, default_sigma: Option<f64>) -> Result<MeasurementSet> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut records = csv.records();
    let csv_error = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line());
        parse_error(source_name, line, e.to_string())
    };

    let header = match records.next() {
        Some(r) => r.map_err(csv_error)?,
        None => return Err(parse_error(source_name, 1, "missing header row")),
    };
    let header_line = header.position().map_or(1, |p| p.line());
    let names: Vec<&str> = header.iter().collect();
    let has_sigma = match names.as_slice() {
        [a, b, c, d] if [*a, *b, *c, *d] == REQUIRED_COLUMNS => false,
        [a, b, c, d, e] if [*a, *b, *c, *d] == REQUIRED_COLUMNS && *e == SIGMA_COLUMN => true,
        _ => {
            return Err(parse_error(
                source_name,
                header_line,
                format!("header must be timestamp_s,x_m,y_m,z_m[,sigma_m], got {}", names.join(",")),
            ))
        }
    };
    let sigma_fallback = match (has_sigma, default_sigma) {
        (true, _) => None,
        (false, Some(s)) => Some(s),
        (false, None) => {
            return Err(parse_error(
                source_name,
                header_line,
                "no sigma_m column and no default noise sigma given",
            ))
        }
    };

    let mut measurements = Vec::new();
    let mut previous: Option<(f64, u64)> = None;
    for record in records {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != names.len() {
            return Err(parse_error(
                source_name,
                line,
                format!("expected {} fields, found {}", names.len(), record.len()),
            ));
        }
        let mut values = [0.0; 5];
        for (column, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                parse_error(source_name, line, format!("column {} ({}): {field:?} is not a number", column + 1, names[column]))
            })?;
            if !v.is_finite() {
                return Err(parse_error(
                    source_name,
                    line,
                    format!("column {} ({}): value must be finite", column + 1, names[column]),
                ));
            }
            values[column] = v;
        }
        let t = values[0];
        if let Some((prev_t, prev_line)) = previous {
            if t <= prev_t {
                return Err(parse_error(
                    source_name,
                    line,
                    format!("timestamp {t} does not increase on line {prev_line} value {prev_t}"),
                ));
            }
        }
        previous = Some((t, line));
        let sigma = sigma_fallback.unwrap_or(values[4]);
        let m = Measurement::isotropic(t, Vector3::new(values[1], values[2], values[3]), sigma)
            .map_err(|e| parse_error(source_name, line, e.to_string()))?;
        measurements.push(m);
    }
    MeasurementSet::new(source_name, measurements).map_err(|e| match e {
        CalibError::InvalidArgument(msg) => CalibError::InvalidArgument(format!("{source_name}: {msg}")),
        other => other,
    })
}

pub fn read_trajectory_file(path: &Path, default_sigma: Option<f64>) -> Result<MeasurementSet> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| io_error(&name, e))?;
    parse_trajectory(std::io::BufReader::new(file), &name, default_sigma)
}

/// Writes a trajectory table with a `sigma_m` column. Fails for
/// non-isotropic noise covariances.
pub fn write_trajectory<W: Write>(mut w: W, data: &MeasurementSet) -> Result<()> {
    let mut out = String::from("timestamp_s,x_m,y_m,z_m,sigma_m\n");
    for m in data.measurements() {
        let var = m.noise_cov[(0, 0)];
        if m.noise_cov != Matrix3::from_diagonal_element(var) {
            return Err(CalibError::InvalidArgument(format!(
                "measurement at {} s has a non-isotropic covariance",
                m.time
            )));
        }
        let p = m.position;
        writeln!(out, "{},{},{},{},{}", m.time, p.x, p.y, p.z, var.sqrt()).expect("write to string");
    }
    w.write_all(out.as_bytes()).map_err(|e| io_error("writing trajectory", e))
}

/// `key = value` document builder that refuses non-finite reals.
#[derive(Default)]
struct Document {
    text: String,
}

impl Document {
    fn comment(&mut self, text: &str) {
        writeln!(self.text, "# {text}").expect("write to string");
    }

    fn section(&mut self, name: &str) {
        if !self.text.is_empty() {
            self.text.push('\n');
        }
        writeln!(self.text, "[{name}]").expect("write to string");
    }

    fn raw(&mut self, key: &str, value: impl std::fmt::Display) {
        writeln!(self.text, "{key} = {value}").expect("write to string");
    }

    fn real(&mut self, key: &str, v: f64) -> Result<()> {
        self.raw(key, real(key, v)?);
        Ok(())
    }

    fn vector(&mut self, key: &str, v: &Vector3<f64>) -> Result<()> {
        let parts = v.iter().map(|x| real(key, *x)).collect::<Result<Vec<_>>>()?;
        self.raw(key, format!("[{}]", parts.join(", ")));
        Ok(())
    }

    fn string(&mut self, key: &str, s: &str) {
        self.raw(key, Value::String(s.to_string()));
    }
}

fn real(key: &str, v: f64) -> Result<String> {
    if !v.is_finite() {
        return Err(CalibError::InvalidArgument(format!("report field {key} is not finite ({v})")));
    }
    Ok(format!("{v:.16e}"))
}

/// Parsed `key = value` document with located errors.
struct Parsed<'a> {
    source_name: &'a str,
    table: Table,
}

impl<'a> Parsed<'a> {
    fn new(text: &str, source_name: &'a str) -> Result<Self> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() as u64 + 1);
            parse_error(source_name, line, e.message().to_string())
        })?;
        Ok(Self { source_name, table })
    }

    fn error(&self, section: &str, key: &str, what: &str) -> CalibError {
        parse_error(self.source_name, 0, format!("[{section}] {key}: {what}"))
    }

    fn section(&self, section: &str) -> Result<&Table> {
        self.table
            .get(section)
            .and_then(Value::as_table)
            .ok_or_else(|| parse_error(self.source_name, 0, format!("missing section [{section}]")))
    }

    fn has_section(&self, section: &str) -> bool {
        self.table.contains_key(section)
    }

    fn value(&self, section: &str, key: &str) -> Result<&Value> {
        self.section(section)?
            .get(key)
            .ok_or_else(|| self.error(section, key, "missing"))
    }

    fn real(&self, section: &str, key: &str) -> Result<f64> {
        match self.value(section, key)? {
            Value::Float(v) if v.is_finite() => Ok(*v),
            Value::Integer(i) => Ok(*i as f64),
            _ => Err(self.error(section, key, "expected a finite real")),
        }
    }

    fn count(&self, section: &str, key: &str) -> Result<u64> {
        match self.value(section, key)? {
            Value::Integer(i) if *i >= 0 => Ok(*i as u64),
            _ => Err(self.error(section, key, "expected a non-negative integer")),
        }
    }

    fn flag(&self, section: &str, key: &str) -> Result<bool> {
        self.value(section, key)?
            .as_bool()
            .ok_or_else(|| self.error(section, key, "expected true or false"))
    }

    fn string(&self, section: &str, key: &str) -> Result<String> {
        self.value(section, key)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.error(section, key, "expected a string"))
    }

    fn vector(&self, section: &str, key: &str) -> Result<Vector3<f64>> {
        let bad = || self.error(section, key, "expected an array of three finite reals");
        let items = self.value(section, key)?.as_array().ok_or_else(bad)?;
        if items.len() != 3 {
            return Err(bad());
        }
        let mut v = Vector3::zeros();
        for (i, item) in items.iter().enumerate() {
            v[i] = match item {
                Value::Float(x) if x.is_finite() => *x,
                Value::Integer(x) => *x as f64,
                _ => return Err(bad()),
            };
        }
        Ok(v)
    }

    fn transform(&self, section: &str) -> Result<RigidTransform> {
        let rows = [
            self.vector(section, "rotation_row0")?,
            self.vector(section, "rotation_row1")?,
            self.vector(section, "rotation_row2")?,
        ];
        let rotation = Matrix3::from_rows(&[rows[0].transpose(), rows[1].transpose(), rows[2].transpose()]);
        RigidTransform::new(rotation, self.vector(section, "translation_m")?)
            .map_err(|e| self.error(section, "rotation", &e.to_string()))
    }
}

fn write_transform(doc: &mut Document, t: &RigidTransform) -> Result<()> {
    for (i, key) in ["rotation_row0", "rotation_row1", "rotation_row2"].iter().enumerate() {
        doc.vector(key, &t.rotation().row(i).transpose())?;
    }
    doc.vector("translation_m", t.translation())
}

/// Hex SHA-256 of a canonical rendering of the pipeline configuration.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    let d = &cfg.delay;
    let canonical = format!(
        "anchor={}\nqc={:e}\ninitial_variance={:e},{:e},{:e}\ninitial_delay={:e}\nhalfwidth={:e}\nstep={:e}\n\
         max_iterations={}\ncost_tolerance={:e}\nparameter_tolerance={:e}\ndamping={:e}\nsolver={}\nregistration={}\nrefine={}\n",
        cfg.anchor,
        cfg.prior.qc,
        cfg.prior.initial_variance[0],
        cfg.prior.initial_variance[1],
        cfg.prior.initial_variance[2],
        d.initial_delay,
        d.coarse_search_halfwidth,
        d.coarse_search_step,
        d.max_iterations,
        d.cost_tolerance,
        d.parameter_tolerance,
        d.lm_initial_damping,
        cfg.solver,
        cfg.registration,
        cfg.refine,
    );
    format!("{:x}", Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub tool_version: String,
    pub sensor1_file: String,
    pub sensor2_file: String,
    pub config_hash: String,
}

/// Everything `calibrate` writes. Timings are deliberately excluded so that
/// identical inputs give byte-identical reports.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub provenance: Provenance,
    pub anchor: Sensor,
    /// Reported convention, `t_sensor1 = t_sensor2 + delay`.
    pub delay: DelayEstimate,
    /// Maps sensor-2 coordinates into the sensor-1 frame.
    pub extrinsic: std::result::Result<RegistrationResult, String>,
}

impl CalibrationReport {
    pub fn new(provenance: Provenance, calibration: &Calibration) -> Self {
        Self {
            provenance,
            anchor: calibration.anchor,
            delay: calibration.delay,
            extrinsic: calibration.extrinsic.clone(),
        }
    }

    pub fn status(&self) -> Status {
        Calibration {
            anchor: self.anchor,
            delay: self.delay,
            extrinsic: self.extrinsic.clone(),
            timings: Default::default(),
        }
        .status()
    }
}

fn status_name(status: Status) -> &'static str {
    match status {
        Status::Converged => "converged",
        Status::NotConverged => "not_converged",
        Status::Unobservable => "unobservable",
    }
}

pub fn write_report(report: &CalibrationReport) -> Result<String> {
    let mut doc = Document::default();
    doc.comment("calibration report; delay: t_sensor1 = t_sensor2 + delay_s; transform: p_sensor1 = R p_sensor2 + t");
    doc.section("provenance");
    doc.string("tool_version", &report.provenance.tool_version);
    doc.string("sensor1_file", &report.provenance.sensor1_file);
    doc.string("sensor2_file", &report.provenance.sensor2_file);
    doc.string("config_sha256", &report.provenance.config_hash);
    doc.string("anchor", &report.anchor.to_string());
    doc.string("status", status_name(report.status()));

    let d = &report.delay;
    doc.section("delay");
    doc.real("delay_s", d.delay)?;
    doc.real("final_cost_m2_per_s2", d.final_cost)?;
    doc.real("rms_residual_m_per_s", d.rms_residual)?;
    doc.raw("iterations", d.iterations);
    doc.raw("converged", d.converged);
    doc.real("observability_m_per_s2", d.observability)?;
    doc.raw("observable", d.is_observable());
    doc.raw("n_correspondences", d.n_correspondences);
    doc.raw("excluded_knots", d.excluded_knots);
    doc.real("coarse_delay_s", d.coarse_delay)?;
    doc.raw("flat_cost", d.flat_cost);

    doc.section("extrinsic");
    match &report.extrinsic {
        Ok(r) => {
            write_transform(&mut doc, &r.transform)?;
            doc.vector("euler_zyx_deg", &r.euler_zyx)?;
            doc.real("rms_residual_m", r.rms_residual)?;
            doc.raw("n_pairs", r.n_pairs);
            doc.real("collinearity", r.collinearity)?;
        }
        Err(message) => doc.string("error", message),
    }
    Ok(doc.text)
}

pub fn parse_report(text: &str, source_name: &str) -> Result<CalibrationReport> {
    let p = Parsed::new(text, source_name)?;
    let anchor = match p.string("provenance", "anchor")?.as_str() {
        "sensor1" => Sensor::One,
        "sensor2" => Sensor::Two,
        _ => return Err(p.error("provenance", "anchor", "expected sensor1 or sensor2")),
    };
    let delay = DelayEstimate {
        delay: p.real("delay", "delay_s")?,
        final_cost: p.real("delay", "final_cost_m2_per_s2")?,
        rms_residual: p.real("delay", "rms_residual_m_per_s")?,
        iterations: p.count("delay", "iterations")? as usize,
        converged: p.flag("delay", "converged")?,
        observability: p.real("delay", "observability_m_per_s2")?,
        n_correspondences: p.count("delay", "n_correspondences")? as usize,
        excluded_knots: p.count("delay", "excluded_knots")? as usize,
        coarse_delay: p.real("delay", "coarse_delay_s")?,
        flat_cost: p.flag("delay", "flat_cost")?,
    };
    let extrinsic = if p.section("extrinsic")?.contains_key("error") {
        Err(p.string("extrinsic", "error")?)
    } else {
        Ok(RegistrationResult {
            transform: p.transform("extrinsic")?,
            euler_zyx: p.vector("extrinsic", "euler_zyx_deg")?,
            rms_residual: p.real("extrinsic", "rms_residual_m")?,
            n_pairs: p.count("extrinsic", "n_pairs")? as usize,
            collinearity: p.real("extrinsic", "collinearity")?,
        })
    };
    let report = CalibrationReport {
        provenance: Provenance {
            tool_version: p.string("provenance", "tool_version")?,
            sensor1_file: p.string("provenance", "sensor1_file")?,
            sensor2_file: p.string("provenance", "sensor2_file")?,
            config_hash: p.string("provenance", "config_sha256")?,
        },
        anchor,
        delay,
        extrinsic,
    };
    if p.string("provenance", "status")? != status_name(report.status()) {
        return Err(p.error("provenance", "status", "inconsistent with the delay fields"));
    }
    Ok(report)
}

/// Simulation parameters and true values written next to simulated files.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub config: SimConfig,
    /// `t_sensor1 = t_sensor2 + true_delay`.
    pub true_delay: f64,
}

pub fn write_ground_truth(truth: &GroundTruth) -> Result<String> {
    let c = &truth.config;
    let mut doc = Document::default();
    doc.comment("simulation ground truth; delay: t_sensor1 = t_sensor2 + true_delay_s; transform: p_sensor1 = R p_sensor2 + t");
    doc.section("truth");
    doc.real("true_delay_s", truth.true_delay)?;
    write_transform(&mut doc, &c.ground_truth_transform)?;
    doc.vector("euler_zyx_deg", &c.ground_truth_transform.euler_zyx_deg())?;
    doc.section("simulation");
    write_sim_config(&mut doc, c)?;
    Ok(doc.text)
}

fn write_sim_config(doc: &mut Document, c: &SimConfig) -> Result<()> {
    doc.real("duration_s", c.duration)?;
    doc.real("sample_interval_s", c.sample_interval)?;
    doc.real("sensor2_start_offset_s", c.sensor2_start_offset)?;
    doc.raw("counter_phase", c.counter_phase);
    doc.real("noise_sigma_m", c.noise_sigma)?;
    // seeds are written as strings: TOML integers are signed 64-bit
    doc.string("trajectory_seed", &c.trajectory_seed.to_string());
    doc.raw("n_runs", c.n_runs);
    Ok(())
}

pub fn parse_ground_truth(text: &str, source_name: &str) -> Result<GroundTruth> {
    let p = Parsed::new(text, source_name)?;
    let seed = p.string("simulation", "trajectory_seed")?;
    let config = SimConfig {
        duration: p.real("simulation", "duration_s")?,
        sample_interval: p.real("simulation", "sample_interval_s")?,
        sensor2_start_offset: p.real("simulation", "sensor2_start_offset_s")?,
        counter_phase: p.flag("simulation", "counter_phase")?,
        noise_sigma: p.real("simulation", "noise_sigma_m")?,
        ground_truth_transform: p.transform("truth")?,
        trajectory_seed: seed
            .parse()
            .map_err(|_| p.error("simulation", "trajectory_seed", "expected an unsigned integer"))?,
        n_runs: p.count("simulation", "n_runs")? as usize,
    };
    Ok(GroundTruth {
        config,
        true_delay: p.real("truth", "true_delay_s")?,
    })
}

fn write_summary(doc: &mut Document, name: &str, summary: &Option<Summary>) -> Result<()> {
    doc.section(name);
    match summary {
        Some(s) => {
            doc.raw("count", s.count);
            doc.real("mean", s.mean)?;
            doc.real("std_dev", s.std_dev)?;
            doc.real("min", s.min)?;
            doc.real("max", s.max)?;
        }
        None => doc.raw("count", 0),
    }
    Ok(())
}

pub fn write_monte_carlo_report(report: &MonteCarloReport, pipeline: &PipelineConfig) -> Result<String> {
    let mut doc = Document::default();
    doc.comment("monte carlo report; errors are estimate minus truth");
    doc.section("provenance");
    doc.string("tool_version", TOOL_VERSION);
    doc.string("config_sha256", &config_hash(pipeline));
    doc.section("simulation");
    write_sim_config(&mut doc, &report.config)?;
    doc.real("true_delay_s", report.true_delay)?;
    doc.vector("true_euler_zyx_deg", &report.config.ground_truth_transform.euler_zyx_deg())?;
    doc.vector("true_translation_m", report.config.ground_truth_transform.translation())?;
    doc.section("outcome");
    doc.raw("runs", report.runs.len());
    doc.raw("failures", report.failures);
    write_summary(&mut doc, "delay_error_s", &report.delay_error)?;
    write_summary(&mut doc, "euler_error_deg", &report.euler_error_deg)?;
    write_summary(&mut doc, "translation_error_m", &report.translation_error_m)?;
    Ok(doc.text)
}

/// Per-run rows; missing values are empty fields.
pub fn write_monte_carlo_runs<W: Write>(w: W, runs: &[RunOutcome]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.16e}"));
    let fail = |e: csv::Error| io_error("writing run table", e);
    csv.write_record([
        "run",
        "trajectory_seed",
        "delay_error_s",
        "euler_error_deg",
        "translation_error_m",
        "converged",
        "failure",
    ])
    .map_err(fail)?;
    for r in runs {
        csv.write_record([
            r.run.to_string(),
            r.trajectory_seed.to_string(),
            opt(r.delay_error),
            opt(r.euler_error_deg),
            opt(r.translation_error_m),
            r.converged.to_string(),
            r.failure.clone().unwrap_or_default(),
        ])
        .map_err(fail)?;
    }
    csv.flush().map_err(|e| io_error("writing run table", e))
}

/// `delay_s,cost_m2_per_s2` rows under a comment header.
pub fn write_cost_curve<W: Write>(mut w: W, samples: &[CostSample]) -> Result<()> {
    let mut out = String::from("# delay_s,cost_m2_per_s2\n");
    for s in samples {
        writeln!(out, "{},{}", real("delay_s", s.delay)?, real("cost", s.cost)?).expect("write to string");
    }
    w.write_all(out.as_bytes()).map_err(|e| io_error("writing cost curve", e))
}

pub fn parse_cost_curve(text: &str, source_name: &str) -> Result<Vec<(f64, f64)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            let bad = || parse_error(source_name, i as u64 + 1, format!("expected delay,cost, got {l:?}"));
            let (d, c) = l.split_once(',').ok_or_else(bad)?;
            Ok((d.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

/// Whether `text` looks like a ground-truth sidecar rather than a report.
pub fn is_ground_truth(text: &str) -> bool {
    Parsed::new(text, "").is_ok_and(|p| p.has_section("truth"))
}
