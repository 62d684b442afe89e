//! Reference implementations and instance generators shared by the
//! integration tests. Nothing here calls into the crate's solvers.

#![allow(dead_code)]

use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;

use trackcal::gp::{Measurement, MeasurementSet, MotionPrior, PriorSettings};

pub type S9 = SVector<f64, 9>;
pub type M9 = SMatrix<f64, 9, 9>;

/// Knot times (from 0) and optional `(position, covariance)` observations.
#[derive(Debug, Clone)]
pub struct Instance {
    pub offsets: Vec<f64>,
    pub observations: Vec<Option<(Vector3<f64>, Matrix3<f64>)>>,
    pub qc: Matrix3<f64>,
    pub initial_mean: S9,
    pub initial_cov: M9,
}

impl Instance {
    pub fn measurement_set(&self, origin: f64) -> MeasurementSet {
        let ms = self
            .offsets
            .iter()
            .zip(&self.observations)
            .map(|(&t, o)| {
                let (p, r) = o.expect("fully observed instance");
                Measurement::new(origin + t, p, r).unwrap()
            })
            .collect();
        MeasurementSet::new("oracle", ms).unwrap()
    }

    pub fn prior(&self) -> MotionPrior {
        MotionPrior::new(self.qc, self.initial_mean, self.initial_cov).unwrap()
    }

    /// Same problem with a measurement-free knot inserted at `tau`.
    pub fn with_free_knot(&self, tau: f64) -> (Instance, usize) {
        let at = self.offsets.partition_point(|&t| t < tau);
        assert!(at > 0 && at < self.offsets.len() && self.offsets[at] != tau);
        let mut out = self.clone();
        out.offsets.insert(at, tau);
        out.observations.insert(at, None);
        (out, at)
    }
}

fn kron3(c: [[f64; 3]; 3], m: &Matrix3<f64>) -> M9 {
    let mut out = M9::zeros();
    for i in 0..3 {
        for j in 0..3 {
            out.fixed_view_mut::<3, 3>(3 * i, 3 * j).copy_from(&(m * c[i][j]));
        }
    }
    out
}

/// Constant-acceleration transition over `dt`.
pub fn phi(dt: f64) -> M9 {
    kron3(
        [[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 1.0]],
        &Matrix3::identity(),
    )
}

/// White-noise-on-jerk process noise over `dt`.
pub fn process_q(dt: f64, qc: &Matrix3<f64>) -> M9 {
    let (d2, d3, d4, d5) = (dt * dt, dt.powi(3), dt.powi(4), dt.powi(5));
    kron3(
        [
            [d5 / 20.0, d4 / 8.0, d3 / 6.0],
            [d4 / 8.0, d3 / 3.0, d2 / 2.0],
            [d3 / 6.0, d2 / 2.0, dt],
        ],
        qc,
    )
}

type Dd = TwoFloat;

fn dd(v: f64) -> Dd {
    Dd::from(v)
}

/// Quotient refined with one correction step; the crate's own division
/// is only accurate to f64 rounding.
fn div(a: Dd, b: Dd) -> Dd {
    let q = dd(a.hi() / b.hi());
    let q = q + dd((a - q * b).hi() / b.hi());
    q + dd((a - q * b).hi() / b.hi())
}

/// Dense row-major matrix in double-double precision.
#[derive(Clone)]
struct DdMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Dd>,
}

impl DdMatrix {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![dd(0.0); rows * cols],
        }
    }

    fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, dd(1.0));
        }
        m
    }

    fn get(&self, i: usize, j: usize) -> Dd {
        self.data[i * self.cols + j]
    }

    fn set(&mut self, i: usize, j: usize, v: Dd) {
        self.data[i * self.cols + j] = v;
    }

    fn set_block<const R: usize, const C: usize>(&mut self, i: usize, j: usize, b: &[[Dd; C]; R]) {
        for (r, row) in b.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                self.set(i + r, j + c, v);
            }
        }
    }

    fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// Full product; zero entries are skipped, which changes nothing but
    /// the running time.
    fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a.hi() == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    let b = other.get(k, j);
                    if b.hi() != 0.0 {
                        let v = out.get(i, j) + a * b;
                        out.set(i, j, v);
                    }
                }
            }
        }
        out
    }

    fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (o, &b) in out.data.iter_mut().zip(&other.data) {
            *o += b;
        }
        out
    }

    /// Gauss-Jordan elimination with partial pivoting: returns `self^-1 rhs`.
    fn solve(&self, rhs: &Self) -> Self {
        let n = self.rows;
        assert_eq!(n, self.cols);
        assert_eq!(n, rhs.rows);
        let mut a = self.clone();
        let mut b = rhs.clone();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a.get(i, col).hi().abs().total_cmp(&a.get(j, col).hi().abs()))
                .unwrap();
            assert!(a.get(pivot, col).hi() != 0.0, "singular matrix");
            if pivot != col {
                for j in 0..n {
                    let (x, y) = (a.get(col, j), a.get(pivot, j));
                    a.set(col, j, y);
                    a.set(pivot, j, x);
                }
                for j in 0..b.cols {
                    let (x, y) = (b.get(col, j), b.get(pivot, j));
                    b.set(col, j, y);
                    b.set(pivot, j, x);
                }
            }
            let p = a.get(col, col);
            let a_nz: Vec<usize> = (0..n).filter(|&j| a.get(col, j).hi() != 0.0).collect();
            let b_nz: Vec<usize> = (0..b.cols).filter(|&j| b.get(col, j).hi() != 0.0).collect();
            for i in 0..n {
                if i == col || a.get(i, col).hi() == 0.0 {
                    continue;
                }
                let f = div(a.get(i, col), p);
                if f.hi() == 0.0 {
                    continue;
                }
                for &j in &a_nz {
                    let v = a.get(i, j) - f * a.get(col, j);
                    a.set(i, j, v);
                }
                for &j in &b_nz {
                    let v = b.get(i, j) - f * b.get(col, j);
                    b.set(i, j, v);
                }
            }
        }
        for i in 0..n {
            let p = a.get(i, i);
            for j in 0..b.cols {
                let v = div(b.get(i, j), p);
                b.set(i, j, v);
            }
        }
        b
    }
}

fn kron3_dd(c: [[Dd; 3]; 3], m: &Matrix3<f64>) -> [[Dd; 9]; 9] {
    let mut out = [[dd(0.0); 9]; 9];
    for i in 0..9 {
        for j in 0..9 {
            out[i][j] = c[i / 3][j / 3] * dd(m[(i % 3, j % 3)]);
        }
    }
    out
}

fn phi_dd(dt: Dd) -> [[Dd; 9]; 9] {
    let (z, one) = (dd(0.0), dd(1.0));
    kron3_dd(
        [[one, dt, dt * dt * dd(0.5)], [z, one, dt], [z, z, one]],
        &Matrix3::identity(),
    )
}

fn process_q_dd(dt: Dd, qc: &Matrix3<f64>) -> [[Dd; 9]; 9] {
    let d2 = dt * dt;
    let (d3, d4) = (d2 * dt, d2 * d2);
    let d5 = d4 * dt;
    kron3_dd(
        [
            [div(d5, dd(20.0)), div(d4, dd(8.0)), div(d3, dd(6.0))],
            [div(d4, dd(8.0)), div(d3, dd(3.0)), div(d2, dd(2.0))],
            [div(d3, dd(6.0)), div(d2, dd(2.0)), dt],
        ],
        qc,
    )
}

/// Batch posterior mean from explicit full matrices,
/// `(A^-T Q^-1 A^-1 + C^T R^-1 C) x = A^-T Q^-1 A^-1 x_prior + C^T R^-1 y`,
/// solved for the deviation from the prior mean in double-double
/// arithmetic so the reference is accurate well beyond f64 rounding.
pub fn dense_posterior(inst: &Instance) -> Vec<S9> {
    let n = inst.offsets.len();
    let dim = 9 * n;

    let mut lifted_inv = DdMatrix::identity(dim);
    let mut q = DdMatrix::zeros(dim, dim);
    let p0: [[Dd; 9]; 9] = std::array::from_fn(|i| std::array::from_fn(|j| dd(inst.initial_cov[(i, j)])));
    q.set_block(0, 0, &p0);
    for k in 1..n {
        let dt = dd(inst.offsets[k]) - dd(inst.offsets[k - 1]);
        let neg_phi = phi_dd(dt).map(|row| row.map(|v| -v));
        lifted_inv.set_block(9 * k, 9 * (k - 1), &neg_phi);
        q.set_block(9 * k, 9 * k, &process_q_dd(dt, &inst.qc));
    }
    let q_inv = q.solve(&DdMatrix::identity(dim));
    let prior_info = lifted_inv.transpose().mul(&q_inv).mul(&lifted_inv);

    let mut prior_mean = vec![dd(0.0); dim];
    for k in 0..n {
        let f = phi_dd(dd(inst.offsets[k]));
        for i in 0..9 {
            prior_mean[9 * k + i] = (0..9).fold(dd(0.0), |acc, j| acc + f[i][j] * dd(inst.initial_mean[j]));
        }
    }

    let observed: Vec<usize> = (0..n).filter(|&k| inst.observations[k].is_some()).collect();
    let m = 3 * observed.len();
    let mut c = DdMatrix::zeros(m, dim);
    let mut r = DdMatrix::zeros(m, m);
    let mut innovation = DdMatrix::zeros(m, 1);
    for (row, &k) in observed.iter().enumerate() {
        let (p, cov) = inst.observations[k].unwrap();
        for i in 0..3 {
            c.set(3 * row + i, 9 * k + i, dd(1.0));
            innovation.set(3 * row + i, 0, dd(p[i]) - prior_mean[9 * k + i]);
            for j in 0..3 {
                r.set(3 * row + i, 3 * row + j, dd(cov[(i, j)]));
            }
        }
    }
    let ct_r_inv = c.transpose().mul(&r.solve(&DdMatrix::identity(m)));

    let lhs = prior_info.add(&ct_r_inv.mul(&c));
    let delta = lhs.solve(&ct_r_inv.mul(&innovation));
    (0..n)
        .map(|k| S9::from_fn(|i, _| (prior_mean[9 * k + i] + delta.get(9 * k + i, 0)).hi()))
        .collect()
}

/// Forward Kalman filter with a fixed-interval backward smoothing pass.
pub fn rts_posterior(inst: &Instance) -> Vec<S9> {
    let n = inst.offsets.len();
    let mut x_pred = Vec::with_capacity(n);
    let mut p_pred = Vec::with_capacity(n);
    let mut x_filt: Vec<S9> = Vec::with_capacity(n);
    let mut p_filt: Vec<M9> = Vec::with_capacity(n);
    let h = SMatrix::<f64, 3, 9>::from_fn(|i, j| if i == j { 1.0 } else { 0.0 });

    for k in 0..n {
        let (xp, pp) = if k == 0 {
            (inst.initial_mean, inst.initial_cov)
        } else {
            let dt = inst.offsets[k] - inst.offsets[k - 1];
            let f = phi(dt);
            (f * x_filt[k - 1], f * p_filt[k - 1] * f.transpose() + process_q(dt, &inst.qc))
        };
        let (xf, pf) = match inst.observations[k] {
            Some((y, r)) => {
                let s = h * pp * h.transpose() + r;
                let gain = pp * h.transpose() * s.try_inverse().unwrap();
                let joseph = M9::identity() - gain * h;
                (
                    xp + gain * (y - h * xp),
                    joseph * pp * joseph.transpose() + gain * r * gain.transpose(),
                )
            }
            None => (xp, pp),
        };
        x_pred.push(xp);
        p_pred.push(pp);
        x_filt.push(xf);
        p_filt.push(pf);
    }

    let mut out = x_filt.clone();
    for k in (0..n - 1).rev() {
        let dt = inst.offsets[k + 1] - inst.offsets[k];
        let gain = p_filt[k] * phi(dt).transpose() * p_pred[k + 1].try_inverse().unwrap();
        out[k] = x_filt[k] + gain * (out[k + 1] - x_pred[k + 1]);
    }
    out
}

pub fn random_rotation(rng: &mut impl Rng) -> Rotation3<f64> {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis };
    Rotation3::new(axis.normalize() * rng.gen_range(0.0..std::f64::consts::PI))
}

/// Random fully observed instance with `n` knots: irregular spacing,
/// smooth motion plus noise, anisotropic covariances, random `qc`.
pub fn random_instance(seed: u64, n: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offsets = vec![0.0];
    for _ in 1..n {
        let dt = rng.gen_range(0.05..0.5);
        offsets.push(offsets.last().unwrap() + dt);
    }
    let base = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let drift = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let omega: f64 = rng.gen_range(0.2..2.0);
    let observations = offsets
        .iter()
        .map(|&t| {
            let rot = random_rotation(&mut rng);
            let sig = Vector3::new(rng.gen_range(0.005..0.1), rng.gen_range(0.005..0.1), rng.gen_range(0.005..0.1));
            let r = rot.matrix() * Matrix3::from_diagonal(&sig.map(|s| s * s)) * rot.matrix().transpose();
            let r = (r + r.transpose()) * 0.5;
            let truth = base + drift * t + Vector3::new((omega * t).sin(), (omega * t).cos(), 0.5 * (2.0 * omega * t).sin());
            let noise = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            Some((truth + noise.component_mul(&sig), r))
        })
        .collect::<Vec<_>>();

    let qc = Matrix3::identity() * rng.gen_range(0.1..10.0);
    let first = observations[0].unwrap().0;
    let mut initial_mean = S9::zeros();
    initial_mean.fixed_rows_mut::<3>(0).copy_from(&first);
    let v = PriorSettings::default().initial_variance;
    let initial_cov = M9::from_diagonal(&S9::from_fn(|i, _| v[i / 3]));
    Instance {
        offsets,
        observations,
        qc,
        initial_mean,
        initial_cov,
    }
}

pub fn max_abs_diff(a: &[S9], b: &[S9]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).amax())
        .fold(0.0, f64::max)
}

/// Simulated pair at the reference protocol with `seed` and `noise_sigma`.
pub fn sim_config(seed: u64, noise_sigma: f64) -> trackcal::sim::SimConfig {
    trackcal::sim::SimConfig {
        trajectory_seed: seed,
        noise_sigma,
        ..Default::default()
    }
}

/// Regressed sensor-1 and sensor-2 trajectories of a dataset, default prior.
pub fn regress_dataset(data: &trackcal::sim::SimDataset) -> (trackcal::gp::GpTrajectory, trackcal::gp::GpTrajectory) {
    trackcal::pipeline::regress_pair(&data.sensor1, &data.sensor2, &Default::default()).unwrap()
}

/// Copy of `data` with `transform` applied to every measurement position
/// (covariances rotated along).
pub fn transform_set(data: &MeasurementSet, rotation: &Rotation3<f64>, translation: &Vector3<f64>) -> MeasurementSet {
    let ms = data
        .measurements()
        .iter()
        .map(|m| {
            let r = rotation.matrix() * m.noise_cov * rotation.matrix().transpose();
            Measurement::new(m.time, rotation * m.position + translation, (r + r.transpose()) * 0.5).unwrap()
        })
        .collect();
    MeasurementSet::new(data.sensor_id(), ms).unwrap()
}
