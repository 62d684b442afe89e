//! Rigid registration of time-aligned position correspondences.
//!
//! Estimates `R, t` minimising `sum ||a_i - R o_i - t||^2`, where `a_i` are
//! anchor positions and `o_i` the other sensor's positions at the aligned
//! times.

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, Rotation3, SymmetricEigen, UnitQuaternion, Vector3, Vector6};

use crate::error::{CalibError, Result};
use crate::registry::{Named, Registry};
use crate::temporal::{CorrespondencePair, MIN_CORRESPONDENCES};

pub const DEFAULT_REGISTRATION: &str = "svd";
/// Smallest accepted ratio of the second to the first singular value of the
/// centred anchor cloud.
pub const COLLINEARITY_THRESHOLD: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-10;

/// `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(CalibError::InvalidArgument("transform has non-finite entries".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if ortho > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(CalibError::InvalidArgument(format!(
                "rotation is not proper orthonormal (|R^T R - I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// From intrinsic Z-Y-X Euler angles `[z, y, x]` in degrees.
    pub fn from_euler_zyx_deg(angles: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: euler_zyx_deg_to_rotation(angles),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn euler_zyx_deg(&self) -> Vector3<f64> {
        rotation_to_euler_zyx_deg(&self.rotation)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self * other`, applying `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

pub fn apply(transform: &RigidTransform, point: &Vector3<f64>) -> Vector3<f64> {
    transform.apply(point)
}

/// `R = Rz(z) Ry(y) Rx(x)` for angles `[z, y, x]` in degrees.
pub fn euler_zyx_deg_to_rotation(angles: Vector3<f64>) -> Matrix3<f64> {
    let [z, y, x] = [angles[0].to_radians(), angles[1].to_radians(), angles[2].to_radians()];
    *Rotation3::from_euler_angles(x, y, z).matrix()
}

/// Inverse of [`euler_zyx_deg_to_rotation`], `[z, y, x]` in degrees with
/// `y` in [-90, 90].
pub fn rotation_to_euler_zyx_deg(rotation: &Matrix3<f64>) -> Vector3<f64> {
    let (x, y, z) = Rotation3::from_matrix_unchecked(*rotation).euler_angles();
    Vector3::new(z.to_degrees(), y.to_degrees(), x.to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    /// Degrees, `[z, y, x]`.
    pub euler_zyx: Vector3<f64>,
    /// Metres.
    pub rms_residual: f64,
    pub n_pairs: usize,
    pub collinearity: f64,
}

impl RegistrationResult {
    fn evaluate(transform: RigidTransform, anchor: &[Vector3<f64>], other: &[Vector3<f64>], collinearity: f64) -> Self {
        Self {
            transform,
            euler_zyx: transform.euler_zyx_deg(),
            rms_residual: (alignment_cost(&transform, anchor, other) / anchor.len() as f64).sqrt(),
            n_pairs: anchor.len(),
            collinearity,
        }
    }
}

/// `sum ||a_i - R o_i - t||^2`
pub fn alignment_cost(transform: &RigidTransform, anchor: &[Vector3<f64>], other: &[Vector3<f64>]) -> f64 {
    anchor
        .iter()
        .zip(other)
        .map(|(a, o)| (a - transform.apply(o)).norm_squared())
        .sum()
}

/// Ratio of the second to the first singular value of the centred cloud.
/// Zero for coincident or collinear points.
pub fn collinearity(points: &[Vector3<f64>]) -> f64 {
    let c = centroid(points);
    let scatter = points.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - c;
        acc + d * d.transpose()
    });
    let mut eig = SymmetricEigen::new(scatter).eigenvalues.map(|l| l.max(0.0));
    eig.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if eig[0] == 0.0 {
        0.0
    } else {
        (eig[1] / eig[0]).sqrt()
    }
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// `sum (o_i - o_bar)(a_i - a_bar)^T` and both centroids.
fn cross_covariance(anchor: &[Vector3<f64>], other: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>, Vector3<f64>) {
    let (ca, co) = (centroid(anchor), centroid(other));
    let h = anchor
        .iter()
        .zip(other)
        .fold(Matrix3::zeros(), |acc, (a, o)| acc + (o - co) * (a - ca).transpose());
    (h, ca, co)
}

/// Closed-form estimator of the rotation and translation.
pub trait RegistrationMethod: Named + Send + Sync {
    /// Inputs are non-empty, of equal length, and not collinear.
    fn estimate(&self, anchor: &[Vector3<f64>], other: &[Vector3<f64>]) -> Result<RigidTransform>;
}

/// Orthogonal decomposition of the cross-covariance with reflection
/// correction.
#[derive(Debug, Default, Clone, Copy)]
pub struct SvdRegistration;

impl Named for SvdRegistration {
    fn name(&self) -> &'static str {
        "svd"
    }
}

impl RegistrationMethod for SvdRegistration {
    fn estimate(&self, anchor: &[Vector3<f64>], other: &[Vector3<f64>]) -> Result<RigidTransform> {
        let (h, ca, co) = cross_covariance(anchor, other);
        let svd = h.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(CalibError::DegenerateGeometry("cross-covariance SVD failed".into())),
        };
        let v = v_t.transpose();
        let d = (v * u.transpose()).determinant().signum();
        let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
        Ok(RigidTransform {
            rotation,
            translation: ca - rotation * co,
        })
    }
}

/// Unit-quaternion eigenvector method.
#[derive(Debug, Default, Clone, Copy)]
pub struct QuaternionRegistration;

impl Named for QuaternionRegistration {
    fn name(&self) -> &'static str {
        "quaternion"
    }
}

impl RegistrationMethod for QuaternionRegistration {
    fn estimate(&self, anchor: &[Vector3<f64>], other: &[Vector3<f64>]) -> Result<RigidTransform> {
        let (s, ca, co) = cross_covariance(anchor, other);
        let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
        let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
        let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
        #[rustfmt::skip]
        let n = Matrix4::new(
            sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
            syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
            szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
            sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz,
        );
        let eig = SymmetricEigen::new(n);
        let best = eig.eigenvalues.imax();
        let q = eig.eigenvectors.column(best);
        let unit = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        let rotation = *unit.to_rotation_matrix().matrix();
        Ok(RigidTransform {
            rotation,
            translation: ca - rotation * co,
        })
    }
}

pub fn builtin_registrations() -> Registry<dyn RegistrationMethod> {
    let mut registry: Registry<dyn RegistrationMethod> = Registry::new("registration");
    registry.register(Box::new(SvdRegistration));
    registry.register(Box::new(QuaternionRegistration));
    registry
}

fn split(pairs: &[CorrespondencePair]) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    pairs
        .iter()
        .map(|p| (p.anchor_state.position, p.other_state.position))
        .unzip()
}

fn check_geometry(anchor: &[Vector3<f64>], other: &[Vector3<f64>]) -> Result<f64> {
    if anchor.len() != other.len() {
        return Err(CalibError::InvalidArgument(format!(
            "point sets differ in size ({} vs {})",
            anchor.len(),
            other.len()
        )));
    }
    if anchor.len() < MIN_CORRESPONDENCES {
        return Err(CalibError::InsufficientCorrespondences {
            found: anchor.len(),
            required: MIN_CORRESPONDENCES,
        });
    }
    if !anchor.iter().chain(other).all(|p| p.iter().all(|v| v.is_finite())) {
        return Err(CalibError::InvalidArgument("non-finite correspondence position".into()));
    }
    let ratio = collinearity(anchor);
    if !(ratio >= COLLINEARITY_THRESHOLD) {
        return Err(CalibError::DegenerateGeometry(format!(
            "anchor points are collinear (singular value ratio {ratio:e} < {COLLINEARITY_THRESHOLD:e})"
        )));
    }
    Ok(ratio)
}

/// Closed-form registration of raw point sets with the named method.
pub fn register_points(
    anchor: &[Vector3<f64>],
    other: &[Vector3<f64>],
    method: &dyn RegistrationMethod,
) -> Result<RegistrationResult> {
    let ratio = check_geometry(anchor, other)?;
    let transform = method.estimate(anchor, other)?;
    Ok(RegistrationResult::evaluate(transform, anchor, other, ratio))
}

pub fn register(pairs: &[CorrespondencePair]) -> Result<RegistrationResult> {
    register_with(pairs, &SvdRegistration)
}

pub fn register_with(pairs: &[CorrespondencePair], method: &dyn RegistrationMethod) -> Result<RegistrationResult> {
    let (anchor, other) = split(pairs);
    register_points(&anchor, &other, method)
}

pub fn refine(pairs: &[CorrespondencePair], init: &RigidTransform) -> Result<RegistrationResult> {
    let (anchor, other) = split(pairs);
    refine_points(&anchor, &other, init)
}

/// Levenberg-Marquardt on a left rotation-vector perturbation and the
/// translation. Only cost-decreasing steps are taken.
pub fn refine_points(
    anchor: &[Vector3<f64>],
    other: &[Vector3<f64>],
    init: &RigidTransform,
) -> Result<RegistrationResult> {
    let ratio = check_geometry(anchor, other)?;
    let init = RigidTransform::new(init.rotation, init.translation)?;

    let mut current = init;
    let mut cost = alignment_cost(&current, anchor, other);
    let mut damping = 1e-3;
    for _ in 0..200 {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (a, o) in anchor.iter().zip(other) {
            let ro = current.rotation * o;
            let e = a - ro - current.translation;
            // de/d(phi) = [R o]x, de/dt = -I
            let mut j = nalgebra::Matrix3x6::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&ro.cross_matrix());
            j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
            h += j.transpose() * j;
            g += j.transpose() * e;
        }
        if g.amax() == 0.0 {
            break;
        }
        let mut lhs = h;
        for k in 0..6 {
            lhs[(k, k)] += damping * h[(k, k)].max(1e-12);
        }
        let Some(step) = lhs.cholesky().map(|c| -c.solve(&g)) else {
            damping *= 10.0;
            continue;
        };
        let phi = step.fixed_rows::<3>(0).into_owned();
        let candidate = RigidTransform {
            rotation: *(Rotation3::new(phi) * Rotation3::from_matrix_unchecked(current.rotation)).matrix(),
            translation: current.translation + step.fixed_rows::<3>(3),
        };
        let next_cost = alignment_cost(&candidate, anchor, other);
        if next_cost < cost {
            let drop = (cost - next_cost) / cost;
            current = candidate;
            cost = next_cost;
            damping = (damping / 10.0).max(1e-15);
            if step.amax() < 1e-14 || drop < 1e-15 {
                break;
            }
        } else {
            damping *= 10.0;
            if step.amax() < 1e-14 || damping > 1e12 {
                break;
            }
        }
    }
    // re-project onto SO(3) to shed accumulated rounding
    let svd = current.rotation.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let projected = RigidTransform {
        rotation: u * v_t,
        translation: current.translation,
    };
    if alignment_cost(&projected, anchor, other) <= cost {
        current = projected;
    }
    Ok(RegistrationResult::evaluate(current, anchor, other, ratio))
}
