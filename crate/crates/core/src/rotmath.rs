//! Quaternion and SO(3) algebra.
//!
//! Quaternions are stored as `(w, x, y, z)` and kept on the canonical
//! hemisphere (`w >= 0`, ties broken by the first nonzero vector component)
//! after every construction, so two quaternions describing the same rotation
//! compare equal component-wise. Tangent vectors are axis-angle coordinates
//! with the left-perturbation convention `R = exp(ε^) R̄`.
//!
//! Differential quaternions are body-frame increments:
//! `q_t = q_{t-1} ⊗ q̇_t`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3, Vector4};

use crate::error::{invalid, Result};

/// Lie-algebra coordinate of a rotation, radians.
pub type TangentVector = Vector3<f64>;

/// 3×3 rotation matrix.
pub type RotationMatrix = Matrix3<f64>;

const SMALL_ANGLE: f64 = 1e-8;

/// A unit quaternion on the canonical hemisphere.
#[derive(Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl fmt::Debug for UnitQuaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Quat({:.9}, {:.9}, {:.9}, {:.9})", self.w, self.x, self.y, self.z)
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes `(w, x, y, z)` and moves it to the canonical hemisphere.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        if !(w.is_finite() && x.is_finite() && y.is_finite() && z.is_finite()) {
            return invalid(format!("non-finite quaternion ({w}, {x}, {y}, {z})"));
        }
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n < 1e-300 {
            return invalid("zero-norm quaternion");
        }
        Ok(Self::canonical(w / n, x / n, y / n, z / n))
    }

    /// Builds from components that are already unit-norm up to rounding.
    /// Renormalizes and canonicalizes; the caller guarantees finiteness.
    pub(crate) fn from_unit_parts(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self::canonical(w / n, x / n, y / n, z / n)
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        let flip = if w != 0.0 {
            w < 0.0
        } else if x != 0.0 {
            x < 0.0
        } else if y != 0.0 {
            y < 0.0
        } else {
            z < 0.0
        };
        if flip {
            Self { w: -w, x: -x, y: -y, z: -z }
        } else {
            Self { w, x, y, z }
        }
    }

    pub fn from_array(q: [f64; 4]) -> Result<Self> {
        Self::new(q[0], q[1], q[2], q[3])
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if !(n > 0.0) || !angle.is_finite() {
            return invalid("axis-angle requires a nonzero finite axis and finite angle");
        }
        Ok(exp_so3(&(axis * (angle / n))))
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Inverse rotation (the conjugate, re-canonicalized).
    pub fn inverse(&self) -> Self {
        Self::canonical(self.w, -self.x, -self.y, -self.z)
    }

    pub fn to_rotation_matrix(&self) -> RotationMatrix {
        quat_to_rotmat(self)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        quat_to_rotmat(self) * v
    }

    /// Geodesic angle to `other`, in `[0, π]`.
    pub fn angle_to(&self, other: &UnitQuaternion) -> f64 {
        let rel = quat_mul(self, &other.inverse());
        2.0 * rel.vector().norm().atan2(rel.w.abs())
    }

    /// Largest absolute component difference; rotations equal up to
    /// hemisphere compare on the canonical representatives.
    pub fn max_abs_diff(&self, other: &UnitQuaternion) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;
    fn mul(self, rhs: UnitQuaternion) -> UnitQuaternion {
        quat_mul(&self, &rhs)
    }
}

/// Raw Hamilton product on `(w, x, y, z)` arrays.
pub(crate) fn hamilton(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Hamilton product `a ⊗ b`, renormalized and canonicalized.
pub fn quat_mul(a: &UnitQuaternion, b: &UnitQuaternion) -> UnitQuaternion {
    let [w, x, y, z] = hamilton(a.to_array(), b.to_array());
    UnitQuaternion::from_unit_parts(w, x, y, z)
}

/// Exponential map from the tangent space to a unit quaternion.
pub fn exp_so3(eps: &TangentVector) -> UnitQuaternion {
    let theta = eps.norm();
    let (w, s) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 8.0, 0.5 - t2 / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    UnitQuaternion::from_unit_parts(w, s * eps.x, s * eps.y, s * eps.z)
}

/// Logarithm map on the principal branch, `‖ε‖ ≤ π`.
pub fn log_so3(q: &UnitQuaternion) -> TangentVector {
    // canonical hemisphere already gives w >= 0
    let v = q.vector();
    let n = v.norm();
    let w = q.w;
    if n < SMALL_ANGLE {
        // atan2(n, w) / n ≈ 1/w − n²/(3w³)
        let scale = 2.0 * (1.0 / w - n * n / (3.0 * w * w * w));
        v * scale
    } else {
        v * (2.0 * n.atan2(w) / n)
    }
}

/// Skew-symmetric matrix with `hat(ε) v = ε × v`.
pub fn hat(eps: &TangentVector) -> Matrix3<f64> {
    Matrix3::new(0.0, -eps.z, eps.y, eps.z, 0.0, -eps.x, -eps.y, eps.x, 0.0)
}

/// Inverse of [`hat`]; rejects matrices that are not skew-symmetric.
pub fn vee(m: &Matrix3<f64>) -> Result<TangentVector> {
    let asym = (m + m.transpose()).norm();
    if !(asym < 1e-9) {
        return invalid(format!("vee of non-skew matrix (‖M + Mᵀ‖ = {asym:e})"));
    }
    Ok(Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]))
}

/// Differential quaternion `q̇ = q_prev⁻¹ ⊗ q_curr`.
pub fn diff_quat(q_prev: &UnitQuaternion, q_curr: &UnitQuaternion) -> UnitQuaternion {
    quat_mul(&q_prev.inverse(), q_curr)
}

/// Cumulative product `q_t = q_{t-1} ⊗ q̇_t`; the output excludes `q0`.
pub fn integrate_diffs(q0: &UnitQuaternion, diffs: &[UnitQuaternion]) -> Vec<UnitQuaternion> {
    let mut cur = *q0;
    diffs
        .iter()
        .map(|d| {
            cur = quat_mul(&cur, d);
            cur
        })
        .collect()
}

/// Weighted quaternion average: principal eigenvector of `Q Qᵀ` with
/// `Q = [w₁q₁, …, wₙqₙ]`.
///
/// Columns are scaled by the weights themselves, so the eigen-problem sees
/// squared weights. Inputs are aligned to the hemisphere of the first
/// quaternion before stacking.
pub fn weighted_quat_mean(qs: &[UnitQuaternion], weights: &[f64]) -> Result<UnitQuaternion> {
    if qs.is_empty() || qs.len() != weights.len() {
        return invalid(format!(
            "weighted mean needs matching nonempty inputs (got {} quaternions, {} weights)",
            qs.len(),
            weights.len()
        ));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return invalid("weights must be finite and nonnegative");
    }
    if !weights.iter().any(|w| *w > 0.0) {
        return invalid("all weights are zero");
    }
    let first = Vector4::from(qs[0].to_array());
    let mut m = Matrix4::zeros();
    for (q, w) in qs.iter().zip(weights) {
        let mut v = Vector4::from(q.to_array());
        if v.dot(&first) < 0.0 {
            v = -v;
        }
        let col = v * *w;
        m += col * col.transpose();
    }
    let eig = SymmetricEigen::new(m);
    let (best, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &l)| if l > acc.1 { (i, l) } else { acc });
    let v = eig.eigenvectors.column(best);
    UnitQuaternion::new(v[0], v[1], v[2], v[3])
}

pub fn quat_to_rotmat(q: &UnitQuaternion) -> RotationMatrix {
    let [w, x, y, z] = q.to_array();
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, xz, yz) = (x * y, x * z, y * z);
    let (wx, wy, wz) = (w * x, w * y, w * z);
    Matrix3::new(
        1.0 - 2.0 * (yy + zz),
        2.0 * (xy - wz),
        2.0 * (xz + wy),
        2.0 * (xy + wz),
        1.0 - 2.0 * (xx + zz),
        2.0 * (yz - wx),
        2.0 * (xz - wy),
        2.0 * (yz + wx),
        1.0 - 2.0 * (xx + yy),
    )
}

/// Intrinsic Z-Y-X Euler angles `(yaw, pitch, roll)` with
/// `R = Rz(yaw) Ry(pitch) Rx(roll)`.
///
/// At gimbal lock the pitch is clamped to ±π/2 and roll is set to 0.
pub fn quat_to_euler_zyx(q: &UnitQuaternion) -> Vector3<f64> {
    let [w, x, y, z] = q.to_array();
    let sinp = 2.0 * (w * y - z * x);
    if sinp.abs() >= 1.0 - 1e-12 {
        let pitch = (PI / 2.0).copysign(sinp);
        let r = quat_to_rotmat(q);
        let yaw = (-r[(0, 1)]).atan2(r[(1, 1)]);
        return Vector3::new(yaw, pitch, 0.0);
    }
    let roll = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
    let pitch = sinp.asin();
    let yaw = (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z));
    Vector3::new(yaw, pitch, roll)
}

/// Inverse of [`quat_to_euler_zyx`].
pub fn euler_zyx_to_quat(angles: &Vector3<f64>) -> UnitQuaternion {
    let (yaw, pitch, roll) = (angles.x, angles.y, angles.z);
    let qz = [(yaw / 2.0).cos(), 0.0, 0.0, (yaw / 2.0).sin()];
    let qy = [(pitch / 2.0).cos(), 0.0, (pitch / 2.0).sin(), 0.0];
    let qx = [(roll / 2.0).cos(), (roll / 2.0).sin(), 0.0, 0.0];
    let [w, x, y, z] = hamilton(hamilton(qz, qy), qx);
    UnitQuaternion::from_unit_parts(w, x, y, z)
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Determinant of the SO(3) left Jacobian, `2(1 − cos θ)/θ²`.
pub fn left_jacobian_det(eps: &TangentVector) -> f64 {
    let t = eps.norm();
    if t < 1e-4 {
        let t2 = t * t;
        1.0 - t2 / 12.0 + t2 * t2 / 360.0
    } else {
        2.0 * (1.0 - t.cos()) / (t * t)
    }
}
