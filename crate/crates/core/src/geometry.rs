//! Rigid-body geometry on SE(3).
//!
//! Rotations are stored as 3×3 matrices. Tangent vectors use the ordering
//! `[ω; ρ]`: rotation first, then translation. Exponential and logarithm maps
//! are closed form with series fallbacks near zero angle, and the left/right
//! Jacobians used by the pose-graph solver are exact.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use thiserror::Error;

/// Frobenius drift `‖RᵀR − I‖` above which a rotation is re-orthonormalized.
pub const ORTHONORMAL_DRIFT: f64 = 1e-12;

/// Angles below this use the Taylor branch of `exp`.
const EXP_TAYLOR_ANGLE: f64 = 1e-7;
/// Distance from π at which `log` refuses to pick an axis.
const LOG_PI_GUARD: f64 = 1e-9;
/// Distance from π below which the axis is read off the symmetric part.
const LOG_NEAR_PI: f64 = 1e-5;
/// Angles below which Jacobian coefficients switch to their series.
const JACOBIAN_SERIES_ANGLE: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle is π; the logarithm axis is ambiguous")]
    DegenerateAngle,
    #[error("rotation has determinant {0:.6}, expected +1")]
    NotProperRotation(f64),
    #[error("pose contains non-finite values")]
    NonFinite,
}

/// Element of the SE(3) tangent space, `[ω; ρ]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Twist(Vector6::new(
            rotation.x,
            rotation.y,
            rotation.z,
            translation.x,
            translation.y,
            translation.z,
        ))
    }

    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Twist(Vector6::from_row_slice(v))
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn scale(&self, s: f64) -> Twist {
        Twist(self.0 * s)
    }
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, projecting `rotation` onto SO(3) when it has drifted.
    ///
    /// Rejects reflections and non-finite input.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let det = rotation.determinant();
        if det <= 0.0 {
            return Err(GeometryError::NotProperRotation(det));
        }
        Ok(Pose {
            rotation: reorthonormalize_if_drifted(rotation),
            translation,
        })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about a unit `axis` by `angle` radians, no translation.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Pose {
            rotation: so3_exp(&(axis.normalize() * angle)),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about z, the usual yaw of a ground vehicle.
    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    pub fn with_translation(mut self, translation: Vector3<f64>) -> Self {
        self.translation = translation;
        self
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: reorthonormalize_if_drifted(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Relative transform `self⁻¹ ∘ other`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn exp(xi: &Twist) -> Pose {
        let omega = xi.rotation();
        let rho = xi.translation();
        Pose {
            rotation: so3_exp(&omega),
            translation: so3_left_jacobian(&omega) * rho,
        }
    }

    /// Inverse of [`Pose::exp`] for rotation angles below π.
    pub fn log(&self) -> Result<Twist, GeometryError> {
        if std::f64::consts::PI - rotation_angle(&self.rotation) < LOG_PI_GUARD {
            return Err(GeometryError::DegenerateAngle);
        }
        Ok(self.log_unchecked())
    }

    /// Logarithm that picks one of the two valid axes at exactly π.
    pub(crate) fn log_unchecked(&self) -> Twist {
        let omega = so3_log(&self.rotation);
        let rho = so3_left_jacobian_inverse(&omega) * self.translation;
        Twist::new(omega, rho)
    }

    /// Screw interpolation `exp(s · log(self))`.
    pub fn interpolate(&self, s: f64) -> Pose {
        Pose::exp(&self.log_unchecked().scale(s))
    }

    /// Geodesic rotation angle in radians, `arccos((tr R − 1) / 2)`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// `‖RᵀR − I‖_F`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    /// Adjoint for the `[ω; ρ]` ordering: `T exp(ξ) T⁻¹ = exp(Ad_T ξ)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(hat(&self.translation) * self.rotation));
        ad
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 3×4 `[R | t]`, the layout of KITTI pose files.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major_3x4(v: &[f64; 12]) -> Result<Pose, GeometryError> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        Pose::new(rotation, translation)
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Skew-symmetric matrix with `hat(a) b = a × b`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

/// Rodrigues' formula.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = hat(omega);
    if theta < EXP_TAYLOR_ANGLE {
        return Matrix3::identity() + w + 0.5 * w * w;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * w + b * w * w
}

pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = 0.5 * vee(r).norm();
    sin.atan2(cos)
}

/// Rotation vector of `r`. At exactly π one of the two valid axes is returned.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let v = vee(r);
    let sin = 0.5 * v.norm();
    let theta = sin.atan2(cos);
    if theta < EXP_TAYLOR_ANGLE {
        return 0.5 * v;
    }
    if std::f64::consts::PI - theta > LOG_NEAR_PI {
        return v * (theta / (2.0 * sin));
    }
    // (R + Rᵀ)/2 − cos θ I = (1 − cos θ) a aᵀ
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
    let k = (0..3)
        .max_by(|&i, &j| sym[(i, i)].total_cmp(&sym[(j, j)]))
        .unwrap_or(0);
    let mut axis: Vector3<f64> = sym.column(k).into_owned() / (sym[(k, k)] * (1.0 - cos)).sqrt();
    axis.normalize_mut();
    if axis.dot(&v) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = hat(omega);
    let (a, b) = if theta < JACOBIAN_SERIES_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0 + t2 * t2 / 720.0, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    Matrix3::identity() + a * w + b * w * w
}

/// Inverse of the SO(3) left Jacobian; singular at θ = 2π only.
pub fn so3_left_jacobian_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = hat(omega);
    let c = if theta < JACOBIAN_SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / (theta * theta)
    };
    Matrix3::identity() - 0.5 * w + c * w * w
}

/// Coupling block of the SE(3) left Jacobian (translation rows, rotation columns).
fn se3_q(omega: &Vector3<f64>, rho: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = hat(omega);
    let p = hat(rho);
    let (c1, c2, c3) = if theta < JACOBIAN_SERIES_ANGLE {
        let t2 = theta * theta;
        (
            1.0 / 6.0 - t2 / 120.0,
            1.0 / 24.0 - t2 / 720.0,
            1.0 / 120.0 - t2 / 2520.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let wp = w * p;
    let pw = p * w;
    let wpw = w * p * w;
    0.5 * p
        + c1 * (wp + pw + wpw)
        + c2 * (w * wp + pw * w - 3.0 * wpw)
        + c3 * (wpw * w + w * wpw)
}

/// Left Jacobian of SE(3): `exp(ξ + δ) ≈ exp(J_l(ξ) δ) exp(ξ)`.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let omega = xi.rotation();
    let rho = xi.translation();
    let j = so3_left_jacobian(&omega);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&se3_q(&omega, &rho));
    out
}

/// Inverse of the SE(3) left Jacobian, via the block-triangular structure.
pub fn se3_left_jacobian_inverse(xi: &Twist) -> Matrix6<f64> {
    let omega = xi.rotation();
    let rho = xi.translation();
    let jinv = so3_left_jacobian_inverse(&omega);
    let q = se3_q(&omega, &rho);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-(jinv * q * jinv)));
    out
}

/// Inverse right Jacobian: `log(exp(ξ) exp(δ)) ≈ ξ + J_r⁻¹(ξ) δ`.
pub fn se3_right_jacobian_inverse(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian_inverse(&xi.scale(-1.0))
}

/// Nearest rotation in Frobenius norm (polar decomposition).
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Matrix3::identity();
    };
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    r
}

fn reorthonormalize_if_drifted(r: Matrix3<f64>) -> Matrix3<f64> {
    let drift = (r.transpose() * r - Matrix3::identity()).norm();
    if drift > ORTHONORMAL_DRIFT {
        project_to_so3(&r)
    } else {
        r
    }
}
