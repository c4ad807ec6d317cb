//! Rotation and unit-sphere algebra.
//!
//! Quaternions follow the Hamilton convention and represent passive frame
//! attitudes: `R(q)` maps vectors from the child frame into the parent frame
//! (body to world for the vehicle attitude, feature to radar for a bearing).
//!
//! A feature bearing is stored as a full rotation `q_f` taking `e1` onto the
//! bearing direction. The rotation about the bearing axis is a gauge freedom;
//! [`bearing_quat`] fixes it by taking the shortest rotation from `e1`.
//! Bearing perturbations live in the plane spanned by the columns of
//! `N(q_f) = R(q_f) [e2 e3]` and are applied by rotating `q_f` with the
//! rotation vector `N(q_f) * delta`.

use nalgebra::{Matrix3, Matrix3x2, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Quat = UnitQuaternion<f64>;

/// Cross-product matrix: `skew(v) * u == v.cross(&u)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Hamilton product `a * b`, renormalized.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    Quat::new_normalize(a.into_inner() * b.into_inner())
}

pub fn quat_to_rotmat(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
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

/// SO(3) exponential of a rotation vector (radians), as a unit quaternion.
pub fn exp_so3(phi: &Vector3<f64>) -> Quat {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (w, s) = if theta < 1e-4 {
        // Taylor terms beyond these are below 1e-18 for theta < 1e-4.
        (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
    } else {
        ((0.5 * theta).cos(), (0.5 * theta).sin() / theta)
    };
    Quat::new_normalize(nalgebra::Quaternion::new(w, s * phi.x, s * phi.y, s * phi.z))
}

/// SO(3) logarithm: the rotation vector with angle in `[0, pi]`.
pub fn log_so3(q: &Quat) -> Vector3<f64> {
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let n = v.norm();
    let scale = if n < 1e-8 {
        2.0 / w * (1.0 - n * n / (3.0 * w * w))
    } else {
        2.0 * n.atan2(w) / n
    };
    v * scale
}

/// Rotation angle (radians) of a rotation matrix, robust near 0 and pi.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let skew_part = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin2 = skew_part.norm();
    let cos2 = r.trace() - 1.0;
    sin2.atan2(cos2)
}

/// Unit bearing for a radar azimuth/elevation pair.
pub fn bearing_from_angles(azimuth: f64, elevation: f64) -> Vector3<f64> {
    let (sa, ca) = azimuth.sin_cos();
    let (se, ce) = elevation.sin_cos();
    Vector3::new(ce * ca, ce * sa, se)
}

/// Inverse of [`bearing_from_angles`] for a nonzero vector.
pub fn angles_from_vector(p: &Vector3<f64>) -> (f64, f64) {
    let azimuth = p.y.atan2(p.x);
    let elevation = p.z.atan2((p.x * p.x + p.y * p.y).sqrt());
    (azimuth, elevation)
}

/// The bearing `R(q_f) e1`.
pub fn bearing(q_f: &Quat) -> Vector3<f64> {
    let r = quat_to_rotmat(q_f);
    r.column(0).into_owned()
}

/// `N(q_f) = R(q_f) [e2 e3]`; orthonormal columns spanning the bearing's tangent plane.
pub fn nq_projection(q_f: &Quat) -> Matrix3x2<f64> {
    let r = quat_to_rotmat(q_f);
    r.fixed_view::<3, 2>(0, 1).into_owned()
}

/// Shortest rotation taking unit vector `from` onto unit vector `to`, as a rotation vector.
pub fn rotation_between(from: &Vector3<f64>, to: &Vector3<f64>) -> Result<Vector3<f64>> {
    let axis = from.cross(to);
    let s = axis.norm();
    let c = from.dot(to);
    if c < 0.0 && s < 1e-12 {
        return Err(Error::DegenerateGeometry(
            "antipodal bearings have no unique shortest rotation".into(),
        ));
    }
    if s == 0.0 {
        return Ok(Vector3::zeros());
    }
    Ok(axis * (s.atan2(c) / s))
}

/// Canonical bearing quaternion for a direction: the shortest rotation from `e1`.
///
/// The exactly antipodal direction `-e1` uses a half turn about `e3`.
pub fn bearing_quat(u: &Vector3<f64>) -> Quat {
    let u = u.normalize();
    match rotation_between(&Vector3::x(), &u) {
        Ok(phi) => exp_so3(&phi),
        Err(_) => exp_so3(&Vector3::new(0.0, 0.0, std::f64::consts::PI)),
    }
}

/// Retraction on the bearing manifold: rotate `q_f` by the rotation vector `N(q_f) delta`.
pub fn bearing_boxplus(q_f: &Quat, delta: &Vector2<f64>) -> Quat {
    if delta.x == 0.0 && delta.y == 0.0 {
        return *q_f;
    }
    let phi = nq_projection(q_f) * delta;
    quat_mul(&exp_so3(&phi), q_f)
}

/// Local coordinates of bearing `a` relative to bearing `b`: `b ⊞ result` has the bearing of `a`.
pub fn bearing_boxminus(a: &Quat, b: &Quat) -> Result<Vector2<f64>> {
    let phi = rotation_between(&bearing(b), &bearing(a))?;
    Ok(nq_projection(b).transpose() * phi)
}

/// Tangent residual of a measured unit direction against a bearing quaternion.
pub fn bearing_residual(measured: &Vector3<f64>, predicted: &Quat) -> Result<Vector2<f64>> {
    let phi = rotation_between(&bearing(predicted), measured)?;
    Ok(nq_projection(predicted).transpose() * phi)
}
