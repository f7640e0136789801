//! Rotations, rigid transforms and rotation-axis extraction.
//!
//! Everything here is generic over [`Scalar`] so the same code runs in `f32`
//! and `f64`. Transforms follow the homogeneous convention `p' = R p + t`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::ops::Mul;

pub type Vec3<T> = Vector3<T>;

/// Below this angle (rad) a rotation is treated as identity and has no axis.
pub const ANGLE_EPS: f64 = 1e-8;

/// Orthonormality residual above which rotations are projected back onto SO(3).
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// Residual above which a matrix is rejected instead of projected.
const ACCEPT_TOL: f64 = 1e-6;

/// Unit-norm direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitAxis<T: Scalar>(Vector3<T>);

impl<T: Scalar> UnitAxis<T> {
    /// Wraps `v`, which must already be unit length within `1e-12`.
    pub fn new(v: Vector3<T>) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || (n - T::one()).abs() > T::tol(1e-12) {
            return Err(Error::InvalidArgument(format!(
                "axis must be unit length, got norm {n}"
            )));
        }
        Ok(Self(v))
    }

    /// Normalizes `v`; fails on zero or non-finite input.
    pub fn normalize(v: Vector3<T>) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n <= T::tolerance_floor() {
            return Err(Error::InvalidArgument(
                "cannot normalize a zero or non-finite vector".into(),
            ));
        }
        Ok(Self(v / n))
    }

    pub fn x() -> Self {
        Self(Vector3::x())
    }

    pub fn y() -> Self {
        Self(Vector3::y())
    }

    pub fn z() -> Self {
        Self(Vector3::z())
    }

    #[inline]
    pub fn as_vector(&self) -> &Vector3<T> {
        &self.0
    }

    #[inline]
    pub fn into_inner(self) -> Vector3<T> {
        self.0
    }

    /// Angle between the lines spanned by two axes, in `[0, π/2]`.
    pub fn line_angle(&self, other: &Self) -> T {
        let c = self.0.dot(&other.0).abs();
        let s = self.0.cross(&other.0).norm();
        s.atan2(c)
    }
}

/// Proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3<T: Scalar>(Matrix3<T>);

impl<T: Scalar> Default for Rotation3<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Scalar> Rotation3<T> {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Accepts `m` if it is a rotation up to `1e-6`; small residuals are
    /// projected onto the nearest rotation.
    pub fn from_matrix(m: Matrix3<T>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("rotation has non-finite entries".into()));
        }
        let residual = orthonormality_residual(&m);
        if residual > T::tol(ACCEPT_TOL) || m.determinant() <= T::zero() {
            return Err(Error::InvalidArgument(format!(
                "matrix is not a proper rotation (orthonormality residual {residual}, det {})",
                m.determinant()
            )));
        }
        let r = Self(m);
        Ok(if residual > T::tol(ORTHONORMAL_TOL) {
            r.renormalized()
        } else {
            r
        })
    }

    /// Wraps `m` without any check.
    pub fn from_matrix_unchecked(m: Matrix3<T>) -> Self {
        Self(m)
    }

    /// Nearest rotation to an arbitrary 3x3 matrix (polar decomposition).
    pub fn nearest(m: &Matrix3<T>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("3x3 SVD always yields U");
        let v_t = svd.v_t.expect("3x3 SVD always yields V^T");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < T::zero() {
            d[(2, 2)] = -T::one();
        }
        Self(u * d * v_t)
    }

    /// Rodrigues formula.
    pub fn from_axis_angle(axis: &UnitAxis<T>, angle: T) -> Self {
        let a = axis.as_vector();
        let k = a.cross_matrix();
        let (s, c) = angle.sin_cos();
        Self(Matrix3::identity() + k * s + k * k * (T::one() - c))
    }

    pub fn about_x(angle: T) -> Self {
        Self::from_axis_angle(&UnitAxis::x(), angle)
    }

    pub fn about_y(angle: T) -> Self {
        Self::from_axis_angle(&UnitAxis::y(), angle)
    }

    pub fn about_z(angle: T) -> Self {
        Self::from_axis_angle(&UnitAxis::z(), angle)
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix3<T> {
        &self.0
    }

    #[inline]
    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    #[inline]
    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    #[inline]
    pub fn rotate(&self, v: &Vector3<T>) -> Vector3<T> {
        self.0 * v
    }

    /// `max |RᵀR − I|` entrywise, combined with `|det R − 1|`.
    pub fn orthonormality_residual(&self) -> T {
        orthonormality_residual(&self.0)
    }

    pub fn renormalized(&self) -> Self {
        Self::nearest(&self.0)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> T {
        let (s, c) = self.sin_cos_angle();
        s.atan2(c)
    }

    /// Angle of `selfᵀ · other`.
    pub fn angle_to(&self, other: &Self) -> T {
        (self.transpose() * *other).angle()
    }

    fn skew_part(&self) -> Vector3<T> {
        let m = &self.0;
        let half = T::lit(0.5);
        Vector3::new(
            (m[(2, 1)] - m[(1, 2)]) * half,
            (m[(0, 2)] - m[(2, 0)]) * half,
            (m[(1, 0)] - m[(0, 1)]) * half,
        )
    }

    fn sin_cos_angle(&self) -> (T, T) {
        let c = (self.0.trace() - T::one()) * T::lit(0.5);
        (self.skew_part().norm(), c)
    }

    /// Rotation axis and angle `θ ∈ (0, π]`.
    ///
    /// For half-turns the axis sign is ambiguous; it is canonicalized so that
    /// the first non-negligible component is positive.
    pub fn axis_angle(&self) -> Result<(UnitAxis<T>, T)> {
        let skew = self.skew_part();
        let (s, c) = self.sin_cos_angle();
        let angle = s.atan2(c);
        if angle <= T::lit(ANGLE_EPS) {
            return Err(Error::DegenerateRotation {
                angle: angle.as_f64(),
            });
        }
        if angle <= T::frac_pi_2() {
            return Ok((UnitAxis(skew / s), angle));
        }
        // Large angles: a aᵀ = (sym(R) − cos θ I) / (1 − cos θ) is well conditioned.
        let sym = (self.0 + self.0.transpose()) * T::lit(0.5);
        let outer = (sym - Matrix3::identity() * c) / (T::one() - c);
        let mut best = 0;
        for i in 1..3 {
            if outer[(i, i)] > outer[(best, best)] {
                best = i;
            }
        }
        let mut axis = outer.column(best).into_owned();
        axis /= axis.norm();
        if s > T::tol(1e-9) {
            if axis.dot(&skew) < T::zero() {
                axis = -axis;
            }
        } else {
            let lead = axis
                .iter()
                .copied()
                .find(|v| v.abs() > T::tol(1e-12))
                .unwrap_or_else(T::one);
            if lead < T::zero() {
                axis = -axis;
            }
        }
        Ok((UnitAxis(axis), angle))
    }

    pub fn cast<U: Scalar>(&self) -> Rotation3<U> {
        Rotation3(self.0.map(|v| U::lit(v.as_f64())))
    }
}

fn orthonormality_residual<T: Scalar>(m: &Matrix3<T>) -> T {
    let e = m.transpose() * m - Matrix3::identity();
    let off = e.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    off.max((m.determinant() - T::one()).abs())
}

impl<T: Scalar> Mul for Rotation3<T> {
    type Output = Rotation3<T>;

    fn mul(self, rhs: Self) -> Self {
        let r = Rotation3(self.0 * rhs.0);
        if r.orthonormality_residual() > T::tol(ORTHONORMAL_TOL) {
            r.renormalized()
        } else {
            r
        }
    }
}

impl<T: Scalar> Mul<Vector3<T>> for Rotation3<T> {
    type Output = Vector3<T>;

    fn mul(self, rhs: Vector3<T>) -> Vector3<T> {
        self.0 * rhs
    }
}

/// Rigid-body transform `ᴬH_B`: maps coordinates in frame B to frame A.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T: Scalar> {
    pub rotation: Rotation3<T>,
    pub translation: Vector3<T>,
}

impl<T: Scalar> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Scalar> RigidTransform<T> {
    pub fn new(rotation: Rotation3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<T>) -> Self {
        Self::new(Rotation3::identity(), t)
    }

    pub fn from_rotation(r: Rotation3<T>) -> Self {
        Self::new(r, Vector3::zeros())
    }

    /// `self · other` as 4x4 matrices.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation.rotate(&other.translation) + self.translation,
        )
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -rt.rotate(&self.translation))
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<T> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        h
    }

    pub fn cast<U: Scalar>(&self) -> RigidTransform<U> {
        RigidTransform::new(
            self.rotation.cast(),
            self.translation.map(|v| U::lit(v.as_f64())),
        )
    }
}

impl<T: Scalar> Mul for RigidTransform<T> {
    type Output = RigidTransform<T>;

    fn mul(self, rhs: Self) -> Self {
        self.compose(&rhs)
    }
}

/// Rotation from an axis given as a plain vector; the axis must be unit length.
pub fn rot_from_axis_angle<T: Scalar>(axis: &Vector3<T>, angle: T) -> Result<Rotation3<T>> {
    Ok(Rotation3::from_axis_angle(&UnitAxis::new(*axis)?, angle))
}

pub fn axis_of<T: Scalar>(r: &Rotation3<T>) -> Result<(UnitAxis<T>, T)> {
    r.axis_angle()
}

pub fn compose<T: Scalar>(h1: &RigidTransform<T>, h2: &RigidTransform<T>) -> RigidTransform<T> {
    h1.compose(h2)
}

pub fn apply<T: Scalar>(h: &RigidTransform<T>, p: &Vector3<T>) -> Vector3<T> {
    h.apply(p)
}

// JSON form: {"rotation": [[r00, r01, r02], [..], [..]], "translation": [x, y, z]}
#[derive(Serialize, Deserialize)]
struct TransformRepr<T> {
    rotation: [[T; 3]; 3],
    translation: [T; 3],
}

impl<T: Scalar + Serialize> Serialize for Rotation3<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let m = &self.0;
        let rows: [[T; 3]; 3] =
            std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]));
        rows.serialize(s)
    }
}

impl<'de, T: Scalar + Deserialize<'de>> Deserialize<'de> for Rotation3<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[T; 3]; 3]>::deserialize(d)?;
        Rotation3::from_matrix(Matrix3::from_fn(|i, j| rows[i][j]))
            .map_err(serde::de::Error::custom)
    }
}

impl<T: Scalar + Serialize> Serialize for RigidTransform<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let m = self.rotation.matrix();
        TransformRepr {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)])),
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar + Deserialize<'de>> Deserialize<'de> for RigidTransform<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = TransformRepr::<T>::deserialize(d)?;
        let rotation = Rotation3::from_matrix(Matrix3::from_fn(|i, j| repr.rotation[i][j]))
            .map_err(serde::de::Error::custom)?;
        let [x, y, z] = repr.translation;
        Ok(RigidTransform::new(rotation, Vector3::new(x, y, z)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn assert_mat_close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) {
        let d = (a - b).abs().max();
        assert!(d <= tol, "matrices differ by {d}:\n{a}\n{b}");
    }

    fn handeye_rotation() -> Rotation3<f64> {
        Rotation3::from_matrix(Matrix3::new(
            0.0, 0.0, -1.0, //
            0.0, -1.0, 0.0, //
            -1.0, 0.0, 0.0,
        ))
        .unwrap()
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rot_from_axis_angle(&Vector3::z(), FRAC_PI_2).unwrap();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_mat_close(r.matrix(), &expected, 1e-15);
    }

    #[test]
    fn zero_angle_is_identity() {
        let a = Vector3::new(1.0, 2.0, -0.5).normalize();
        let r = rot_from_axis_angle(&a, 0.0).unwrap();
        assert_mat_close(r.matrix(), &Matrix3::identity(), 0.0);
    }

    #[test]
    fn half_turn_about_x() {
        let r = Rotation3::<f64>::about_x(PI);
        assert_mat_close(r.matrix(), &Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)), 1e-15);
    }

    #[test]
    fn non_unit_axis_is_rejected() {
        let err = rot_from_axis_angle(&Vector3::new(0.0, 0.0, 2.0), 1.0).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn axis_round_trip_quarter_turn() {
        let r = Rotation3::<f64>::about_z(FRAC_PI_2);
        let (a, th) = axis_of(&r).unwrap();
        assert!((a.as_vector() - Vector3::z()).norm() < 1e-12);
        assert!((th - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn identity_has_no_axis() {
        let err = axis_of(&Rotation3::<f64>::identity()).unwrap_err();
        assert!(matches!(err, Error::DegenerateRotation { .. }));
    }

    #[test]
    fn half_turn_axis_sign_is_canonical() {
        let neg = Vector3::new(-1.0, 2.0, 0.5).normalize();
        let r = rot_from_axis_angle(&neg, PI).unwrap();
        let (a, th) = r.axis_angle().unwrap();
        assert!((th - PI).abs() < 1e-12);
        assert!((a.as_vector() + neg).norm() < 1e-9);
        assert!(a.as_vector().x > 0.0);
        assert_mat_close(Rotation3::from_axis_angle(&a, th).matrix(), r.matrix(), 1e-9);
    }

    #[test]
    fn fixture_rotation_maps_x_to_minus_z() {
        let h = RigidTransform::from_rotation(handeye_rotation());
        let p = apply(&h, &Vector3::new(1.0, 0.0, 0.0));
        assert!((p - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn identity_and_translation_apply() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(RigidTransform::identity().apply(&p), p);
        let h = RigidTransform::from_translation(Vector3::new(5.0, 0.0, 0.0));
        assert_eq!(h.apply(&Vector3::zeros()), Vector3::new(5.0, 0.0, 0.0));
    }

    #[test]
    fn compose_translations_and_inverse() {
        let a = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let b = RigidTransform::from_translation(Vector3::new(0.0, 2.0, 0.0));
        assert_eq!(compose(&a, &b).translation, Vector3::new(1.0, 2.0, 0.0));

        let h = RigidTransform::new(
            rot_from_axis_angle(&Vector3::new(1.0, 1.0, 1.0).normalize(), 0.7).unwrap(),
            Vector3::new(907.5, 97.0, 40.0),
        );
        assert_eq!(compose(&h, &RigidTransform::identity()), h);
        let id = compose(&h, &h.inverse());
        assert_mat_close(id.rotation.matrix(), &Matrix3::identity(), 1e-12);
        assert!(id.translation.norm() < 1e-12);
    }

    #[test]
    fn homogeneous_matrix_matches_apply() {
        let h = RigidTransform::new(Rotation3::about_y(0.3), Vector3::new(1.0, -2.0, 3.0));
        let p = Vector3::new(0.4, 0.5, 0.6);
        let ph = h.to_homogeneous() * p.push(1.0);
        assert!((ph.xyz() - h.apply(&p)).norm() < 1e-15);
        assert_eq!(ph.w, 1.0);
    }

    #[test]
    fn from_matrix_rejects_reflections_and_projects_noise() {
        let refl = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Rotation3::from_matrix(refl).is_err());
        let mut m = *Rotation3::<f64>::about_z(0.3).matrix();
        m[(0, 0)] += 1e-8;
        let r = Rotation3::from_matrix(m).unwrap();
        assert!(r.orthonormality_residual() < 1e-12);
    }

    #[test]
    fn json_shape() {
        let h = RigidTransform::new(handeye_rotation(), Vector3::new(907.5, 97.0, 40.0));
        let s = serde_json::to_string(&h).unwrap();
        assert_eq!(
            s,
            r#"{"rotation":[[0.0,0.0,-1.0],[0.0,-1.0,0.0],[-1.0,0.0,0.0]],"translation":[907.5,97.0,40.0]}"#
        );
        let back: RigidTransform<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn single_precision_round_trip() {
        let r = Rotation3::<f32>::about_x(0.4) * Rotation3::about_z(-1.1);
        let (a, th) = r.axis_angle().unwrap();
        let back = Rotation3::from_axis_angle(&a, th);
        assert!((back.matrix() - r.matrix()).abs().max() < 1e-5);
    }
}
