use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A proper rigid motion `x ↦ R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn from_rotation(r: Matrix3<f64>) -> Self {
        Self::new(r, Vector3::zeros())
    }

    /// Rotation about `axis` by `angle_deg` through the origin.
    pub fn from_axis_angle_deg(axis: Vector3<f64>, angle_deg: f64) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle_deg.to_radians());
        Self::from_rotation(*r.matrix())
    }

    /// Rotation vector in degrees (axis × angle) plus translation.
    pub fn from_rotation_vector_deg(rv_deg: Vector3<f64>, translation: Vector3<f64>) -> Self {
        let r = Rotation3::new(rv_deg.map(f64::to_radians));
        Self::new(*r.matrix(), translation)
    }

    pub fn rotation_vector_deg(&self) -> Vector3<f64> {
        let r = Rotation3::from_matrix_unchecked(self.rotation);
        r.scaled_axis().map(f64::to_degrees)
    }

    /// `[rx, ry, rz, tx, ty, tz]` with the rotation vector in degrees.
    pub fn to_params(&self) -> [f64; 6] {
        let r = self.rotation_vector_deg();
        let t = self.translation;
        [r.x, r.y, r.z, t.x, t.y, t.z]
    }

    pub fn from_params(p: &[f64; 6]) -> Self {
        Self::from_rotation_vector_deg(
            Vector3::new(p[0], p[1], p[2]),
            Vector3::new(p[3], p[4], p[5]),
        )
    }

    /// Conjugates `self` so that it acts about `center`: `x ↦ R(x−c)+c+t`.
    pub fn about(&self, center: &Vector3<f64>) -> Self {
        Self::new(
            self.rotation,
            center - self.rotation * center + self.translation,
        )
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Reads the rigid part of a homogeneous matrix; the bottom row and
    /// orthonormality are checked.
    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self> {
        let t = Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        );
        let bottom = m.fixed_view::<1, 4>(3, 0);
        if (bottom - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).amax() > 1e-12 {
            return Err(Error::InvalidArgument("not an affine matrix".into()));
        }
        if !t.is_valid(1e-9) {
            return Err(Error::InvalidArgument("matrix is not a proper rotation".into()));
        }
        Ok(t)
    }

    /// `RᵀR = I` and `det R = +1` within `tol`, all entries finite.
    pub fn is_valid(&self, tol: f64) -> bool {
        let finite = self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite());
        finite
            && (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    /// Rotation angle in degrees.
    pub fn angle_deg(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }

    /// Row-major rotation followed by the translation.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
            t.x, t.y, t.z,
        ]
    }

    pub fn from_array(a: &[f64; 12]) -> Result<Self> {
        let t = Self::new(
            Matrix3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]),
            Vector3::new(a[9], a[10], a[11]),
        );
        if !t.is_valid(1e-6) {
            return Err(Error::InvalidArgument("transform rotation is not orthonormal".into()));
        }
        Ok(t)
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 12]>::deserialize(d)?;
        RigidTransform::from_array(&a).map_err(serde::de::Error::custom)
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}
