use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use crate::hgmm::{Point3, PointCloud};

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(phi: f64) -> f64 {
    let mut a = phi.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Rotation by `phi` about the z axis followed by translation `v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub phi: f64,
    pub v: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

pub fn rotation_z(phi: f64) -> Matrix3<f64> {
    let (s, c) = phi.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

impl RigidTransform {
    pub fn new(phi: f64, v: Vector3<f64>) -> Self {
        Self { phi: wrap_angle(phi), v }
    }

    pub fn identity() -> Self {
        Self { phi: 0.0, v: Vector3::zeros() }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_z(self.phi)
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation() * p + self.v
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        let r = self.rotation();
        let pts = cloud.points().iter().map(|p| r * p + self.v).collect();
        PointCloud::new(pts).expect("rigid motion keeps the cloud valid")
    }

    pub fn inverse(&self) -> Self {
        Self::new(-self.phi, -(rotation_z(-self.phi) * self.v))
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> Self {
        Self::new(self.phi + first.phi, self.rotation() * first.v + self.v)
    }
}
