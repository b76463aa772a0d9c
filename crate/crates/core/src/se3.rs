//! Angle-axis rotations, rigid transforms and the 6D search domain.
//!
//! Rotations are parametrised by angle-axis 3-vectors inside the cube
//! `[-π, π]³` that circumscribes the radius-π ball. Translations live in
//! `[-τ, τ]³`. A [`TransformCube`] is the product of one rotation sub-cube
//! and one translation sub-cube.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this angle the Rodrigues map is evaluated by its series expansion.
pub const SMALL_ANGLE: f64 = 1e-10;

const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// Skew-symmetric cross-product matrix `[v]×`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix of the angle-axis vector `r` (Rodrigues' formula).
pub fn rotation_from_angle_axis(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let k = skew(r);
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    let (s, c) = theta.sin_cos();
    Matrix3::identity() + (s / theta) * k + ((1.0 - c) / theta2) * (k * k)
}

/// Angle between two vectors in radians, in `[0, π]`.
///
/// Returns 0 if either vector is zero.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let cross = a.cross(b).norm();
    let dot = a.dot(b);
    if cross == 0.0 && dot == 0.0 {
        return 0.0;
    }
    cross.atan2(dot)
}

/// Rotation angle in radians of a rotation matrix, in `[0, π]`.
pub fn rotation_angle(m: &Matrix3<f64>) -> f64 {
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = 0.5 * Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm();
    sin.atan2(cos)
}

/// An angle-axis rotation vector. The angle is the norm and the axis the direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleAxis(pub Vector3<f64>);

impl AngleAxis {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn identity() -> Self {
        Self(Vector3::zeros())
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self(axis.normalize() * angle)
    }

    /// Logarithm of a rotation matrix, with angle in `[0, π]`.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
        Self(rot.scaled_axis())
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        rotation_from_angle_axis(&self.0)
    }

    /// The equivalent angle-axis vector inside the closed π-ball.
    pub fn canonical(&self) -> Self {
        let theta = self.0.norm();
        if theta <= PI {
            return *self;
        }
        let axis = self.0 / theta;
        let wrapped = theta.rem_euclid(2.0 * PI);
        if wrapped <= PI {
            Self(axis * wrapped)
        } else {
            Self(-axis * (2.0 * PI - wrapped))
        }
    }
}

impl Default for AngleAxis {
    fn default() -> Self {
        Self::identity()
    }
}

/// A rigid motion `x ↦ R_r x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: AngleAxis,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: AngleAxis, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    /// Packs into `[r; t]`, the parameter vector used by the local optimiser.
    pub fn to_params(&self) -> [f64; 6] {
        let r = self.rotation.0;
        let t = self.translation;
        [r.x, r.y, r.z, t.x, t.y, t.z]
    }

    pub fn from_params(p: &[f64; 6]) -> Self {
        Self { rotation: AngleAxis::new(p[0], p[1], p[2]), translation: Vector3::new(p[3], p[4], p[5]) }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_matrix()
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation_matrix().transpose();
        Self { rotation: AngleAxis(-self.rotation.0), translation: -(rt * self.translation) }
    }

    /// `self ∘ other`, i.e. apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        let r = self.rotation_matrix() * other.rotation_matrix();
        Self {
            rotation: AngleAxis::from_matrix(&r),
            translation: self.rotation_matrix() * other.translation + self.translation,
        }
    }

    pub fn canonical(&self) -> Self {
        Self { rotation: self.rotation.canonical(), translation: self.translation }
    }
}

/// Apply `transform` to `x`.
pub fn apply_transform(transform: &RigidTransform, x: &Vector3<f64>) -> Vector3<f64> {
    transform.apply(x)
}

/// Radius of the sphere circumscribing a translation cube of half-width `delta_t`.
#[inline]
pub fn translation_uncertainty_radius(delta_t: f64) -> f64 {
    SQRT_3 * delta_t
}

/// Largest angle any point can be rotated away from its image under the
/// rotation-cube centre, for a rotation cube of half-width `delta_r`.
#[inline]
pub fn max_aperture_angle(delta_r: f64) -> f64 {
    (SQRT_3 * delta_r).min(PI)
}

/// A sub-hypercube `C_r × C_t` of the search domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformCube {
    pub rotation_center: Vector3<f64>,
    pub rotation_half_width: f64,
    pub translation_center: Vector3<f64>,
    pub translation_half_width: f64,
    pub depth: u32,
}

impl TransformCube {
    /// The full domain `[-π, π]³ × [-τ, τ]³`.
    pub fn root(tau: f64) -> Self {
        Self {
            rotation_center: Vector3::zeros(),
            rotation_half_width: PI,
            translation_center: Vector3::zeros(),
            translation_half_width: tau,
            depth: 0,
        }
    }

    /// A cube of the given half-widths centred on `center`.
    pub fn around(center: &RigidTransform, rotation_half_width: f64, translation_half_width: f64) -> Self {
        Self {
            rotation_center: center.rotation.0,
            rotation_half_width,
            translation_center: center.translation,
            translation_half_width,
            depth: 0,
        }
    }

    pub fn center_transform(&self) -> RigidTransform {
        RigidTransform { rotation: AngleAxis(self.rotation_center), translation: self.translation_center }
    }

    pub fn rho(&self) -> f64 {
        translation_uncertainty_radius(self.translation_half_width)
    }

    pub fn beta(&self) -> f64 {
        max_aperture_angle(self.rotation_half_width)
    }

    /// Whether `(r, t)` lies in the closed cube.
    pub fn contains(&self, r: &Vector3<f64>, t: &Vector3<f64>) -> bool {
        let dr = (r - self.rotation_center).abs().max();
        let dt = (t - self.translation_center).abs().max();
        dr <= self.rotation_half_width && dt <= self.translation_half_width
    }

    /// 6D volume of the cube.
    pub fn volume(&self) -> f64 {
        (2.0 * self.rotation_half_width).powi(3) * (2.0 * self.translation_half_width).powi(3)
    }

    /// True when the whole rotation sub-cube lies outside the π-ball, so it
    /// contains no rotation that is not already represented elsewhere.
    pub fn rotation_prunable(&self) -> bool {
        rotation_cube_prunable(self)
    }

    /// Splits every one of the six axes into `split` equal parts.
    ///
    /// Children are ordered with rotation indices outermost, then
    /// translation indices, each in x, y, z order.
    pub fn subdivide(&self, split: usize) -> Result<Vec<TransformCube>> {
        if split < 2 {
            return Err(Error::InvalidArgument(format!("split factor must be at least 2, got {split}")));
        }
        let hr = self.rotation_half_width / split as f64;
        let ht = self.translation_half_width / split as f64;
        let offsets = |half_parent: f64, half_child: f64| -> Vec<f64> {
            (0..split).map(|k| -half_parent + (2 * k + 1) as f64 * half_child).collect()
        };
        let ro = offsets(self.rotation_half_width, hr);
        let to = offsets(self.translation_half_width, ht);

        let mut children = Vec::with_capacity(split.pow(6));
        for &rx in &ro {
            for &ry in &ro {
                for &rz in &ro {
                    let rc = self.rotation_center + Vector3::new(rx, ry, rz);
                    for &tx in &to {
                        for &ty in &to {
                            for &tz in &to {
                                children.push(TransformCube {
                                    rotation_center: rc,
                                    rotation_half_width: hr,
                                    translation_center: self.translation_center + Vector3::new(tx, ty, tz),
                                    translation_half_width: ht,
                                    depth: self.depth + 1,
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(children)
    }
}

/// See [`TransformCube::subdivide`].
pub fn subdivide(cube: &TransformCube, split: usize) -> Result<Vec<TransformCube>> {
    cube.subdivide(split)
}

/// True iff `‖r₀‖ − √3·δr > π`.
pub fn rotation_cube_prunable(cube: &TransformCube) -> bool {
    cube.rotation_center.norm() - SQRT_3 * cube.rotation_half_width > PI
}
