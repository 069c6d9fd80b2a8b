//! SE(3) poses, the pinhole camera and projection.
//!
//! Stored poses are `world_from_camera` unless a name says otherwise. A pose
//! maps a point expressed in its child frame into its parent frame.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

pub use nalgebra::Point3;

/// Depth at or below which a camera-frame point counts as behind the camera.
pub const Z_MIN: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("cannot parse pose from {0:?}: expected `tx ty tz qw qx qy qz`")]
    PoseParse(String),
}

/// Rigid transform stored as a unit quaternion and a translation in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renormalized(rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Builds a pose from raw quaternion components `(w, x, y, z)`; the
    /// quaternion is normalized.
    pub fn from_parts(translation: [f64; 3], wxyz: [f64; 4]) -> Self {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        Self::new(
            UnitQuaternion::from_quaternion(q),
            Vector3::new(translation[0], translation[1], translation[2]),
        )
    }

    /// Stores the quaternion components verbatim. Callers guarantee unit norm
    /// (used when reading back serialized poses bit-exactly).
    pub fn from_parts_exact(translation: [f64; 3], wxyz: [f64; 4]) -> Self {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        Self {
            rotation: UnitQuaternion::new_unchecked(q),
            translation: Vector3::new(translation[0], translation[1], translation[2]),
        }
    }

    /// Projects `m` onto the nearest rotation before storing it.
    pub fn from_rotation_matrix(m: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix(m);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Quaternion components as `(w, x, y, z)`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    /// Left-multiplies a small increment `(ω, v)`: the rotation becomes
    /// `exp(ω)·R` and the translation `exp(ω)·t + v`.
    pub fn retract_left(&self, omega: &Vector3<f64>, v: &Vector3<f64>) -> Pose {
        let dq = UnitQuaternion::from_scaled_axis(*omega);
        Pose::new(dq * self.rotation, dq * self.translation + v)
    }
}

fn renormalized(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

impl fmt::Display for Pose {
    /// `tx ty tz qw qx qy qz` with round-trip precision.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.translation;
        let [w, x, y, z] = self.quaternion_wxyz();
        write!(f, "{:?} {:?} {:?} {:?} {:?} {:?} {:?}", t.x, t.y, t.z, w, x, y, z)
    }
}

impl FromStr for Pose {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let values: Vec<f64> = s
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| GeometryError::PoseParse(s.to_string()))?;
        if values.len() != 7 || values.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::PoseParse(s.to_string()));
        }
        let norm = values[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(GeometryError::PoseParse(s.to_string()));
        }
        let (t, q) = (
            [values[0], values[1], values[2]],
            [values[3], values[4], values[5], values[6]],
        );
        if (norm - 1.0).abs() < 1e-12 {
            return Ok(Pose::from_parts_exact(t, q));
        }
        Ok(Pose::from_parts(t, q))
    }
}

/// Euclidean distance between the two translations, in meters.
pub fn translation_distance(a: &Pose, b: &Pose) -> f64 {
    (a.translation - b.translation).norm()
}

/// Geodesic angle of the relative rotation, in `[0, π]` radians.
pub fn rotation_distance(a: &Pose, b: &Pose) -> f64 {
    let rel = a.rotation.inverse() * b.rotation;
    let q = rel.quaternion();
    2.0 * q.imag().norm().atan2(q.w.abs())
}

/// Sub-pixel image position.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    /// 640×480 pinhole with a 500 px focal length.
    fn default() -> Self {
        Self {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidIntrinsics(
                "non-finite parameter".into(),
            ));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// Projects a point already expressed in the camera frame.
    pub fn project_camera_point(&self, p: &Point3<f64>) -> Option<Pixel> {
        if p.z <= Z_MIN {
            return None;
        }
        Some(Pixel::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Camera-frame point at `depth` along the ray through `px`.
    pub fn backproject(&self, px: &Pixel, depth: f64) -> Point3<f64> {
        Point3::new(
            (px.u - self.cx) / self.fx * depth,
            (px.v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Ray direction in normalized image coordinates (`z = 1`).
    pub fn normalize(&self, px: &Pixel) -> (f64, f64) {
        ((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy)
    }

    pub fn contains(&self, px: &Pixel) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u < self.width as f64 && px.v < self.height as f64
    }
}

/// Pinhole projection of a world point. `None` flags a point whose
/// camera-frame depth is at or below [`Z_MIN`].
pub fn project(
    k: &CameraIntrinsics,
    camera_from_world: &Pose,
    p: &Point3<f64>,
) -> Option<Pixel> {
    k.project_camera_point(&camera_from_world.transform_point(p))
}
