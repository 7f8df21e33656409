//! Rigid-body pose algebra, pinhole camera model and point-cloud helpers.
//!
//! Poses are camera-to-world transforms. The camera looks along its local
//! `+z` axis, `+x` points right and `+y` points down in the image, and the
//! pixel `(i, j)` has its center at image coordinates `(u, v) = (i, j)`.

use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perception::DepthMap;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("pose list is empty")]
    Empty,
    #[error("{poses} poses but {weights} weights")]
    LengthMismatch { poses: usize, weights: usize },
    #[error("weights sum to {0}, expected 1")]
    WeightsNotNormalized(f64),
    #[error("negative or non-finite weight {0}")]
    InvalidWeight(f64),
    #[error("expected a {expected:?}-frame cloud, got {actual:?}")]
    FrameMismatch { expected: Frame, actual: Frame },
    #[error("invalid camera model: {0}")]
    InvalidCamera(&'static str),
    #[error("invalid motion noise: {0}")]
    InvalidNoise(&'static str),
}

/// Rigid transform with a unit quaternion rotation and a translation in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

/// Relative motion between two consecutive frames, expressed in the
/// earlier frame.
pub type PoseDelta = Pose;

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
            rotation: renormalize(rotation),
            translation,
        }
    }

    /// Builds a pose from `(w, x, y, z)` quaternion components, normalizing them.
    pub fn from_parts(wxyz: [f64; 4], translation: Vector3<f64>) -> Self {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        Self {
            rotation: UnitQuaternion::new_normalize(q),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation,
        }
    }

    /// Camera pose at `position` whose optical axis points along `forward`.
    /// `up_hint` fixes the roll; the image `-y` axis is aligned with it as far
    /// as possible.
    pub fn looking_along(
        position: Vector3<f64>,
        forward: Vector3<f64>,
        up_hint: Vector3<f64>,
    ) -> Self {
        let z = forward.normalize();
        let mut down = -(up_hint - z * z.dot(&up_hint));
        if down.norm() < 1e-9 {
            down = any_perpendicular(&z);
        }
        let y = down.normalize();
        let x = y.cross(&z);
        let m = nalgebra::Matrix3::from_columns(&[x, y, z]);
        let rot = nalgebra::Rotation3::from_matrix_unchecked(m);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), position)
    }

    /// Quaternion components as `[w, x, y, z]`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.to_rotation_matrix().matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self ⊕ other`: the homogeneous product `M(self) · M(other)`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: renormalize(inv),
            translation: -(inv * self.translation),
        }
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Maps a parent-frame point into this pose's local frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(&(p - self.translation))
    }

    /// Optical axis (`+z` of the local frame) in the parent frame.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation * Vector3::z()
    }

    /// Adds Gaussian translation noise in the parent frame and right-applies a
    /// rotation whose axis-angle vector is Gaussian.
    pub fn perturb<R: Rng + ?Sized>(&self, noise: &MotionNoise, rng: &mut R) -> Pose {
        if noise.is_zero() {
            return *self;
        }
        let mut dt = Vector3::zeros();
        let mut dr = Vector3::zeros();
        for k in 0..3 {
            let n: f64 = rng.sample(StandardNormal);
            dt[k] = n * noise.sigma_translation[k];
        }
        for k in 0..3 {
            let n: f64 = rng.sample(StandardNormal);
            dr[k] = n * noise.sigma_rotation[k];
        }
        Pose {
            rotation: renormalize(self.rotation * UnitQuaternion::from_scaled_axis(dr)),
            translation: self.translation + dt,
        }
    }

    /// Rotation angle of `self⁻¹ · other`, radians.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

pub(crate) fn any_perpendicular(v: &Vector3<f64>) -> Vector3<f64> {
    let helper = if v.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    v.cross(&helper).normalize()
}

/// Per-axis standard deviations of the motion perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionNoise {
    /// mm
    pub sigma_translation: [f64; 3],
    /// radians, axis-angle components
    pub sigma_rotation: [f64; 3],
}

impl Default for MotionNoise {
    fn default() -> Self {
        Self::isotropic(0.5, 1f64.to_radians())
    }
}

impl MotionNoise {
    pub fn zero() -> Self {
        Self {
            sigma_translation: [0.0; 3],
            sigma_rotation: [0.0; 3],
        }
    }

    pub fn isotropic(sigma_translation_mm: f64, sigma_rotation_rad: f64) -> Self {
        Self {
            sigma_translation: [sigma_translation_mm; 3],
            sigma_rotation: [sigma_rotation_rad; 3],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_translation
            .iter()
            .chain(self.sigma_rotation.iter())
            .all(|s| *s == 0.0)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self
            .sigma_translation
            .iter()
            .chain(self.sigma_rotation.iter())
            .all(|s| s.is_finite() && *s >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidNoise("sigmas must be finite and >= 0"))
        }
    }
}

/// Pinhole intrinsics plus clipping depths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// mm
    pub near: f64,
    /// mm
    pub far: f64,
}

impl Default for CameraModel {
    /// 256×256, 90° horizontal field of view.
    fn default() -> Self {
        Self::with_fov(256, 256, 90f64.to_radians(), 0.5, 150.0)
    }
}

impl CameraModel {
    /// Square-pixel camera with the principal point at the image center.
    pub fn with_fov(width: usize, height: usize, hfov: f64, near: f64, far: f64) -> Self {
        let f = (width as f64 / 2.0) / (hfov / 2.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            near,
            far,
        }
    }

    /// Same field of view at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
            near: self.near,
            far: self.far,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera("focal lengths must be > 0"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(GeometryError::InvalidCamera("need 0 < near < far"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera("empty image"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite() && self.far.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite parameter"));
        }
        Ok(())
    }

    /// Image coordinates of a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// True when the camera-frame point lies between the clipping planes and
    /// projects onto the image area.
    pub fn in_frustum(&self, p: &Vector3<f64>) -> bool {
        if !(p.z > self.near && p.z < self.far) {
            return false;
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        u >= -0.5 && u < self.width as f64 - 0.5 && v >= -0.5 && v < self.height as f64 - 0.5
    }

    /// Camera-frame ray through image coordinates `(u, v)`, scaled so that
    /// its `z` component is 1.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    World,
    Camera,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, frame: Frame) -> Self {
        Self { points, frame }
    }

    pub fn empty(frame: Frame) -> Self {
        Self {
            points: Vec::new(),
            frame,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.iter().all(|c| c.is_finite()))
    }
}

/// Maps a world-frame cloud into the camera frame of `camera_pose`.
pub fn transform_cloud(camera_pose: &Pose, cloud: &PointCloud) -> Result<PointCloud, GeometryError> {
    if cloud.frame != Frame::World {
        return Err(GeometryError::FrameMismatch {
            expected: Frame::World,
            actual: cloud.frame,
        });
    }
    let inv = camera_pose.inverse();
    Ok(PointCloud {
        points: cloud.points.iter().map(|p| inv.transform_point(p)).collect(),
        frame: Frame::Camera,
    })
}

/// Pinhole back-projection of every valid pixel.
pub fn back_project(depth: &DepthMap, cam: &CameraModel) -> PointCloud {
    let mut points = Vec::with_capacity(depth.valid_count());
    for v in 0..depth.height() {
        for u in 0..depth.width() {
            if let Some(d) = depth.get(u, v) {
                points.push(cam.ray(u as f64, v as f64) * d);
            }
        }
    }
    PointCloud::new(points, Frame::Camera)
}

/// Convex combination of poses: weighted translation mean, and a weighted
/// quaternion mean after flipping every quaternion into the hemisphere of the
/// highest-weight one.
pub fn weighted_mean_pose(poses: &[Pose], weights: &[f64]) -> Result<Pose, GeometryError> {
    if poses.is_empty() {
        return Err(GeometryError::Empty);
    }
    if poses.len() != weights.len() {
        return Err(GeometryError::LengthMismatch {
            poses: poses.len(),
            weights: weights.len(),
        });
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(GeometryError::InvalidWeight(*w));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(GeometryError::WeightsNotNormalized(total));
    }

    let reference = weights
        .iter()
        .enumerate()
        .fold(0, |best, (i, w)| if *w > weights[best] { i } else { best });
    let q_ref = poses[reference].rotation.into_inner().coords;

    let mut t = Vector3::zeros();
    let mut q = nalgebra::Vector4::zeros();
    for (pose, &w) in poses.iter().zip(weights) {
        t += pose.translation * w;
        let c = pose.rotation.into_inner().coords;
        if c.dot(&q_ref) < 0.0 {
            q -= c * w;
        } else {
            q += c * w;
        }
    }
    let rotation = UnitQuaternion::new_normalize(Quaternion::from(q));
    Ok(Pose {
        rotation,
        translation: t,
    })
}
