//! Observation providers.
//!
//! The filter consumes three kinds of observation: relative motion between
//! frames, per-branch landmark point clouds, and a depth image. Each is
//! behind a trait so a learned front-end can replace the geometric oracles
//! provided here.

mod landmarks;
mod render;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::airway::AirwayTree;
use crate::geometry::{CameraModel, MotionNoise, PointCloud, Pose, PoseDelta};
use crate::rng;

pub use landmarks::{oracle_landmarks, LandmarkNoiseCfg};
pub use render::{render_depth, render_depth_with, RenderOptions};

/// Row-major depth image in mm. Invalid pixels hold [`DepthMap::INVALID`].
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub const INVALID: f64 = 0.0;

    pub fn invalid(width: usize, height: usize) -> Self {
        Self::filled(width, height, Self::INVALID)
    }

    pub fn filled(width: usize, height: usize, depth: f64) -> Self {
        Self {
            width,
            height,
            values: vec![depth; width * height],
        }
    }

    /// Panics if `values.len() != width * height`.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "depth buffer size");
        Self { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let d = self.values[v * self.width + u];
        (d > 0.0 && d.is_finite()).then_some(d)
    }

    pub fn set(&mut self, u: usize, v: usize, depth: f64) {
        self.values[v * self.width + u] = depth;
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|d| **d > 0.0 && d.is_finite()).count()
    }
}

/// Per-branch depth cloud of a detected landmark, in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkObservation {
    pub anatomical_label: String,
    pub cloud: PointCloud,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometrySample {
    pub delta: PoseDelta,
    /// Corruption level the sample was generated with.
    pub applied_noise: MotionNoise,
}

/// Relative camera motion, expressed in the previous camera frame.
pub fn oracle_odometry<R: Rng + ?Sized>(
    gt_prev: &Pose,
    gt_curr: &Pose,
    noise: &MotionNoise,
    rng: &mut R,
) -> OdometrySample {
    let exact = gt_prev.inverse().compose(gt_curr);
    OdometrySample {
        delta: exact.perturb(noise, rng),
        applied_noise: *noise,
    }
}

/// Motion between frame `frame - 1` and `frame`.
pub trait OdometryProvider {
    fn odometry(&mut self, frame: usize) -> OdometrySample;
}

/// Labeled branch clouds visible in `frame`.
pub trait LandmarkProvider {
    fn landmarks(&mut self, frame: usize) -> Vec<LandmarkObservation>;
}

/// Depth image of `frame`.
pub trait DepthProvider {
    fn depth(&mut self, frame: usize) -> DepthMap;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    pub odometry_noise: MotionNoise,
    pub landmarks: LandmarkNoiseCfg,
    /// Camera used for landmark visibility and full-resolution depth.
    pub camera: CameraModel,
    /// Low-resolution camera used for global depth matching.
    pub ncc_camera: CameraModel,
    /// Gaussian noise added to valid pixels of observed depth maps, mm.
    pub sigma_depth_map: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        let camera = CameraModel::default();
        Self {
            odometry_noise: MotionNoise::default(),
            landmarks: LandmarkNoiseCfg::default(),
            camera,
            ncc_camera: camera.resized(16, 16),
            sigma_depth_map: 1.0,
        }
    }
}

impl PerceptionConfig {
    pub fn noiseless() -> Self {
        Self {
            odometry_noise: MotionNoise::zero(),
            landmarks: LandmarkNoiseCfg {
                sigma_depth: 0.0,
                label_swap_prob: 0.0,
                ..LandmarkNoiseCfg::default()
            },
            sigma_depth_map: 0.0,
            ..Self::default()
        }
    }
}

/// Geometric oracles driven by a ground-truth trajectory. Each frame draws
/// from its own random stream, so frames can be requested in any order.
pub struct SimulatedPerception<'a> {
    tree: &'a AirwayTree,
    ground_truth: &'a [Pose],
    cfg: PerceptionConfig,
    seed: u64,
}

impl<'a> SimulatedPerception<'a> {
    pub fn new(tree: &'a AirwayTree, ground_truth: &'a [Pose], cfg: PerceptionConfig, seed: u64) -> Self {
        Self {
            tree,
            ground_truth,
            cfg,
            seed,
        }
    }

    pub fn config(&self) -> &PerceptionConfig {
        &self.cfg
    }

    /// Noisy depth image at frame `frame` rendered with `cam`.
    pub fn depth_with(&self, frame: usize, cam: &CameraModel) -> DepthMap {
        let mut map = render_depth(self.tree, &self.ground_truth[frame], cam);
        if self.cfg.sigma_depth_map > 0.0 {
            let mut rng = rng::stream_rng(self.seed, rng::DEPTH, frame as u64);
            let sigma = self.cfg.sigma_depth_map;
            for v in 0..map.height() {
                for u in 0..map.width() {
                    if let Some(d) = map.get(u, v) {
                        let n: f64 = rng.sample(StandardNormal);
                        map.set(u, v, (d + sigma * n).max(cam.near));
                    }
                }
            }
        }
        map
    }
}

impl OdometryProvider for SimulatedPerception<'_> {
    fn odometry(&mut self, frame: usize) -> OdometrySample {
        let mut rng = rng::stream_rng(self.seed, rng::ODOMETRY, frame as u64);
        oracle_odometry(
            &self.ground_truth[frame - 1],
            &self.ground_truth[frame],
            &self.cfg.odometry_noise,
            &mut rng,
        )
    }
}

impl LandmarkProvider for SimulatedPerception<'_> {
    fn landmarks(&mut self, frame: usize) -> Vec<LandmarkObservation> {
        let mut rng = rng::stream_rng(self.seed, rng::LANDMARKS, frame as u64);
        oracle_landmarks(
            self.tree,
            &self.ground_truth[frame],
            &self.cfg.camera,
            &self.cfg.landmarks,
            &mut rng,
        )
    }
}

impl DepthProvider for SimulatedPerception<'_> {
    fn depth(&mut self, frame: usize) -> DepthMap {
        let cam = self.cfg.ncc_camera;
        self.depth_with(frame, &cam)
    }
}

/// Moves a camera-frame point along its viewing ray so its depth changes by
/// `dz`.
pub(crate) fn shift_depth(p: &Vector3<f64>, dz: f64) -> Vector3<f64> {
    let z = (p.z + dz).max(1e-6);
    p * (z / p.z)
}
