//! Landmark oracle: visible wall points of each branch, labeled and
//! expressed in the camera frame.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::airway::AirwayTree;
use crate::geometry::{CameraModel, Frame, PointCloud, Pose};

use super::{shift_depth, LandmarkObservation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkNoiseCfg {
    /// Std of the depth noise applied along each point's viewing ray, mm.
    pub sigma_depth: f64,
    /// Probability that an observation is reported with a sibling's label.
    pub label_swap_prob: f64,
    /// Branches with fewer visible points are not reported.
    pub min_visible_points: usize,
    /// Visible points are subsampled to at most this many.
    pub max_points: usize,
}

impl Default for LandmarkNoiseCfg {
    fn default() -> Self {
        Self {
            sigma_depth: 1.0,
            label_swap_prob: 0.0,
            min_visible_points: 10,
            max_points: 64,
        }
    }
}

/// Relative slack when comparing a point's depth with the ray exit.
const VISIBILITY_TOL: f64 = 1e-6;

/// Observations for every branch with enough unoccluded surface points in
/// the frustum of `gt_pose`.
pub fn oracle_landmarks<R: Rng + ?Sized>(
    tree: &AirwayTree,
    gt_pose: &Pose,
    cam: &CameraModel,
    cfg: &LandmarkNoiseCfg,
    rng: &mut R,
) -> Vec<LandmarkObservation> {
    let caster = tree.ray_caster();
    let origin = gt_pose.translation;
    let inside = caster.containing(&origin);
    if inside.is_empty() {
        return Vec::new();
    }
    let inv = gt_pose.inverse();
    let rot = gt_pose.rotation.to_rotation_matrix();
    let mut out = Vec::new();
    for branch in tree.branches() {
        let mut visible = Vec::new();
        for p in &branch.surface_cloud.points {
            let pc = inv.transform_point(p);
            if !cam.in_frustum(&pc) {
                continue;
            }
            let dir = rot * (pc / pc.z);
            let tol = VISIBILITY_TOL * pc.z.max(1.0);
            if let Some(exit) = caster.cast_from(&origin, &inside, &dir, pc.z) {
                if exit.t >= pc.z - tol {
                    visible.push(pc);
                }
            }
        }
        if visible.len() < cfg.min_visible_points.max(1) {
            continue;
        }
        if visible.len() > cfg.max_points {
            let mut picked = index::sample(rng, visible.len(), cfg.max_points).into_vec();
            picked.sort_unstable();
            visible = picked.into_iter().map(|i| visible[i]).collect();
        }
        if cfg.sigma_depth > 0.0 {
            for p in &mut visible {
                let n: f64 = rng.sample(StandardNormal);
                *p = shift_depth(p, cfg.sigma_depth * n);
            }
        }
        let mut label = branch.anatomical_label.clone();
        if cfg.label_swap_prob > 0.0 && rng.random::<f64>() < cfg.label_swap_prob {
            let sibs = tree.siblings_of(branch.id);
            if !sibs.is_empty() {
                label = sibs[rng.random_range(0..sibs.len())].anatomical_label.clone();
            }
        }
        out.push(LandmarkObservation {
            anatomical_label: label,
            cloud: PointCloud::new(visible, Frame::Camera),
        });
    }
    out
}
