//! Depth rendering by ray casting the lumen model.

use crate::airway::{AirwayTree, ExitKind};
use crate::geometry::{CameraModel, Pose};

use super::DepthMap;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderOptions {
    /// Treat the open root entrance and leaf tips as walls.
    pub closed_ends: bool,
}

/// Z-depth image of the lumen seen from `pose`. Pixels whose ray leaves
/// through an open end or beyond the far plane are invalid, as is the whole
/// image when the camera is outside the lumen.
pub fn render_depth(tree: &AirwayTree, pose: &Pose, cam: &CameraModel) -> DepthMap {
    render_depth_with(tree, pose, cam, RenderOptions::default())
}

pub fn render_depth_with(tree: &AirwayTree, pose: &Pose, cam: &CameraModel, opts: RenderOptions) -> DepthMap {
    let caster = tree.ray_caster();
    let origin = pose.translation;
    let inside = caster.containing(&origin);
    let mut map = DepthMap::invalid(cam.width, cam.height);
    if inside.is_empty() {
        return map;
    }
    let rot = pose.rotation.to_rotation_matrix();
    for v in 0..cam.height {
        for u in 0..cam.width {
            let dir = rot * cam.ray(u as f64, v as f64);
            let Some(exit) = caster.cast_from(&origin, &inside, &dir, cam.far) else {
                continue;
            };
            let open = exit.kind == ExitKind::OpenEnd && !opts.closed_ends;
            // dir has unit z in the camera frame, so t is the z-depth
            if !open && exit.t > cam.near && exit.t < cam.far {
                map.set(u, v, exit.t);
            }
        }
    }
    map
}
