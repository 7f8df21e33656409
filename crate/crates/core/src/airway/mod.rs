//! Branch-labeled airway tree: centerline graph, per-branch surface clouds,
//! nearest-centerline queries and the tube ray caster.

mod generate;
mod io;
pub mod raycast;

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{Frame, PointCloud, Pose};
use crate::spatial::{Aabb, UniformGrid};

pub use generate::{generate_tree, TreeGenSpec};
pub use io::{load_tree, save_tree, tree_from_json, tree_to_json};
pub use raycast::{RayCaster, RayExit, ExitKind};

/// Cell size of the per-branch surface-cloud grids, mm.
const CLOUD_CELL_MM: f64 = 3.0;
/// Distances closer than this are treated as ties in centerline queries.
const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AirwayError {
    #[error("tree has no branches")]
    Empty,
    #[error("no root branch (every branch has a parent)")]
    NoRoot,
    #[error("more than one root branch: {0:?}")]
    MultipleRoots(Vec<u32>),
    #[error("root_id {root_id} does not name the parentless branch {actual}")]
    RootMismatch { root_id: u32, actual: u32 },
    #[error("duplicate branch id {0}")]
    DuplicateId(u32),
    #[error("duplicate anatomical label {0:?}")]
    DuplicateLabel(String),
    #[error("branch {branch} references unknown parent {parent}")]
    UnknownParent { branch: u32, parent: u32 },
    #[error("parent links of branch {0} do not reach the root")]
    Cycle(u32),
    #[error("branch {branch} has generation {got}, expected {expected}")]
    Generation { branch: u32, got: u32, expected: u32 },
    #[error("branch {branch}: {reason}")]
    InvalidBranch { branch: u32, reason: String },
    #[error("branch {branch} does not start near its parent {parent}")]
    Disconnected { branch: u32, parent: u32 },
    #[error("unknown anatomical label {0:?}")]
    UnknownLabel(String),
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed tree file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: u32,
    pub anatomical_label: String,
    pub generation: u32,
    pub parent_id: Option<u32>,
    /// Ordered parent-to-child, mm.
    pub centerline: Vec<Vector3<f64>>,
    /// One radius per centerline vertex, mm.
    pub radii: Vec<f64>,
    /// World-frame samples of the branch wall.
    pub surface_cloud: PointCloud,
}

impl Branch {
    pub fn length(&self) -> f64 {
        self.centerline.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    pub fn mean_radius(&self) -> f64 {
        self.radii.iter().sum::<f64>() / self.radii.len() as f64
    }

    fn check_shape(&self) -> Result<(), AirwayError> {
        let bad = |reason: &str| AirwayError::InvalidBranch {
            branch: self.id,
            reason: reason.to_string(),
        };
        if self.centerline.len() < 2 {
            return Err(bad("centerline needs at least 2 vertices"));
        }
        if self.centerline.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(bad("non-finite centerline vertex"));
        }
        if self.centerline.windows(2).any(|w| (w[1] - w[0]).norm() == 0.0) {
            return Err(bad("repeated consecutive centerline vertex"));
        }
        if self.radii.len() != self.centerline.len() {
            return Err(bad("radii and centerline lengths differ"));
        }
        if self.radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(bad("radii must be finite and > 0"));
        }
        if self.surface_cloud.frame != Frame::World {
            return Err(bad("surface cloud must be in the world frame"));
        }
        if !self.surface_cloud.is_finite() {
            return Err(bad("non-finite surface point"));
        }
        Ok(())
    }
}

/// One centerline segment, with radii at both ends.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Segment {
    pub branch: usize,
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub r0: f64,
    pub r1: f64,
}

impl Segment {
    /// Closest point parameter in [0, 1] and squared distance.
    fn closest(&self, p: &Vector3<f64>) -> (f64, f64) {
        let ab = self.b - self.a;
        let t = ((p - self.a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        let q = self.a + ab * t;
        (t, (p - q).norm_squared())
    }

    fn aabb(&self) -> Aabb {
        Aabb {
            min: self.a.inf(&self.b),
            max: self.a.sup(&self.b),
        }
    }

    fn tangent(&self) -> Vector3<f64> {
        (self.b - self.a).normalize()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterlineQueryResult {
    /// Distance from the pose position to the nearest centerline, mm.
    pub distance_e: f64,
    /// Angle between the optical axis and the parent-to-child tangent, [0, π].
    pub angle_phi: f64,
    pub branch_id: u32,
    /// Radius interpolated at the nearest centerline point, mm.
    pub local_radius_r: f64,
    pub closest_point: Vector3<f64>,
}

/// Immutable airway model with its spatial indices.
#[derive(Debug, Clone)]
pub struct AirwayTree {
    branches: Vec<Branch>,
    root_id: u32,
    by_id: HashMap<u32, usize>,
    by_label: HashMap<String, usize>,
    children: Vec<Vec<usize>>,
    segments: Vec<Segment>,
    segment_grid: UniformGrid,
    cloud_grids: Vec<UniformGrid>,
    caster: RayCaster,
}

impl PartialEq for AirwayTree {
    fn eq(&self, other: &Self) -> bool {
        self.root_id == other.root_id && self.branches == other.branches
    }
}

impl AirwayTree {
    /// Validates the branch set and builds the spatial indices.
    pub fn new(branches: Vec<Branch>, root_id: u32) -> Result<Self, AirwayError> {
        if branches.is_empty() {
            return Err(AirwayError::Empty);
        }
        let mut by_id = HashMap::new();
        let mut by_label = HashMap::new();
        for (i, b) in branches.iter().enumerate() {
            b.check_shape()?;
            if by_id.insert(b.id, i).is_some() {
                return Err(AirwayError::DuplicateId(b.id));
            }
            if by_label.insert(b.anatomical_label.clone(), i).is_some() {
                return Err(AirwayError::DuplicateLabel(b.anatomical_label.clone()));
            }
        }

        let roots: Vec<u32> = branches
            .iter()
            .filter(|b| b.parent_id.is_none())
            .map(|b| b.id)
            .collect();
        match roots.as_slice() {
            [] => return Err(AirwayError::NoRoot),
            [r] if *r != root_id => {
                return Err(AirwayError::RootMismatch {
                    root_id,
                    actual: *r,
                })
            }
            [_] => {}
            _ => return Err(AirwayError::MultipleRoots(roots)),
        }

        let mut children = vec![Vec::new(); branches.len()];
        for (i, b) in branches.iter().enumerate() {
            let Some(pid) = b.parent_id else { continue };
            let &p = by_id.get(&pid).ok_or(AirwayError::UnknownParent {
                branch: b.id,
                parent: pid,
            })?;
            children[p].push(i);
            let parent = &branches[p];
            if b.generation != parent.generation + 1 {
                return Err(AirwayError::Generation {
                    branch: b.id,
                    got: b.generation,
                    expected: parent.generation + 1,
                });
            }
            let start = b.centerline[0];
            let connected = parent
                .centerline
                .iter()
                .zip(&parent.radii)
                .any(|(v, r)| (v - start).norm() <= 2.0 * r);
            if !connected {
                return Err(AirwayError::Disconnected {
                    branch: b.id,
                    parent: pid,
                });
            }
        }
        for b in &branches {
            let mut cur = b;
            let mut hops = 0;
            while let Some(pid) = cur.parent_id {
                cur = &branches[by_id[&pid]];
                hops += 1;
                if hops > branches.len() {
                    return Err(AirwayError::Cycle(b.id));
                }
            }
        }

        let segments: Vec<Segment> = branches
            .iter()
            .enumerate()
            .flat_map(|(bi, b)| {
                (0..b.centerline.len() - 1).map(move |k| Segment {
                    branch: bi,
                    a: b.centerline[k],
                    b: b.centerline[k + 1],
                    r0: b.radii[k],
                    r1: b.radii[k + 1],
                })
            })
            .collect();
        let seg_boxes: Vec<Aabb> = segments.iter().map(Segment::aabb).collect();
        let seg_cell = segments
            .iter()
            .map(|s| (s.b - s.a).norm())
            .sum::<f64>()
            / segments.len() as f64;
        let segment_grid = UniformGrid::build(&seg_boxes, seg_cell.max(1.0));

        let cloud_grids = branches
            .iter()
            .map(|b| {
                let boxes: Vec<Aabb> = b.surface_cloud.points.iter().map(|p| Aabb::point(*p)).collect();
                UniformGrid::build(&boxes, CLOUD_CELL_MM)
            })
            .collect();

        let caster = RayCaster::from_branches(&branches);

        Ok(Self {
            branches,
            root_id,
            by_id,
            by_label,
            children,
            segments,
            segment_grid,
            cloud_grids,
            caster,
        })
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn root_id(&self) -> u32 {
        self.root_id
    }

    pub fn root(&self) -> &Branch {
        &self.branches[self.by_id[&self.root_id]]
    }

    pub fn branch_by_id(&self, id: u32) -> Option<&Branch> {
        self.by_id.get(&id).map(|&i| &self.branches[i])
    }

    pub fn branch_by_label(&self, label: &str) -> Option<&Branch> {
        self.by_label.get(label).map(|&i| &self.branches[i])
    }

    pub(crate) fn index_of_label(&self, label: &str) -> Option<usize> {
        self.by_label.get(label).copied()
    }

    pub fn children_of(&self, id: u32) -> Vec<&Branch> {
        match self.by_id.get(&id) {
            Some(&i) => self.children[i].iter().map(|&c| &self.branches[c]).collect(),
            None => Vec::new(),
        }
    }

    /// Other children of this branch's parent.
    pub fn siblings_of(&self, id: u32) -> Vec<&Branch> {
        let Some(pid) = self.branch_by_id(id).and_then(|b| b.parent_id) else {
            return Vec::new();
        };
        self.children_of(pid).into_iter().filter(|b| b.id != id).collect()
    }

    pub fn leaves(&self) -> Vec<&Branch> {
        self.branches
            .iter()
            .enumerate()
            .filter(|(i, _)| self.children[*i].is_empty())
            .map(|(_, b)| b)
            .collect()
    }

    /// Branch ids from the root down to `id`, inclusive.
    pub fn path_to(&self, id: u32) -> Option<Vec<u32>> {
        let mut path = vec![id];
        let mut cur = self.branch_by_id(id)?;
        while let Some(pid) = cur.parent_id {
            path.push(pid);
            cur = self.branch_by_id(pid)?;
        }
        path.reverse();
        Some(path)
    }

    pub fn max_generation(&self) -> u32 {
        self.branches.iter().map(|b| b.generation).max().unwrap_or(0)
    }

    pub fn ray_caster(&self) -> &RayCaster {
        &self.caster
    }

    /// Stored world-frame wall samples of the branch labeled `label`.
    pub fn branch_cloud(&self, label: &str) -> Result<&PointCloud, AirwayError> {
        self.branch_by_label(label)
            .map(|b| &b.surface_cloud)
            .ok_or_else(|| AirwayError::UnknownLabel(label.to_string()))
    }

    /// Whether any surface point of branch `branch` lies strictly within
    /// `rho` of `query` and satisfies `accept`.
    pub(crate) fn cloud_has_neighbor(
        &self,
        branch: usize,
        query: &Vector3<f64>,
        rho: f64,
        mut accept: impl FnMut(&Vector3<f64>) -> bool,
    ) -> bool {
        let grid = &self.cloud_grids[branch];
        let points = &self.branches[branch].surface_cloud.points;
        let rho2 = rho * rho;
        if points.is_empty() || grid.bounds().distance(query) >= rho {
            return false;
        }
        let bounds = Aabb::point(*query).inflate(rho);
        let lo = grid.clamped_cell_of(&bounds.min);
        let hi = grid.clamped_cell_of(&bounds.max);
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    for &i in grid.items_in([x, y, z]) {
                        let p = &points[i as usize];
                        if (p - query).norm_squared() < rho2 && accept(p) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    /// Nearest centerline point to the pose position, with the misalignment
    /// between the optical axis and the parent-to-child tangent there.
    pub fn nearest_centerline(&self, pose: &Pose) -> CenterlineQueryResult {
        let p = pose.translation;
        let forward = pose.forward();
        let grid = &self.segment_grid;

        // (segment, t, distance)
        let mut candidates: Vec<(usize, f64, f64)> = Vec::new();
        let mut best = f64::INFINITY;
        let consider = |s: usize, candidates: &mut Vec<(usize, f64, f64)>, best: &mut f64| {
            let (t, d2) = self.segments[s].closest(&p);
            let d = d2.sqrt();
            if d <= *best + TIE_EPS {
                if d < *best {
                    *best = d;
                }
                candidates.push((s, t, d));
            }
        };

        if grid.cell_of(&p).is_some() {
            let center = grid.clamped_cell_of(&p);
            let cell = grid.cell_size();
            for ring in 0..=grid.max_ring(center) {
                grid.for_each_cell_in_ring(center, ring, |c| {
                    for &s in grid.items_in(c) {
                        consider(s as usize, &mut candidates, &mut best);
                    }
                });
                // cells beyond this ring are at least ring·cell away
                if best + TIE_EPS < ring as f64 * cell {
                    break;
                }
            }
        } else {
            for s in 0..self.segments.len() {
                consider(s, &mut candidates, &mut best);
            }
        }

        let mut chosen: Option<(usize, f64, f64, f64)> = None;
        for &(s, t, d) in &candidates {
            if d > best + TIE_EPS {
                continue;
            }
            let phi = forward.dot(&self.segments[s].tangent()).clamp(-1.0, 1.0).acos();
            let key = (phi, self.branches[self.segments[s].branch].id, s);
            let better = match chosen {
                None => true,
                Some((cs, _, _, cphi)) => {
                    let ckey = (cphi, self.branches[self.segments[cs].branch].id, cs);
                    key.0 < ckey.0 - 1e-12
                        || ((key.0 - ckey.0).abs() <= 1e-12 && (key.1, key.2) < (ckey.1, ckey.2))
                }
            };
            if better {
                chosen = Some((s, t, d, phi));
            }
        }
        let (s, t, d, phi) = chosen.expect("tree has at least one segment");
        let seg = &self.segments[s];
        CenterlineQueryResult {
            distance_e: d,
            angle_phi: phi.clamp(0.0, PI),
            branch_id: self.branches[seg.branch].id,
            local_radius_r: seg.r0 + (seg.r1 - seg.r0) * t,
            closest_point: seg.a + (seg.b - seg.a) * t,
        }
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Straight tube along +z from the origin, with an empty surface cloud.
    pub fn straight_branch(id: u32, label: &str, length: f64, radius: f64) -> Branch {
        Branch {
            id,
            anatomical_label: label.to_string(),
            generation: 0,
            parent_id: None,
            centerline: vec![Vector3::zeros(), Vector3::new(0.0, 0.0, length)],
            radii: vec![radius, radius],
            surface_cloud: PointCloud::empty(Frame::World),
        }
    }

    /// Trachea along +z with two children bending into ±x at the carina.
    pub fn bifurcation() -> AirwayTree {
        let mut root = straight_branch(0, "T", 40.0, 6.0);
        root.surface_cloud = ring_cloud(&root.centerline, 6.0, 40);
        let carina = Vector3::new(0.0, 0.0, 40.0);
        let mut kids = Vec::new();
        for (id, label, sx) in [(1, "L", -1.0), (2, "R", 1.0)] {
            let end = carina + Vector3::new(sx * 20.0, 0.0, 30.0);
            let centerline = vec![carina, end];
            kids.push(Branch {
                id,
                anatomical_label: label.to_string(),
                generation: 1,
                parent_id: Some(0),
                surface_cloud: ring_cloud(&centerline, 4.0, 40),
                centerline,
                radii: vec![4.0, 4.0],
            });
        }
        let mut branches = vec![root];
        branches.extend(kids);
        AirwayTree::new(branches, 0).unwrap()
    }

    /// Rings of points on a straight tube, `n` rings of 12 points.
    pub fn ring_cloud(centerline: &[Vector3<f64>], r: f64, n: usize) -> PointCloud {
        let a = centerline[0];
        let b = *centerline.last().unwrap();
        let axis = (b - a).normalize();
        let e1 = crate::geometry::any_perpendicular(&axis);
        let e2 = axis.cross(&e1);
        let mut pts = Vec::new();
        for i in 0..n {
            let s = (i as f64 + 0.5) / n as f64;
            for k in 0..12 {
                let ang = k as f64 * std::f64::consts::TAU / 12.0;
                pts.push(a + (b - a) * s + (e1 * ang.cos() + e2 * ang.sin()) * r);
            }
        }
        PointCloud::new(pts, Frame::World)
    }
}
