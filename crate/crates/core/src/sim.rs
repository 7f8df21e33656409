//! Synthetic endoscope insertions along the airway centerlines.

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::airway::AirwayTree;
use crate::geometry::{any_perpendicular, Pose};
use crate::trajectory::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("no branch labeled {0:?}")]
    UnknownLabel(String),
    #[error("branch {0:?} is not a leaf")]
    NotALeaf(String),
    #[error("invalid insertion spec: {0}")]
    InvalidSpec(&'static str),
    #[error("route is shorter than the start offset plus end margin")]
    RouteTooShort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InsertionTarget {
    Leaf { label: String },
    RandomLeaf,
    /// Depth-first inspection of every leaf, retracting to each bifurcation.
    AllLeaves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InsertionSpec {
    pub target: InsertionTarget,
    /// Advance per frame at the trachea entrance, mm.
    pub speed_mm_per_frame: f64,
    /// Slow down in proportion to the local radius, as an operator does in
    /// narrow distal airways.
    pub scale_speed_with_radius: bool,
    /// Peak lateral offset from the centerline as a fraction of the radius.
    pub lateral_jitter: f64,
    /// Peak deviation of the optical axis from the centerline tangent, deg.
    pub orientation_jitter_deg: f64,
    /// Range of wavelengths of the smooth jitter, mm of travel.
    pub jitter_wavelength_mm: [f64; 2],
    /// Distance into the trachea of the first frame, mm.
    pub start_offset_mm: f64,
    /// Distance short of the final leaf tip at which the insertion stops, mm.
    pub end_margin_mm: f64,
    pub max_frames: usize,
}

impl Default for InsertionSpec {
    fn default() -> Self {
        Self {
            target: InsertionTarget::RandomLeaf,
            speed_mm_per_frame: 1.0,
            scale_speed_with_radius: true,
            lateral_jitter: 0.2,
            orientation_jitter_deg: 5.0,
            jitter_wavelength_mm: [15.0, 40.0],
            start_offset_mm: 2.0,
            end_margin_mm: 2.0,
            max_frames: 20_000,
        }
    }
}

impl InsertionSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.speed_mm_per_frame > 0.0 && self.speed_mm_per_frame.is_finite()) {
            return Err(SimError::InvalidSpec("speed must be > 0"));
        }
        if !(0.0..1.0).contains(&self.lateral_jitter) {
            return Err(SimError::InvalidSpec("lateral jitter must be in [0, 1)"));
        }
        if !(self.orientation_jitter_deg >= 0.0 && self.orientation_jitter_deg < 90.0) {
            return Err(SimError::InvalidSpec("orientation jitter must be in [0, 90) deg"));
        }
        let [lo, hi] = self.jitter_wavelength_mm;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(SimError::InvalidSpec("jitter wavelengths must satisfy 0 < lo <= hi"));
        }
        if !(self.start_offset_mm >= 0.0 && self.end_margin_mm >= 0.0) {
            return Err(SimError::InvalidSpec("offsets must be >= 0"));
        }
        if self.max_frames == 0 {
            return Err(SimError::InvalidSpec("max_frames must be >= 1"));
        }
        Ok(())
    }
}

/// Part of a route along one branch, from arc length `from` to `to`.
#[derive(Debug, Clone, Copy)]
struct Piece {
    branch: usize,
    from: f64,
    to: f64,
}

impl Piece {
    fn len(&self) -> f64 {
        (self.to - self.from).abs()
    }
}

/// Cumulative arc length at each centerline vertex.
fn arc_lengths(points: &[Vector3<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0];
    for w in points.windows(2) {
        acc.push(acc.last().unwrap() + (w[1] - w[0]).norm());
    }
    acc
}

/// Centerline point, unit parent-to-child tangent and radius at arc length
/// `s` of a branch.
fn sample_branch(points: &[Vector3<f64>], radii: &[f64], arcs: &[f64], s: f64) -> (Vector3<f64>, Vector3<f64>, f64) {
    let last = points.len() - 2;
    let j = arcs[1..].iter().position(|&a| s < a).unwrap_or(last).min(last);
    let seg_len = arcs[j + 1] - arcs[j];
    let t = ((s - arcs[j]) / seg_len).clamp(0.0, 1.0);
    let tangent = (points[j + 1] - points[j]) / seg_len;
    let p = points[j] + (points[j + 1] - points[j]) * t;
    (p, tangent, radii[j] + (radii[j + 1] - radii[j]) * t)
}

/// Bounded smooth signal in [-1, 1]: a normalized sum of sinusoids.
struct Wobble {
    terms: Vec<(f64, f64, f64)>,
}

impl Wobble {
    fn new<R: Rng + ?Sized>(rng: &mut R, wavelengths: [f64; 2]) -> Self {
        let mut terms: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let lambda = if wavelengths[1] > wavelengths[0] {
                    rng.random_range(wavelengths[0]..wavelengths[1])
                } else {
                    wavelengths[0]
                };
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (rng.random_range(0.2..1.0), std::f64::consts::TAU / lambda, phase)
            })
            .collect();
        let total: f64 = terms.iter().map(|t| t.0).sum();
        for t in &mut terms {
            t.0 /= total;
        }
        Self { terms }
    }

    fn at(&self, d: f64) -> f64 {
        self.terms.iter().map(|(a, w, p)| a * (w * d + p).sin()).sum()
    }
}

fn leaf_route(tree: &AirwayTree, leaf_id: u32, lengths: &[f64]) -> Vec<Piece> {
    let path = tree.path_to(leaf_id).expect("leaf belongs to tree");
    path.iter()
        .map(|id| {
            let i = index_of(tree, *id);
            Piece {
                branch: i,
                from: 0.0,
                to: lengths[i],
            }
        })
        .collect()
}

fn index_of(tree: &AirwayTree, id: u32) -> usize {
    tree.branches().iter().position(|b| b.id == id).expect("branch id exists")
}

fn all_leaves_route(tree: &AirwayTree, lengths: &[f64]) -> Vec<Piece> {
    fn visit(tree: &AirwayTree, i: usize, lengths: &[f64], out: &mut Vec<Piece>) {
        out.push(Piece {
            branch: i,
            from: 0.0,
            to: lengths[i],
        });
        for child in tree.children_of(tree.branches()[i].id) {
            visit(tree, index_of(tree, child.id), lengths, out);
        }
        out.push(Piece {
            branch: i,
            from: lengths[i],
            to: 0.0,
        });
    }
    let mut out = Vec::new();
    visit(tree, index_of(tree, tree.root_id()), lengths, &mut out);
    // no need to back out after the last leaf
    while out.last().is_some_and(|p| p.to < p.from) {
        out.pop();
    }
    out
}

/// Camera path from the trachea toward the spec's target. The camera looks
/// along the parent-to-child centerline tangent, also while retracting.
pub fn simulate_trajectory<R: Rng + ?Sized>(tree: &AirwayTree, spec: &InsertionSpec, rng: &mut R) -> Result<Trajectory, SimError> {
    spec.validate()?;
    let branches = tree.branches();
    let arcs: Vec<Vec<f64>> = branches.iter().map(|b| arc_lengths(&b.centerline)).collect();
    let lengths: Vec<f64> = arcs.iter().map(|a| *a.last().unwrap()).collect();

    let route = match &spec.target {
        InsertionTarget::Leaf { label } => {
            let b = tree.branch_by_label(label).ok_or_else(|| SimError::UnknownLabel(label.clone()))?;
            if !tree.children_of(b.id).is_empty() {
                return Err(SimError::NotALeaf(label.clone()));
            }
            leaf_route(tree, b.id, &lengths)
        }
        InsertionTarget::RandomLeaf => {
            let leaves = tree.leaves();
            let leaf = leaves[rng.random_range(0..leaves.len())].id;
            leaf_route(tree, leaf, &lengths)
        }
        InsertionTarget::AllLeaves => all_leaves_route(tree, &lengths),
    };
    let total: f64 = route.iter().map(Piece::len).sum();
    let end = total - spec.end_margin_mm;
    if end < spec.start_offset_mm {
        return Err(SimError::RouteTooShort);
    }

    let wobble: Vec<Wobble> = (0..4).map(|_| Wobble::new(rng, spec.jitter_wavelength_mm)).collect();
    let max_angle = spec.orientation_jitter_deg.to_radians();
    let root = tree.root();
    let ref_radius = root.radii[0];

    let locate = |d: f64| {
        let mut rest = d;
        for (k, piece) in route.iter().enumerate() {
            if rest <= piece.len() || k + 1 == route.len() {
                let s = if piece.to >= piece.from {
                    piece.from + rest
                } else {
                    piece.from - rest
                };
                let s = s.clamp(0.0, lengths[piece.branch]);
                let b = &branches[piece.branch];
                return sample_branch(&b.centerline, &b.radii, &arcs[piece.branch], s);
            }
            rest -= piece.len();
        }
        unreachable!("route is non-empty")
    };

    let mut poses = Vec::new();
    let mut up: Option<Vector3<f64>> = None;
    let mut d = spec.start_offset_mm;
    while d <= end + 1e-9 && poses.len() < spec.max_frames {
        let (center, tangent, radius) = locate(d);
        let n1 = match up {
            Some(prev) => {
                let projected = prev - tangent * tangent.dot(&prev);
                if projected.norm() > 1e-9 {
                    projected.normalize()
                } else {
                    any_perpendicular(&tangent)
                }
            }
            None => any_perpendicular(&tangent),
        };
        up = Some(n1);
        let n2 = tangent.cross(&n1);
        let offset = (n1 * wobble[0].at(d) + n2 * wobble[1].at(d)) * (spec.lateral_jitter * radius / 2f64.sqrt());
        let base = Pose::looking_along(center + offset, tangent, n1);
        let tilt = Vector3::new(wobble[2].at(d), wobble[3].at(d), 0.0) * (max_angle / 2f64.sqrt());
        let pose = if max_angle > 0.0 {
            Pose::new(base.rotation * UnitQuaternion::from_scaled_axis(tilt), base.translation)
        } else {
            base
        };
        poses.push(pose);
        let step = if spec.scale_speed_with_radius {
            spec.speed_mm_per_frame * radius / ref_radius
        } else {
            spec.speed_mm_per_frame
        };
        d += step;
    }
    Ok(Trajectory::from_poses(poses))
}
