//! Procedural binary airway trees.

use std::f64::consts::TAU;

use nalgebra::{Unit, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AirwayError, AirwayTree, Branch, RayCaster};
use crate::geometry::{any_perpendicular, Frame, PointCloud};

/// Parameters of the procedural tree generator. Lengths in mm, angles in
/// degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeGenSpec {
    /// Generation of the deepest branches (trachea is generation 0).
    pub max_generation: u32,
    pub root_radius: f64,
    /// Nominal radius ratio between consecutive generations.
    pub radius_decay: f64,
    /// Relative uniform jitter applied to each branch's nominal radius.
    pub radius_jitter: f64,
    /// Relative radius drop from the start to the end of a branch.
    pub taper: f64,
    pub root_length: f64,
    pub length_decay: f64,
    pub length_jitter: f64,
    /// Range of the angle between a child and its parent's end tangent.
    pub branch_angle_deg: [f64; 2],
    /// Peak sideways bow of a branch centerline, as a fraction of its radius.
    pub bend: f64,
    pub vertices_per_branch: usize,
    pub points_per_branch: usize,
    pub origin: [f64; 3],
    pub direction: [f64; 3],
}

impl Default for TreeGenSpec {
    fn default() -> Self {
        Self {
            max_generation: 5,
            root_radius: 9.0,
            radius_decay: 0.7,
            radius_jitter: 0.05,
            taper: 0.1,
            root_length: 60.0,
            length_decay: 0.7,
            length_jitter: 0.1,
            branch_angle_deg: [25.0, 45.0],
            bend: 0.3,
            vertices_per_branch: 5,
            points_per_branch: 400,
            origin: [0.0, 0.0, 0.0],
            direction: [0.0, 0.0, 1.0],
        }
    }
}

impl TreeGenSpec {
    pub fn validate(&self) -> Result<(), AirwayError> {
        let bad = |m: &str| Err(AirwayError::InvalidSpec(m.to_string()));
        if self.max_generation < 1 || self.max_generation > 12 {
            return bad("max_generation must be in 1..=12");
        }
        if !(self.root_radius > 0.0 && self.root_length > 0.0) {
            return bad("root radius and length must be > 0");
        }
        if !(self.radius_decay > 0.0 && self.radius_decay <= 1.0)
            || !(self.length_decay > 0.0 && self.length_decay <= 1.0)
        {
            return bad("decay factors must be in (0, 1]");
        }
        for j in [self.radius_jitter, self.length_jitter, self.taper, self.bend] {
            if !(0.0..1.0).contains(&j) {
                return bad("jitter, taper and bend must be in [0, 1)");
            }
        }
        let [lo, hi] = self.branch_angle_deg;
        if !(lo > 0.0 && lo <= hi && hi < 90.0) {
            return bad("branch angles need 0 < min <= max < 90");
        }
        if self.vertices_per_branch < 2 {
            return bad("vertices_per_branch must be >= 2");
        }
        if self.points_per_branch == 0 {
            return bad("points_per_branch must be >= 1");
        }
        if Vector3::from(self.direction).norm() == 0.0 {
            return bad("direction must be nonzero");
        }
        Ok(())
    }

    /// Nominal (jitter-free) radius of a generation.
    pub fn nominal_radius(&self, generation: u32) -> f64 {
        self.root_radius * self.radius_decay.powi(generation as i32)
    }
}

struct Pending {
    id: u32,
    label: String,
    generation: u32,
    parent_id: Option<u32>,
    start: Vector3<f64>,
    direction: Vector3<f64>,
    plane_normal: Vector3<f64>,
}

/// Generates a binary tree down to `spec.max_generation`. Deterministic for a
/// given spec and RNG state.
pub fn generate_tree<R: Rng + ?Sized>(spec: &TreeGenSpec, rng: &mut R) -> Result<AirwayTree, AirwayError> {
    spec.validate()?;
    let jitter = |rng: &mut R, amount: f64| 1.0 + rng.random_range(-1.0..=1.0) * amount;

    let root_dir = Vector3::from(spec.direction).normalize();
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(Pending {
        id: 0,
        label: "T".to_string(),
        generation: 0,
        parent_id: None,
        start: Vector3::from(spec.origin),
        direction: root_dir,
        plane_normal: any_perpendicular(&root_dir),
    });

    let mut branches = Vec::new();
    let mut next_id = 1;
    while let Some(item) = queue.pop_front() {
        let g = item.generation as i32;
        let radius = spec.nominal_radius(item.generation) * jitter(rng, spec.radius_jitter);
        let length = spec.root_length * spec.length_decay.powi(g) * jitter(rng, spec.length_jitter);

        let bow_dir = {
            let a = rng.random_range(0.0..TAU);
            let e1 = any_perpendicular(&item.direction);
            let e2 = item.direction.cross(&e1);
            e1 * a.cos() + e2 * a.sin()
        };
        let bow = spec.bend * radius * rng.random_range(0.0..=1.0);
        let n = spec.vertices_per_branch;
        let mut centerline = Vec::with_capacity(n);
        let mut radii = Vec::with_capacity(n);
        for i in 0..n {
            let f = i as f64 / (n - 1) as f64;
            centerline.push(item.start + item.direction * (f * length) + bow_dir * (4.0 * bow * f * (1.0 - f)));
            radii.push(radius * (1.0 + spec.taper / 2.0 - spec.taper * f));
        }

        if item.generation < spec.max_generation {
            let end = centerline[n - 1];
            let tangent = (end - centerline[n - 2]).normalize();
            let mut normal = item.plane_normal - tangent * tangent.dot(&item.plane_normal);
            if normal.norm() < 1e-9 {
                normal = any_perpendicular(&tangent);
            }
            let normal = Unit::new_normalize(normal);
            let [lo, hi] = spec.branch_angle_deg;
            for (side, sign) in [("L", 1.0), ("R", -1.0)] {
                let angle = rng.random_range(lo..=hi).to_radians() * sign;
                let dir = UnitQuaternion::from_axis_angle(&normal, angle) * tangent;
                let child_normal = dir.cross(&normal).normalize();
                let label = if item.parent_id.is_none() {
                    side.to_string()
                } else {
                    format!("{}{}", item.label, side)
                };
                queue.push_back(Pending {
                    id: next_id,
                    label,
                    generation: item.generation + 1,
                    parent_id: Some(item.id),
                    start: end,
                    direction: dir,
                    plane_normal: child_normal,
                });
                next_id += 1;
            }
        }

        branches.push(Branch {
            id: item.id,
            anatomical_label: item.label,
            generation: item.generation,
            parent_id: item.parent_id,
            centerline,
            radii,
            surface_cloud: PointCloud::empty(Frame::World),
        });
    }

    let caster = RayCaster::from_branches(&branches);
    for b in branches.iter_mut() {
        b.surface_cloud = sample_wall(b, &caster, spec.points_per_branch, rng);
    }
    AirwayTree::new(branches, 0)
}

/// Uniform-ish samples of the branch wall that lie on the lumen boundary
/// (points buried inside a neighboring tube or junction are rejected).
fn sample_wall<R: Rng + ?Sized>(b: &Branch, caster: &RayCaster, count: usize, rng: &mut R) -> PointCloud {
    let areas: Vec<f64> = b
        .centerline
        .windows(2)
        .zip(b.radii.windows(2))
        .map(|(c, r)| (c[1] - c[0]).norm() * (r[0] + r[1]))
        .collect();
    let total: f64 = areas.iter().sum();
    let mut points = Vec::with_capacity(count);
    let mut attempts = 0;
    while points.len() < count && attempts < count * 100 {
        attempts += 1;
        let mut pick = rng.random_range(0.0..total);
        let mut k = 0;
        while k + 1 < areas.len() && pick >= areas[k] {
            pick -= areas[k];
            k += 1;
        }
        let a = b.centerline[k];
        let axis = (b.centerline[k + 1] - a).normalize();
        let len = (b.centerline[k + 1] - a).norm();
        let s: f64 = rng.random_range(0.0..1.0);
        let ang: f64 = rng.random_range(0.0..TAU);
        let e1 = any_perpendicular(&axis);
        let e2 = axis.cross(&e1);
        let r = b.radii[k] + (b.radii[k + 1] - b.radii[k]) * s;
        let p = a + axis * (s * len) + (e1 * ang.cos() + e2 * ang.sin()) * r;
        if !caster.is_inside_by(&p, 1e-6) {
            points.push(p);
        }
    }
    PointCloud::new(points, Frame::World)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn generate(spec: &TreeGenSpec, seed: u64) -> AirwayTree {
        generate_tree(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn one_generation_has_three_branches() {
        let spec = TreeGenSpec {
            max_generation: 1,
            ..TreeGenSpec::default()
        };
        let tree = generate(&spec, 1);
        assert_eq!(tree.branches().len(), 3);
        assert_eq!(tree.children_of(tree.root_id()).len(), 2);
    }

    #[test]
    fn five_generations_binary() {
        let tree = generate(&TreeGenSpec::default(), 2);
        assert_eq!(tree.branches().len(), 63);
        assert_eq!(tree.leaves().len(), 32);
        assert_eq!(tree.max_generation(), 5);
        for b in tree.branches() {
            assert!(b.surface_cloud.len() >= 390, "{} has {}", b.anatomical_label, b.surface_cloud.len());
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = TreeGenSpec {
            max_generation: 3,
            ..TreeGenSpec::default()
        };
        let a = crate::airway::tree_to_json(&generate(&spec, 42)).unwrap();
        let b = crate::airway::tree_to_json(&generate(&spec, 42)).unwrap();
        assert_eq!(a, b);
        let c = crate::airway::tree_to_json(&generate(&spec, 43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn radius_decay_per_generation() {
        let spec = TreeGenSpec {
            max_generation: 3,
            ..TreeGenSpec::default()
        };
        let tree = generate(&spec, 3);
        let want = 9.0 * 0.7f64.powi(3);
        assert!((spec.nominal_radius(3) - 3.087).abs() < 1e-12);
        for b in tree.branches().iter().filter(|b| b.generation == 3) {
            // taper is symmetric around the nominal radius
            let r = b.mean_radius();
            assert!((r - want).abs() <= want * spec.radius_jitter + 1e-9, "radius {r}");
        }
    }

    #[test]
    fn cloud_points_sit_on_tube_wall() {
        let spec = TreeGenSpec {
            max_generation: 2,
            taper: 0.0,
            bend: 0.0,
            ..TreeGenSpec::default()
        };
        let tree = generate(&spec, 4);
        for b in tree.branches() {
            let r = b.radii[0];
            for p in &tree.branch_cloud(&b.anatomical_label).unwrap().points {
                let d = b
                    .centerline
                    .windows(2)
                    .map(|w| {
                        let ab = w[1] - w[0];
                        let t = ((p - w[0]).dot(&ab) / ab.dot(&ab)).clamp(0.0, 1.0);
                        (p - (w[0] + ab * t)).norm()
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!((d - r).abs() < 0.1, "{}: {d} vs {r}", b.anatomical_label);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for spec in [
            TreeGenSpec {
                max_generation: 0,
                ..TreeGenSpec::default()
            },
            TreeGenSpec {
                branch_angle_deg: [50.0, 20.0],
                ..TreeGenSpec::default()
            },
            TreeGenSpec {
                radius_decay: 0.0,
                ..TreeGenSpec::default()
            },
            TreeGenSpec {
                root_radius: -1.0,
                ..TreeGenSpec::default()
            },
        ] {
            assert!(matches!(generate_tree(&spec, &mut rng), Err(AirwayError::InvalidSpec(_))));
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn generated_trees_are_valid(
            seed in 0u64..10_000,
            gens in 1u32..5,
            decay in 0.5f64..0.95,
            angle_lo in 10.0f64..40.0,
            spread in 0.0f64..30.0,
        ) {
            let spec = TreeGenSpec {
                max_generation: gens,
                radius_decay: decay,
                branch_angle_deg: [angle_lo, angle_lo + spread],
                points_per_branch: 50,
                ..TreeGenSpec::default()
            };
            // AirwayTree::new re-validates every structural invariant
            let tree = generate_tree(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            proptest::prop_assert_eq!(tree.branches().len(), (1usize << (gens + 1)) - 1);
            for b in tree.branches() {
                if let Some(p) = b.parent_id {
                    let parent = tree.branch_by_id(p).unwrap();
                    proptest::prop_assert_eq!(b.generation, parent.generation + 1);
                }
            }
        }
    }
}
