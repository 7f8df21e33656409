//! Ray casting against the airway lumen.
//!
//! The lumen is the union of one truncated cone per centerline segment and
//! one sphere per junction vertex. A ray cast from inside the lumen returns
//! the first point where it leaves that union. Exits through the flat face
//! at the root entrance or at a leaf tip are reported as [`ExitKind::OpenEnd`].

use nalgebra::Vector3;

use super::Branch;
use crate::spatial::{Aabb, UniformGrid};

const INSIDE_EPS: f64 = 1e-9;
const MAX_HOPS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    /// Left through the airway wall.
    Wall,
    /// Left through the open root entrance or a leaf tip.
    OpenEnd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayExit {
    /// Ray parameter of the exit point.
    pub t: f64,
    pub kind: ExitKind,
}

#[derive(Debug, Clone, Copy)]
enum Primitive {
    Cone {
        a: Vector3<f64>,
        axis: Vector3<f64>,
        len: f64,
        r0: f64,
        r1: f64,
        open_start: bool,
        open_end: bool,
    },
    Sphere {
        c: Vector3<f64>,
        r: f64,
    },
}

impl Primitive {
    fn aabb(&self) -> Aabb {
        match *self {
            Primitive::Cone { a, axis, len, r0, r1, .. } => {
                let b = a + axis * len;
                let r = r0.max(r1);
                Aabb {
                    min: a.inf(&b),
                    max: a.sup(&b),
                }
                .inflate(r)
            }
            Primitive::Sphere { c, r } => Aabb::point(c).inflate(r),
        }
    }

    fn contains(&self, p: &Vector3<f64>, eps: f64) -> bool {
        match *self {
            Primitive::Cone { a, axis, len, r0, r1, .. } => {
                let ap = p - a;
                let s = ap.dot(&axis);
                if s <= eps || s >= len - eps {
                    return false;
                }
                let radial2 = (ap.norm_squared() - s * s).max(0.0);
                let r = r0 + (r1 - r0) * s / len - eps;
                r > 0.0 && radial2 < r * r
            }
            Primitive::Sphere { c, r } => {
                let rr = r - eps;
                (p - c).norm_squared() < rr * rr
            }
        }
    }

    /// Parameter interval of the line `o + t d` inside the primitive, and how
    /// the line leaves it.
    fn interval(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64, ExitKind)> {
        match *self {
            Primitive::Sphere { c, r } => {
                let oc = o - c;
                let a = d.norm_squared();
                let b = 2.0 * oc.dot(d);
                let cc = oc.norm_squared() - r * r;
                let (t0, t1) = quadratic_roots(a, b, cc)?;
                Some((t0, t1, ExitKind::Wall))
            }
            Primitive::Cone {
                a,
                axis,
                len,
                r0,
                r1,
                open_start,
                open_end,
            } => {
                let oa = o - a;
                let s0 = oa.dot(&axis);
                let ds = d.dot(&axis);
                let (slo, shi, plane_exit_open) = if ds.abs() < 1e-300 {
                    if s0 < 0.0 || s0 > len {
                        return None;
                    }
                    (f64::NEG_INFINITY, f64::INFINITY, false)
                } else {
                    let ta = -s0 / ds;
                    let tb = (len - s0) / ds;
                    if ds > 0.0 {
                        (ta, tb, open_end)
                    } else {
                        (tb, ta, open_start)
                    }
                };
                let k = (r1 - r0) / len;
                let w0 = oa - axis * s0;
                let wd = d - axis * ds;
                let rho0 = r0 + k * s0;
                let rhod = k * ds;
                let qa = wd.norm_squared() - rhod * rhod;
                let qb = 2.0 * (w0.dot(&wd) - rho0 * rhod);
                let qc = w0.norm_squared() - rho0 * rho0;
                let (clo, chi) = negative_part(qa, qb, qc, d.norm_squared(), slo, shi)?;
                let lo = slo.max(clo);
                let hi = shi.min(chi);
                if lo >= hi {
                    return None;
                }
                let kind = if shi <= chi && plane_exit_open {
                    ExitKind::OpenEnd
                } else {
                    ExitKind::Wall
                };
                Some((lo, hi, kind))
            }
        }
    }
}

/// Sorted real roots of `a t² + b t + c`, `a > 0`.
fn quadratic_roots(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    let disc = b * b - 4.0 * a * c;
    if disc <= 0.0 {
        return None;
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    if q == 0.0 {
        let r = (-c / a).sqrt();
        return Some((-r, r));
    }
    let (x, y) = (q / a, c / q);
    Some(if x < y { (x, y) } else { (y, x) })
}

/// The piece of `{t : a t² + b t + c < 0}` overlapping `(slo, shi)`.
/// A convex cone section meets the slab in at most one such piece.
fn negative_part(a: f64, b: f64, c: f64, scale: f64, slo: f64, shi: f64) -> Option<(f64, f64)> {
    let inf = f64::INFINITY;
    if a.abs() <= 1e-12 * scale {
        if b.abs() <= 1e-300 {
            return (c < 0.0).then_some((-inf, inf));
        }
        let root = -c / b;
        return Some(if b > 0.0 { (-inf, root) } else { (root, inf) });
    }
    if a > 0.0 {
        return quadratic_roots(a, b, c);
    }
    match quadratic_roots(-a, -b, -c) {
        None => Some((-inf, inf)),
        Some((t1, t2)) => {
            let left = shi.min(t1) - slo;
            let right = shi - slo.max(t2);
            if left >= right {
                Some((-inf, t1))
            } else {
                Some((t2, inf))
            }
        }
    }
}

/// Lumen primitives with a uniform-grid index.
#[derive(Debug, Clone)]
pub struct RayCaster {
    prims: Vec<Primitive>,
    grid: UniformGrid,
}

impl RayCaster {
    pub fn from_branches(branches: &[Branch]) -> Self {
        let ids: std::collections::HashSet<u32> = branches.iter().map(|b| b.id).collect();
        let has_children: std::collections::HashSet<u32> = branches
            .iter()
            .filter_map(|b| b.parent_id)
            .filter(|p| ids.contains(p))
            .collect();
        let mut prims = Vec::new();
        let mut radii = Vec::new();
        for b in branches {
            let n = b.centerline.len();
            let is_root = b.parent_id.is_none();
            let is_leaf = !has_children.contains(&b.id);
            for k in 0..n - 1 {
                let a = b.centerline[k];
                let seg = b.centerline[k + 1] - a;
                let len = seg.norm();
                prims.push(Primitive::Cone {
                    a,
                    axis: seg / len,
                    len,
                    r0: b.radii[k],
                    r1: b.radii[k + 1],
                    open_start: is_root && k == 0,
                    open_end: is_leaf && k == n - 2,
                });
            }
            for k in 0..n {
                let junction = (k > 0 && k < n - 1) || (k == 0 && !is_root) || (k == n - 1 && !is_leaf);
                if junction {
                    prims.push(Primitive::Sphere {
                        c: b.centerline[k],
                        r: b.radii[k],
                    });
                }
            }
            radii.extend(b.radii.iter().copied());
        }
        radii.sort_by(|x, y| x.total_cmp(y));
        let cell = radii.get(radii.len() / 2).copied().unwrap_or(1.0).max(0.25);
        let boxes: Vec<Aabb> = prims.iter().map(Primitive::aabb).collect();
        let grid = UniformGrid::build(&boxes, cell);
        Self { prims, grid }
    }

    /// Indices of primitives strictly containing `p`.
    pub fn containing(&self, p: &Vector3<f64>) -> Vec<u32> {
        self.grid
            .items_at(p)
            .iter()
            .copied()
            .filter(|&i| self.prims[i as usize].contains(p, INSIDE_EPS))
            .collect()
    }

    /// Whether `p` lies strictly inside the lumen.
    pub fn is_inside(&self, p: &Vector3<f64>) -> bool {
        self.is_inside_by(p, INSIDE_EPS)
    }

    /// Whether `p` lies inside the lumen by more than `margin`.
    pub fn is_inside_by(&self, p: &Vector3<f64>, margin: f64) -> bool {
        self.grid
            .items_at(p)
            .iter()
            .any(|&i| self.prims[i as usize].contains(p, margin))
    }

    /// Exit of the ray `origin + t·dir` from the lumen; `None` when the
    /// origin is not inside the lumen.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<RayExit> {
        let inside = self.containing(origin);
        self.cast_from(origin, &inside, dir, f64::INFINITY)
    }

    /// Like [`RayCaster::cast`] with the origin's containing primitives
    /// precomputed. The walk stops once it passes `t_max`.
    pub fn cast_from(
        &self,
        origin: &Vector3<f64>,
        inside: &[u32],
        dir: &Vector3<f64>,
        t_max: f64,
    ) -> Option<RayExit> {
        let mut t = f64::NEG_INFINITY;
        let mut kind = ExitKind::Wall;
        for &i in inside {
            if let Some((_, hi, k)) = self.prims[i as usize].interval(origin, dir) {
                if hi > t {
                    t = hi;
                    kind = k;
                }
            }
        }
        if !(t > 0.0) {
            return None;
        }
        for _ in 0..MAX_HOPS {
            if t > t_max {
                break;
            }
            let p = origin + dir * t;
            let mut next = t;
            let mut next_kind = kind;
            for &i in self.grid.items_at(&p) {
                let prim = &self.prims[i as usize];
                if !prim.contains(&p, INSIDE_EPS) {
                    continue;
                }
                if let Some((_, hi, k)) = prim.interval(origin, dir) {
                    if hi > next + 1e-9 {
                        next = hi;
                        next_kind = k;
                    }
                }
            }
            if next > t {
                t = next;
                kind = next_kind;
            } else {
                break;
            }
        }
        Some(RayExit { t, kind })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airway::fixtures::{bifurcation, straight_branch};

    #[test]
    fn cone_interval_straight_tube() {
        let b = straight_branch(0, "T", 100.0, 5.0);
        let rc = RayCaster::from_branches(&[b]);
        let o = Vector3::new(0.0, 0.0, 10.0);
        // sideways ray hits the wall at the radius
        let hit = rc.cast(&o, &Vector3::x()).unwrap();
        assert!((hit.t - 5.0).abs() < 1e-12);
        assert_eq!(hit.kind, ExitKind::Wall);
        // along the axis it leaves through the open leaf tip
        let hit = rc.cast(&o, &Vector3::z()).unwrap();
        assert!((hit.t - 90.0).abs() < 1e-9);
        assert_eq!(hit.kind, ExitKind::OpenEnd);
        let hit = rc.cast(&o, &-Vector3::z()).unwrap();
        assert!((hit.t - 10.0).abs() < 1e-9);
        assert_eq!(hit.kind, ExitKind::OpenEnd);
        // outside the lumen there is nothing to report
        assert!(rc.cast(&Vector3::new(9.0, 0.0, 10.0), &Vector3::x()).is_none());
    }

    #[test]
    fn tapered_cone_oblique_ray() {
        let mut b = straight_branch(0, "T", 50.0, 5.0);
        b.radii = vec![5.0, 3.0];
        let rc = RayCaster::from_branches(&[b]);
        let o = Vector3::new(0.0, 0.0, 10.0);
        let d = Vector3::new(1.0, 0.0, 1.0);
        let hit = rc.cast(&o, &d).unwrap();
        // wall x = 5 - 2 z / 50, ray x = t, z = 10 + t
        let t = (5.0 - 0.4) / (1.0 + 0.04);
        assert!((hit.t - t).abs() < 1e-9);
    }

    #[test]
    fn bifurcation_walk_crosses_into_child() {
        let tree = bifurcation();
        let rc = tree.ray_caster();
        let o = Vector3::new(0.0, 0.0, 20.0);
        // ray aimed straight down the right child's axis
        let target = Vector3::new(10.0, 0.0, 55.0);
        let d = (target - o).normalize();
        let hit = rc.cast(&o, &d).unwrap();
        let p = o + d * hit.t;
        assert!(p.z > 40.0, "exit {p:?} should lie beyond the carina");
        // the exit point is on the lumen boundary
        assert!(!rc.is_inside(&p));
        assert!(rc.is_inside(&(o + d * (hit.t - 1e-3))));
    }

    #[test]
    fn exits_lie_on_boundary_for_many_rays() {
        let tree = bifurcation();
        let rc = tree.ray_caster();
        let o = Vector3::new(1.0, -0.5, 30.0);
        let mut n = 0;
        for i in 0..20 {
            for j in 0..20 {
                let d = Vector3::new(i as f64 / 10.0 - 1.0, j as f64 / 10.0 - 1.0, 1.0);
                let hit = rc.cast(&o, &d).unwrap();
                let p = o + d * hit.t;
                assert!(rc.is_inside(&(o + d * (hit.t * (1.0 - 1e-6)))));
                if hit.kind == ExitKind::Wall {
                    assert!(!rc.is_inside_by(&(o + d * (hit.t * (1.0 + 1e-6))), -1e-12));
                    n += 1;
                }
                assert!(p.iter().all(|c| c.is_finite()));
            }
        }
        assert!(n > 300);
    }
}
