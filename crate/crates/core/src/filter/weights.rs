//! Per-particle likelihood terms.

use std::f64::consts::PI;

use crate::airway::{AirwayTree, CenterlineQueryResult};
use crate::geometry::{CameraModel, PointCloud, Pose};
use crate::perception::{render_depth, DepthMap, LandmarkObservation};
use crate::spatial::{Aabb, UniformGrid};

use super::{DensityForm, FilterConfig, FilterError};

/// Below this many pairs the brute-force scan beats building a grid.
const BRUTE_FORCE_PAIRS: usize = 4096;

/// Fraction of points of `a` whose nearest neighbor in `b` is strictly
/// closer than `rho`.
pub fn binary_count_distance(a: &PointCloud, b: &PointCloud, rho: f64) -> Result<f64, FilterError> {
    if a.is_empty() {
        return Err(FilterError::EmptyCloud);
    }
    if a.frame != b.frame {
        return Err(FilterError::FrameMismatch);
    }
    if !(rho > 0.0) {
        return Err(FilterError::InvalidRho(rho));
    }
    if b.is_empty() {
        return Ok(0.0);
    }
    let rho2 = rho * rho;
    let hits = if a.len() * b.len() <= BRUTE_FORCE_PAIRS {
        a.points
            .iter()
            .filter(|p| b.points.iter().any(|q| (q - *p).norm_squared() < rho2))
            .count()
    } else {
        let boxes: Vec<Aabb> = b.points.iter().map(|q| Aabb::point(*q)).collect();
        let grid = UniformGrid::build(&boxes, rho);
        a.points
            .iter()
            .filter(|p| {
                let mut hit = false;
                grid.for_each_item_in(&Aabb::point(**p).inflate(rho), |i| {
                    hit = hit || (b.points[i as usize] - *p).norm_squared() < rho2;
                });
                hit
            })
            .count()
    };
    Ok(hits as f64 / a.len() as f64)
}

/// Sum over observations of the binary-count overlap between the observed
/// cloud and the labeled branch cloud as seen from `pose`, keeping only
/// branch points inside the camera frustum. Unknown labels and empty
/// observations contribute nothing.
pub fn landmark_weight(pose: &Pose, obs: &[LandmarkObservation], tree: &AirwayTree, cam: &CameraModel, rho: f64) -> f64 {
    let world_to_cam = pose.inverse();
    let mut score = 0.0;
    for o in obs {
        let Some(branch) = tree.index_of_label(&o.anatomical_label) else {
            continue;
        };
        if o.cloud.is_empty() {
            continue;
        }
        // distances are rigid-invariant, so match in the world frame against
        // the branch's prebuilt index
        let hits = o
            .cloud
            .points
            .iter()
            .filter(|a| {
                let w = pose.transform_point(a);
                tree.cloud_has_neighbor(branch, &w, rho, |q| cam.in_frustum(&world_to_cam.transform_point(q)))
            })
            .count();
        score += hits as f64 / o.cloud.len() as f64;
    }
    score
}

/// `ln` of the centerline prior for a precomputed query.
pub(crate) fn log_centerline_weight(q: &CenterlineQueryResult, cfg: &FilterConfig) -> f64 {
    let s1 = cfg.sigma1.sigma(q.local_radius_r);
    let s2 = cfg.sigma2_phi;
    let kernel = -0.5 * (q.distance_e / s1).powi(2) - 0.5 * (q.angle_phi / s2).powi(2);
    match cfg.density {
        DensityForm::Normalized => kernel - (2.0 * PI * s1 * s2).ln(),
        DensityForm::KernelOnly => kernel,
    }
}

/// Gaussian prior on the distance to and misalignment with the nearest
/// centerline.
pub fn centerline_weight(pose: &Pose, tree: &AirwayTree, cfg: &FilterConfig) -> f64 {
    log_centerline_weight(&tree.nearest_centerline(pose), cfg).exp()
}

/// Zero-mean normalized cross-correlation over pixels valid in both maps.
/// `None` when fewer than half the pixels are jointly valid.
pub fn depth_ncc(a: &DepthMap, b: &DepthMap) -> Option<f64> {
    assert_eq!((a.width(), a.height()), (b.width(), b.height()), "depth map sizes differ");
    let valid = |d: f64| d > 0.0 && d.is_finite();
    let pairs: Vec<(f64, f64)> = a
        .values()
        .iter()
        .zip(b.values())
        .filter(|(x, y)| valid(**x) && valid(**y))
        .map(|(x, y)| (*x, *y))
        .collect();
    if 2 * pairs.len() < a.values().len() || pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Some(0.0);
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Depth-image agreement in [0, 1] between the observation and a render at
/// `pose`.
pub fn ncc_depth_weight(pose: &Pose, observed: &DepthMap, tree: &AirwayTree, cam: &CameraModel) -> f64 {
    let rendered = render_depth(tree, pose, cam);
    match depth_ncc(observed, &rendered) {
        Some(ncc) => (ncc + 1.0) / 2.0,
        None => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airway::fixtures::bifurcation;
    use crate::filter::Sigma1Form;
    use crate::geometry::{transform_cloud, Frame, MotionNoise};
    use crate::perception::{oracle_landmarks, LandmarkNoiseCfg};
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(a: &PointCloud, b: &PointCloud, rho: f64) -> f64 {
        let mut hits = 0;
        for p in &a.points {
            let nearest = b.points.iter().map(|q| (q - p).norm()).fold(f64::INFINITY, f64::min);
            if nearest < rho {
                hits += 1;
            }
        }
        hits as f64 / a.len() as f64
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> PointCloud {
        let pts = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                )
            })
            .collect();
        PointCloud::new(pts, Frame::Camera)
    }

    #[test]
    fn binary_count_basic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_cloud(&mut rng, 50, 10.0);
        assert_eq!(binary_count_distance(&a, &a, 0.1).unwrap(), 1.0);
        let far = PointCloud::new(a.points.iter().map(|p| p + Vector3::new(100.0, 0.0, 0.0)).collect(), Frame::Camera);
        assert_eq!(binary_count_distance(&a, &far, 3.0).unwrap(), 0.0);
        assert_eq!(binary_count_distance(&a, &PointCloud::empty(Frame::Camera), 3.0).unwrap(), 0.0);
        assert!(matches!(
            binary_count_distance(&PointCloud::empty(Frame::Camera), &a, 3.0),
            Err(FilterError::EmptyCloud)
        ));
        let world = PointCloud::new(a.points.clone(), Frame::World);
        assert!(binary_count_distance(&a, &world, 3.0).is_err());
    }

    #[test]
    fn binary_count_is_strict_at_rho() {
        let a = PointCloud::new(vec![Vector3::zeros()], Frame::World);
        let b = PointCloud::new(vec![Vector3::new(3.0, 0.0, 0.0)], Frame::World);
        assert_eq!(binary_count_distance(&a, &b, 3.0).unwrap(), 0.0);
        assert_eq!(binary_count_distance(&a, &b, 3.0 + 1e-12).unwrap(), 1.0);
    }

    #[test]
    fn binary_count_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let na = rng.random_range(1..=200);
            let nb = rng.random_range(0..=200);
            let a = random_cloud(&mut rng, na, 20.0);
            let b = random_cloud(&mut rng, nb, 20.0);
            for rho in [0.5, 3.0, 10.0] {
                assert_eq!(binary_count_distance(&a, &b, rho).unwrap(), brute_force(&a, &b, rho));
            }
        }
    }

    proptest! {
        #[test]
        fn binary_count_bounded_monotone_and_rigid(
            seed in any::<u64>(),
            rho in 0.1f64..8.0,
            angle in -3.0f64..3.0,
            shift in prop::array::uniform3(-50.0f64..50.0),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_cloud(&mut rng, 80, 10.0);
            let b = random_cloud(&mut rng, 90, 10.0);
            let d = binary_count_distance(&a, &b, rho).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!(binary_count_distance(&a, &b, rho * 1.5).unwrap() >= d);
            let t = Pose::new(
                nalgebra::UnitQuaternion::from_scaled_axis(Vector3::new(0.3, -0.5, 0.8).normalize() * angle),
                Vector3::from(shift),
            );
            let move_cloud = |c: &PointCloud| PointCloud::new(c.points.iter().map(|p| t.transform_point(p)).collect(), c.frame);
            let moved = binary_count_distance(&move_cloud(&a), &move_cloud(&b), rho).unwrap();
            // only pairs within rounding of rho may flip
            let near_boundary = a.points.iter().any(|p| b.points.iter().any(|q| ((q - p).norm() - rho).abs() < 1e-9));
            if !near_boundary {
                prop_assert_eq!(moved, d);
            }
        }
    }

    /// Landmark weight computed literally: move each branch cloud into the
    /// particle's camera frame, drop points outside the frustum, compare.
    fn landmark_reference(pose: &Pose, obs: &[LandmarkObservation], tree: &AirwayTree, cam: &CameraModel, rho: f64) -> f64 {
        let mut score = 0.0;
        for o in obs {
            let Ok(cloud) = tree.branch_cloud(&o.anatomical_label) else { continue };
            let local = transform_cloud(pose, cloud).unwrap();
            let kept = PointCloud::new(local.points.into_iter().filter(|p| cam.in_frustum(p)).collect(), Frame::Camera);
            score += binary_count_distance(&o.cloud, &kept, rho).unwrap();
        }
        score
    }

    fn zero_noise_obs(tree: &AirwayTree, pose: &Pose, cam: &CameraModel) -> Vec<LandmarkObservation> {
        let cfg = LandmarkNoiseCfg {
            sigma_depth: 0.0,
            ..LandmarkNoiseCfg::default()
        };
        oracle_landmarks(tree, pose, cam, &cfg, &mut ChaCha8Rng::seed_from_u64(9))
    }

    #[test]
    fn landmark_weight_at_ground_truth_counts_branches() {
        let tree = bifurcation();
        let cam = CameraModel::default();
        let gt = Pose::looking_along(Vector3::new(0.5, -0.5, 22.0), Vector3::new(0.05, 0.0, 1.0), Vector3::y());
        let obs = zero_noise_obs(&tree, &gt, &cam);
        assert!(obs.len() >= 2);
        let w = landmark_weight(&gt, &obs, &tree, &cam, 3.0);
        assert!((w - obs.len() as f64).abs() < 1e-12, "{w}");
        assert_eq!(landmark_weight(&gt, &[], &tree, &cam, 3.0), 0.0);
        let away = Pose::from_translation(Vector3::new(500.0, 0.0, 0.0));
        assert_eq!(landmark_weight(&away, &obs, &tree, &cam, 3.0), 0.0);
        let unknown = vec![LandmarkObservation {
            anatomical_label: "nope".into(),
            cloud: obs[0].cloud.clone(),
        }];
        assert_eq!(landmark_weight(&gt, &unknown, &tree, &cam, 3.0), 0.0);
    }

    #[test]
    fn landmark_weight_matches_reference() {
        let tree = bifurcation();
        let cam = CameraModel::default();
        let gt = Pose::looking_along(Vector3::new(0.0, 0.0, 20.0), Vector3::z(), Vector3::y());
        let obs = zero_noise_obs(&tree, &gt, &cam);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = gt.perturb(&MotionNoise::isotropic(2.0, 0.1), &mut rng);
            let fast = landmark_weight(&p, &obs, &tree, &cam, 3.0);
            let slow = landmark_reference(&p, &obs, &tree, &cam, 3.0);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    fn query(e: f64, phi: f64, r: f64) -> CenterlineQueryResult {
        CenterlineQueryResult {
            distance_e: e,
            angle_phi: phi,
            branch_id: 0,
            local_radius_r: r,
            closest_point: Vector3::zeros(),
        }
    }

    #[test]
    fn centerline_density_shape() {
        let cfg = FilterConfig::default();
        let r = 4.0;
        let s1 = PI / r;
        let s2 = PI / 6.0;
        let peak = log_centerline_weight(&query(0.0, 0.0, r), &cfg).exp();
        assert!((peak - 1.0 / (2.0 * PI * s1 * s2)).abs() < 1e-12);
        let one_sigma = log_centerline_weight(&query(s1, 0.0, r), &cfg).exp();
        assert!((one_sigma - (-0.5f64).exp() * peak).abs() < 1e-12);

        let kernel = FilterConfig {
            density: DensityForm::KernelOnly,
            ..FilterConfig::default()
        };
        assert_eq!(log_centerline_weight(&query(0.0, 0.0, r), &kernel), 0.0);
        let flipped = FilterConfig {
            sigma1: Sigma1Form::ROverPi,
            ..FilterConfig::default()
        };
        let v = log_centerline_weight(&query(1.0, 0.0, r), &flipped);
        let s = r / PI;
        assert!((v - (-0.5 / (s * s) - (2.0 * PI * s * s2).ln())).abs() < 1e-12);
    }

    #[test]
    fn centerline_weight_matches_formula_on_random_poses() {
        let tree = bifurcation();
        let cfg = FilterConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = Pose::new(
                nalgebra::UnitQuaternion::from_scaled_axis(Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )),
                Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..60.0)),
            );
            let q = tree.nearest_centerline(&p);
            let s1 = PI / q.local_radius_r;
            let s2 = PI / 6.0;
            let expected = (-(q.distance_e * q.distance_e) / (2.0 * s1 * s1)).exp()
                * (-(q.angle_phi * q.angle_phi) / (2.0 * s2 * s2)).exp()
                / (2.0 * PI * s1 * s2);
            let got = centerline_weight(&p, &tree, &cfg);
            assert!((got - expected).abs() <= 1e-12 * expected.max(1.0), "{got} vs {expected}");
        }
    }

    #[test]
    fn ncc_self_and_anti_correlation() {
        let mut a = DepthMap::invalid(4, 4);
        let mut b = DepthMap::invalid(4, 4);
        for v in 0..4 {
            for u in 0..4 {
                let near = (u + v) % 2 == 0;
                a.set(u, v, if near { 5.0 } else { 20.0 });
                b.set(u, v, if near { 20.0 } else { 5.0 });
            }
        }
        assert!((depth_ncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((depth_ncc(&a, &b).unwrap() + 1.0).abs() < 1e-12);
        let flat = DepthMap::filled(4, 4, 7.0);
        assert_eq!(depth_ncc(&a, &flat), Some(0.0));
        let mut sparse = DepthMap::invalid(4, 4);
        for u in 0..4 {
            sparse.set(u, 0, 3.0 + u as f64);
        }
        assert_eq!(depth_ncc(&a, &sparse), None);
    }

    #[test]
    fn ncc_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut a = DepthMap::invalid(8, 8);
            let mut b = DepthMap::invalid(8, 8);
            for v in 0..8 {
                for u in 0..8 {
                    if rng.random::<f64>() < 0.9 {
                        a.set(u, v, rng.random_range(1.0..50.0));
                    }
                    if rng.random::<f64>() < 0.9 {
                        b.set(u, v, rng.random_range(1.0..50.0));
                    }
                }
            }
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for v in 0..8 {
                for u in 0..8 {
                    if let (Some(x), Some(y)) = (a.get(u, v), b.get(u, v)) {
                        xs.push(x);
                        ys.push(y);
                    }
                }
            }
            let got = depth_ncc(&a, &b);
            if xs.len() * 2 < 64 {
                assert_eq!(got, None);
                continue;
            }
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
            let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
            assert!((got.unwrap() - cov / (vx * vy).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn ncc_weight_is_one_at_render_pose() {
        let tree = bifurcation();
        let cam = CameraModel::default().resized(24, 24);
        let pose = Pose::looking_along(Vector3::new(0.0, 1.0, 15.0), Vector3::new(0.1, 0.0, 1.0), Vector3::y());
        let observed = render_depth(&tree, &pose, &cam);
        assert!((ncc_depth_weight(&pose, &observed, &tree, &cam) - 1.0).abs() < 1e-12);
        let outside = Pose::from_translation(Vector3::new(100.0, 0.0, 0.0));
        assert_eq!(ncc_depth_weight(&outside, &observed, &tree, &cam), 0.0);
    }
}
