//! Particle filter over camera poses.
//!
//! Each step propagates every particle by the odometry delta plus process
//! noise, reweights it by landmark overlap and the centerline prior,
//! reports the weighted mean pose and resamples.

mod weights;

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::airway::AirwayTree;
use crate::geometry::{weighted_mean_pose, CameraModel, GeometryError, MotionNoise, Pose, PoseDelta};
use crate::perception::{DepthMap, LandmarkObservation, OdometrySample};

pub use weights::{binary_count_distance, centerline_weight, depth_ncc, landmark_weight, ncc_depth_weight};

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point clouds are in different frames")]
    FrameMismatch,
    #[error("matching radius must be positive, got {0}")]
    InvalidRho(f64),
    #[error("invalid filter config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Which likelihood terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Landmark overlap times centerline prior.
    Full,
    /// Centerline prior only.
    NoDvr,
    /// Whole-image depth correlation times centerline prior.
    NoBsa,
}

impl FilterMode {
    pub fn name(self) -> &'static str {
        match self {
            FilterMode::Full => "full",
            FilterMode::NoDvr => "no_dvr",
            FilterMode::NoBsa => "no_bsa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Resampling {
    Always,
    /// Resample when ESS drops below `ratio · N`.
    EssThreshold { ratio: f64 },
}

/// Distance scale of the centerline prior as a function of local radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sigma1Form {
    PiOverR,
    ROverPi,
    Fixed { sigma_mm: f64 },
}

impl Sigma1Form {
    pub fn sigma(self, r: f64) -> f64 {
        match self {
            Sigma1Form::PiOverR => PI / r,
            Sigma1Form::ROverPi => r / PI,
            Sigma1Form::Fixed { sigma_mm } => sigma_mm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityForm {
    /// Gaussian pdf including the `1 / (2π σ₁ σ₂)` factor.
    Normalized,
    /// Unnormalized kernel, peak value 1.
    KernelOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Process noise added after composing each particle with the odometry.
    pub motion_noise: MotionNoise,
    /// Spread of the initial particle cloud around the start pose.
    pub init_noise: MotionNoise,
    /// Landmark matching radius, mm.
    pub rho_mm: f64,
    /// Angular scale of the centerline prior, rad.
    pub sigma2_phi: f64,
    pub sigma1: Sigma1Form,
    pub density: DensityForm,
    pub mode: FilterMode,
    pub resampling: Resampling,
    /// Evaluate particles on the rayon pool. Results are identical either way.
    pub parallel: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_particles: 216,
            motion_noise: MotionNoise::isotropic(0.5, 1f64.to_radians()),
            init_noise: MotionNoise::isotropic(1.0, 2f64.to_radians()),
            rho_mm: 3.0,
            sigma2_phi: PI / 6.0,
            sigma1: Sigma1Form::PiOverR,
            density: DensityForm::Normalized,
            mode: FilterMode::Full,
            resampling: Resampling::Always,
            parallel: false,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.n_particles == 0 {
            return Err(FilterError::InvalidConfig("n_particles must be >= 1"));
        }
        if !(self.rho_mm > 0.0 && self.rho_mm.is_finite()) {
            return Err(FilterError::InvalidConfig("rho_mm must be > 0"));
        }
        if !(self.sigma2_phi > 0.0 && self.sigma2_phi.is_finite()) {
            return Err(FilterError::InvalidConfig("sigma2_phi must be > 0"));
        }
        if let Sigma1Form::Fixed { sigma_mm } = self.sigma1 {
            if !(sigma_mm > 0.0 && sigma_mm.is_finite()) {
                return Err(FilterError::InvalidConfig("fixed sigma1 must be > 0"));
            }
        }
        if let Resampling::EssThreshold { ratio } = self.resampling {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(FilterError::InvalidConfig("ESS ratio must be in [0, 1]"));
            }
        }
        self.motion_noise.validate()?;
        self.init_noise.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub pose: Pose,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
    pub step_index: usize,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.weight).collect()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.particles.iter().map(|p| p.pose).collect()
    }

    /// `1 / Σ wᵢ²`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.particles.iter().map(|p| p.weight * p.weight).sum::<f64>()
    }
}

/// Observations available at one frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct Observations<'a> {
    pub landmarks: &'a [LandmarkObservation],
    /// Needed only in [`FilterMode::NoBsa`].
    pub depth: Option<&'a DepthMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub ess: f64,
    pub degenerate: bool,
    pub resampled: bool,
    pub propagate_s: f64,
    pub update_s: f64,
    pub estimate_s: f64,
    pub resample_s: f64,
    pub total_s: f64,
}

/// Filter bound to an airway model and camera intrinsics.
pub struct ParticleFilter<'a> {
    tree: &'a AirwayTree,
    cfg: FilterConfig,
    camera: CameraModel,
    ncc_camera: CameraModel,
}

fn particle_rng(base: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index as u64);
    rng
}

impl<'a> ParticleFilter<'a> {
    /// `camera` defines the landmark frustum; `ncc_camera` the resolution of
    /// depth renders in [`FilterMode::NoBsa`].
    pub fn new(
        tree: &'a AirwayTree,
        cfg: FilterConfig,
        camera: CameraModel,
        ncc_camera: CameraModel,
    ) -> Result<Self, FilterError> {
        cfg.validate()?;
        camera.validate()?;
        ncc_camera.validate()?;
        Ok(Self {
            tree,
            cfg,
            camera,
            ncc_camera,
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    pub fn initialize<R: Rng + ?Sized>(&self, initial_pose: &Pose, rng: &mut R) -> ParticleSet {
        let n = self.cfg.n_particles;
        let base: u64 = rng.random();
        let particles = (0..n)
            .map(|i| Particle {
                pose: initial_pose.perturb(&self.cfg.init_noise, &mut particle_rng(base, i)),
                weight: 1.0 / n as f64,
            })
            .collect();
        ParticleSet {
            particles,
            step_index: 0,
        }
    }

    pub fn propagate<R: Rng + ?Sized>(&self, set: &mut ParticleSet, delta: &PoseDelta, rng: &mut R) {
        let base: u64 = rng.random();
        let noise = self.cfg.motion_noise;
        let apply = |(i, p): (usize, &mut Particle)| {
            p.pose = p.pose.compose(delta).perturb(&noise, &mut particle_rng(base, i));
        };
        if self.cfg.parallel {
            set.particles.par_iter_mut().enumerate().for_each(apply);
        } else {
            set.particles.iter_mut().enumerate().for_each(apply);
        }
    }

    fn log_likelihood(&self, pose: &Pose, obs: &Observations) -> f64 {
        let q = self.tree.nearest_centerline(pose);
        let centerline = weights::log_centerline_weight(&q, &self.cfg);
        let observation = match self.cfg.mode {
            FilterMode::NoDvr => 0.0,
            FilterMode::Full if obs.landmarks.is_empty() => 0.0,
            FilterMode::Full => landmark_weight(pose, obs.landmarks, self.tree, &self.camera, self.cfg.rho_mm).ln(),
            FilterMode::NoBsa => match obs.depth {
                Some(d) => ncc_depth_weight(pose, d, self.tree, &self.ncc_camera).ln(),
                None => 0.0,
            },
        };
        centerline + observation
    }

    /// Multiplies each weight by the particle's likelihood and renormalizes
    /// to unit sum. Returns `true` when every likelihood was zero, in which
    /// case the weights are reset to uniform.
    pub fn update_weights(&self, set: &mut ParticleSet, obs: &Observations) -> bool {
        let log_lik: Vec<f64> = if self.cfg.parallel {
            set.particles.par_iter().map(|p| self.log_likelihood(&p.pose, obs)).collect()
        } else {
            set.particles.iter().map(|p| self.log_likelihood(&p.pose, obs)).collect()
        };
        let log_w: Vec<f64> = set
            .particles
            .iter()
            .zip(&log_lik)
            .map(|(p, l)| p.weight.ln() + l)
            .collect();
        normalize_log_weights(set, &log_w)
    }

    /// Weighted mean pose of the set.
    pub fn estimate(&self, set: &ParticleSet) -> Pose {
        estimate(set)
    }

    pub fn resample<R: Rng + ?Sized>(&self, set: &mut ParticleSet, rng: &mut R) {
        resample(set, rng)
    }

    /// One filter iteration: propagate, reweight, estimate from the
    /// reweighted set, then resample.
    pub fn step<R: Rng + ?Sized>(
        &self,
        set: &mut ParticleSet,
        odometry: &OdometrySample,
        obs: &Observations,
        rng: &mut R,
    ) -> (Pose, StepDiagnostics) {
        let t0 = Instant::now();
        self.propagate(set, &odometry.delta, rng);
        let t1 = Instant::now();
        let degenerate = self.update_weights(set, obs);
        let t2 = Instant::now();
        let pose = estimate(set);
        let t3 = Instant::now();
        let ess = set.effective_sample_size();
        let resampled = match self.cfg.resampling {
            Resampling::Always => true,
            Resampling::EssThreshold { ratio } => ess < ratio * set.len() as f64,
        };
        if resampled {
            resample(set, rng);
        }
        let t4 = Instant::now();
        set.step_index += 1;
        let diag = StepDiagnostics {
            step: set.step_index,
            ess,
            degenerate,
            resampled,
            propagate_s: (t1 - t0).as_secs_f64(),
            update_s: (t2 - t1).as_secs_f64(),
            estimate_s: (t3 - t2).as_secs_f64(),
            resample_s: (t4 - t3).as_secs_f64(),
            total_s: (t4 - t0).as_secs_f64(),
        };
        (pose, diag)
    }
}

/// Exponentiates and normalizes log-weights in place. All `-inf` (or any
/// non-finite maximum) resets to uniform and returns `true`.
fn normalize_log_weights(set: &mut ParticleSet, log_w: &[f64]) -> bool {
    let n = set.len() as f64;
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        for p in &mut set.particles {
            p.weight = 1.0 / n;
        }
        return true;
    }
    let mut sum = 0.0;
    for (p, l) in set.particles.iter_mut().zip(log_w) {
        let w = if l.is_nan() { 0.0 } else { (l - max).exp() };
        p.weight = w;
        sum += w;
    }
    for p in &mut set.particles {
        p.weight /= sum;
    }
    false
}

/// Weighted mean pose of a normalized set.
pub fn estimate(set: &ParticleSet) -> Pose {
    weighted_mean_pose(&set.poses(), &set.weights()).expect("particle weights are normalized")
}

/// Systematic resampling: one uniform offset, N evenly spaced pointers.
pub fn resample<R: Rng + ?Sized>(set: &mut ParticleSet, rng: &mut R) {
    let n = set.len();
    let step = 1.0 / n as f64;
    let u0: f64 = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut cum = set.particles[0].weight;
    let mut i = 0;
    for k in 0..n {
        let u = u0 + k as f64 * step;
        while u > cum && i + 1 < n {
            i += 1;
            cum += set.particles[i].weight;
        }
        out.push(Particle {
            pose: set.particles[i].pose,
            weight: step,
        });
    }
    set.particles = out;
}
