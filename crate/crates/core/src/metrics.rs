//! Trajectory accuracy and throughput.
//!
//! Errors are plain translation distances in the shared airway frame; no
//! alignment is applied before scoring.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::airway::AirwayTree;
use crate::filter::StepDiagnostics;
use crate::trajectory::Trajectory;

/// Timestamps closer than this are considered equal.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("trajectory lengths differ: {est} estimated vs {gt} ground truth")]
    LengthMismatch { est: usize, gt: usize },
    #[error("trajectory is empty")]
    Empty,
    #[error("timestamps differ at frame {0}")]
    TimestampMismatch(usize),
}

/// Per-frame translation error, mm.
pub fn frame_errors(est: &Trajectory, gt: &Trajectory) -> Result<Vec<f64>, MetricsError> {
    if est.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            est: est.len(),
            gt: gt.len(),
        });
    }
    if est.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(i) = (0..est.times.len().min(gt.times.len())).find(|&i| (est.times[i] - gt.times[i]).abs() > TIME_EPS) {
        return Err(MetricsError::TimestampMismatch(i));
    }
    Ok(est
        .poses
        .iter()
        .zip(&gt.poses)
        .map(|(a, b)| (a.translation - b.translation).norm())
        .collect())
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Absolute trajectory error: mean and std of per-frame errors.
pub fn ate(est: &Trajectory, gt: &Trajectory) -> Result<(f64, f64), MetricsError> {
    Ok(mean_std(&frame_errors(est, gt)?))
}

fn fraction_below(errors: &[f64], threshold: f64) -> f64 {
    errors.iter().filter(|e| **e < threshold).count() as f64 / errors.len() as f64
}

/// Fraction of frames with error strictly below `threshold` mm.
pub fn success_rate(est: &Trajectory, gt: &Trajectory, threshold: f64) -> Result<f64, MetricsError> {
    Ok(fraction_below(&frame_errors(est, gt)?, threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationAte {
    pub ate_mean: f64,
    pub count: usize,
}

/// Generation of the branch nearest each ground-truth pose.
pub fn frame_generations(gt: &Trajectory, tree: &AirwayTree) -> Vec<u32> {
    gt.poses
        .iter()
        .map(|p| {
            let id = tree.nearest_centerline(p).branch_id;
            tree.branch_by_id(id).map_or(0, |b| b.generation)
        })
        .collect()
}

fn group_by_generation(errors: &[f64], generations: &[u32]) -> BTreeMap<u32, GenerationAte> {
    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (e, g) in errors.iter().zip(generations) {
        let entry = sums.entry(*g).or_default();
        entry.0 += e;
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(g, (sum, count))| {
            (
                g,
                GenerationAte {
                    ate_mean: sum / count as f64,
                    count,
                },
            )
        })
        .collect()
}

pub fn per_generation_ate(
    est: &Trajectory,
    gt: &Trajectory,
    tree: &AirwayTree,
) -> Result<BTreeMap<u32, GenerationAte>, MetricsError> {
    let errors = frame_errors(est, gt)?;
    Ok(group_by_generation(&errors, &frame_generations(gt, tree)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub steps: usize,
    pub total_s: f64,
    pub steps_per_second: f64,
    pub propagate_s: f64,
    pub update_s: f64,
    pub estimate_s: f64,
    pub resample_s: f64,
}

/// Steps per second of filter wall time, with summed phase times.
pub fn throughput(diags: &[StepDiagnostics]) -> Option<Throughput> {
    if diags.is_empty() {
        return None;
    }
    let sum = |f: fn(&StepDiagnostics) -> f64| diags.iter().map(f).sum::<f64>();
    let total_s = sum(|d| d.total_s);
    Some(Throughput {
        steps: diags.len(),
        total_s,
        steps_per_second: if total_s > 0.0 { diags.len() as f64 / total_s } else { f64::INFINITY },
        propagate_s: sum(|d| d.propagate_s),
        update_s: sum(|d| d.update_s),
        estimate_s: sum(|d| d.estimate_s),
        resample_s: sum(|d| d.resample_s),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub frames: usize,
    pub ate_mean: f64,
    pub ate_std: f64,
    pub sr5: f64,
    pub sr10: f64,
    pub per_generation: BTreeMap<u32, GenerationAte>,
    /// Absent for runs without a filter (dead reckoning).
    pub throughput: Option<Throughput>,
    pub degenerate_steps: usize,
}

impl TrajectoryReport {
    pub fn steps_per_second(&self) -> Option<f64> {
        self.throughput.map(|t| t.steps_per_second)
    }
}

/// Per-frame errors plus the generation of each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameErrors {
    pub times: Vec<f64>,
    pub errors: Vec<f64>,
    pub generations: Vec<u32>,
}

impl FrameErrors {
    pub fn compute(est: &Trajectory, gt: &Trajectory, tree: &AirwayTree) -> Result<Self, MetricsError> {
        Ok(Self {
            times: gt.times.clone(),
            errors: frame_errors(est, gt)?,
            generations: frame_generations(gt, tree),
        })
    }

    pub fn report(&self, diags: &[StepDiagnostics]) -> TrajectoryReport {
        let (ate_mean, ate_std) = mean_std(&self.errors);
        TrajectoryReport {
            frames: self.errors.len(),
            ate_mean,
            ate_std,
            sr5: fraction_below(&self.errors, 5.0),
            sr10: fraction_below(&self.errors, 10.0),
            per_generation: group_by_generation(&self.errors, &self.generations),
            throughput: throughput(diags),
            degenerate_steps: diags.iter().filter(|d| d.degenerate).count(),
        }
    }

    /// CSV with header `t,err_mm,generation`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "err_mm", "generation"])?;
        for ((t, e), g) in self.times.iter().zip(&self.errors).zip(&self.generations) {
            out.write_record([t.to_string(), e.to_string(), g.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}
