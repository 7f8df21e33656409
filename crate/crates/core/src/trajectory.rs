//! Timestamped pose sequences and their CSV form
//! (`t,x,y,z,qw,qx,qy,qz`, position in mm, time in s).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;

/// Nominal video rate used to timestamp frames.
pub const FRAME_RATE_HZ: f64 = 15.0;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {reason}")]
    InvalidRow { row: usize, reason: &'static str },
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub poses: Vec<Pose>,
}

impl Trajectory {
    /// Poses sampled at [`FRAME_RATE_HZ`] starting from t = 0.
    pub fn from_poses(poses: Vec<Pose>) -> Self {
        let times = (0..poses.len()).map(|k| k as f64 / FRAME_RATE_HZ).collect();
        Self { times, poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TrajectoryError> {
        let mut out = csv::Writer::from_writer(w);
        for (t, p) in self.times.iter().zip(&self.poses) {
            let [qw, qx, qy, qz] = p.quaternion_wxyz();
            out.serialize(Row {
                t: *t,
                x: p.translation.x,
                y: p.translation.y,
                z: p.translation.z,
                qw,
                qx,
                qy,
                qz,
            })?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, TrajectoryError> {
        let mut reader = csv::Reader::from_reader(r);
        let mut traj = Trajectory::default();
        for (row, rec) in reader.deserialize::<Row>().enumerate() {
            let rec = rec?;
            let q = [rec.qw, rec.qx, rec.qy, rec.qz];
            let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            if !(norm > 1e-9 && norm.is_finite()) {
                return Err(TrajectoryError::InvalidRow { row, reason: "degenerate quaternion" });
            }
            if ![rec.t, rec.x, rec.y, rec.z].iter().all(|v| v.is_finite()) {
                return Err(TrajectoryError::InvalidRow { row, reason: "non-finite value" });
            }
            traj.times.push(rec.t);
            traj.poses.push(Pose::from_parts(q, Vector3::new(rec.x, rec.y, rec.z)));
        }
        Ok(traj)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrajectoryError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrajectoryError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}
