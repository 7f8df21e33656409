//! Particle-filter localization of an endoscope in a branch-labeled airway
//! tree.
//!
//! The pipeline: an [`airway::AirwayTree`] provides the anatomy,
//! [`perception`] turns a ground-truth camera path into noisy relative
//! motion, landmark clouds and depth images, and [`filter::ParticleFilter`]
//! fuses them into a pose estimate per frame. [`experiment`] wires these
//! together for batch runs and [`metrics`] scores the result.

pub mod airway;
pub mod experiment;
pub mod filter;
pub mod geometry;
pub mod metrics;
pub mod perception;
pub mod rng;
pub mod sim;
pub mod spatial;
pub mod trajectory;
