//! Joint detection and multi-object tracking on LiDAR point clouds.
//!
//! Scans are encoded into feature tokens, consecutive token sets are compared
//! through cosine affinity matrices, and those affinities are refined with
//! self-attention (within one matrix) and cross-attention (across the two
//! matrices of a three-scan window). Network heads turn tokens and refined
//! affinities into 3D boxes and per-point tracking offsets, which a greedy
//! cascade links into tracklets.

pub mod affinity;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod scans;
pub mod tracker;
pub mod train;

pub use error::{ModtError, Result};
