//! Pseudo-point LiDAR/camera fusion for two-stage 3D detection.
//!
//! Images are lifted into 3D through depth completion and inverse
//! projection, so both sensors share one point-cloud representation.
//! Raw and pseudo points are voxelized into per-branch feature
//! hierarchies, aggregated around farthest-point keypoints, pooled per
//! region of interest and fused by a sigmoid-gated attention step before
//! box refinement.
//!
//! Everything runs on deterministic synthetic scenes ([`scene`]) so each
//! stage can be checked against an analytic or brute-force oracle.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod caaf;
pub mod calib;
pub mod cloud;
pub mod config;
pub mod depth;
mod error;
pub mod loss;
pub mod pipeline;
pub mod prconv;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result, Stage, StageContext, StageError};
