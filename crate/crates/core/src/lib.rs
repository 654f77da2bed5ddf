//! Box pose and dimension estimation from depth images.
//!
//! The pipeline segments box instances from a depth image, enumerates
//! rotation hypotheses, rejects those inconsistent with the observed depth,
//! and searches the per-axis scale of a unit-cube template until its rendered
//! silhouette matches the observation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod depthfilter;
pub mod dimsearch;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod metrics;
pub mod overlay;
pub mod pipeline;
pub mod pose;
pub mod render;
pub mod scalar;
pub mod scenegen;
pub mod segment;
pub mod suites;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Real;
pub use types::{
    compose, rotation_angle, scaled_template, BoxDims, CameraIntrinsics, DepthImage, Hypothesis,
    InstanceMask, Pose, ScaleInterval, ScaleVec, CANONICAL_EDGE_M,
};

pub type Pose64 = Pose<f64>;
pub type Pose32 = Pose<f32>;
pub type BoxDims64 = BoxDims<f64>;
pub type BoxDims32 = BoxDims<f32>;
pub type ScaleVec64 = ScaleVec<f64>;
pub type ScaleVec32 = ScaleVec<f32>;
pub type CameraIntrinsics64 = CameraIntrinsics<f64>;
pub type CameraIntrinsics32 = CameraIntrinsics<f32>;
