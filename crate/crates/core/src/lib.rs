//! Coarse-to-fine LiDAR and camera fusion for point cloud segmentation.
//!
//! The library is generic over the scalar type ([`scalar::Real`], `f32` or
//! `f64`). Data on disk and every reference comparison use `f64`; the
//! aliases below name the `f64` instantiations.

pub mod autodiff;
pub mod context;
pub mod data_model;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod networks;
pub mod offset;
pub mod pipeline;
pub mod scalar;
pub mod synthetic;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

pub type PointCloud = data_model::PointCloud<f64>;
pub type CameraImage = data_model::CameraImage<f64>;
pub type FrameBundle = data_model::FrameBundle<f64>;
pub type RigidTransform = geometry::RigidTransform<f64>;
pub type CameraIntrinsics = geometry::CameraIntrinsics<f64>;
pub type CalibrationChain = geometry::CalibrationChain<f64>;
pub type PixelCoords = geometry::PixelCoords<f64>;
pub type DenseArray = autodiff::DenseArray<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Models = pipeline::Models<f64>;
pub type OffsetTargets = offset::OffsetTargets<f64>;
