//! LiDAR-camera 3D object detection: point decoration with image features, a
//! voxel BEV proposal stage, cross-modal RoI grid fusion, per-RoI point
//! generation supervised by dense object templates, and AP evaluation.
//!
//! Geometry, point-cloud and autodiff primitives are generic over the scalar
//! type; the network itself runs in `f64`. The aliases below fix the scalar.

pub mod autodiff;
pub mod class;
pub mod cmff;
pub mod commands;
pub mod config;
pub mod data;
pub mod densify;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod model;
pub mod pointcloud;
pub mod rpg;
pub mod rpn;
pub mod scalar;
pub mod spe;

pub use error::{Error, Result};

pub type Box3D = geometry::Box3D<f64>;
pub type Box3DF32 = geometry::Box3D<f32>;
pub type CameraCalibration = geometry::CameraCalibration<f64>;
pub type FeatureMap = geometry::FeatureMap<f64>;
pub type PointCloud = pointcloud::PointCloud<f64>;
pub type PointCloudF32 = pointcloud::PointCloud<f32>;
pub type Tensor = autodiff::Tensor<f64>;
pub type TensorF32 = autodiff::Tensor<f32>;
pub type Tape = autodiff::Tape<f64>;
pub type ParamStore = autodiff::ParamStore<f64>;
