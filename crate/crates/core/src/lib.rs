//! Robust Gaussian-splatting RGB-D SLAM.

pub mod dataset;
pub mod degradation;
pub mod densify;
pub mod enhance;
pub mod error;
pub mod fusion;
pub mod image;
pub mod mapping;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod rasterizer;
pub mod tracking;
pub mod types;

pub use error::{Error, Result};
pub use image::{Image, Mask, RgbImage, ScalarMap};
pub use types::{CameraPose, Frame, Gaussian3D, GaussianMap, ImagePyramid, Intrinsics};
