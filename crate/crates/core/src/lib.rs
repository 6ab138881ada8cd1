//! Gaussian splatting with per-point learned embeddings decoded by small
//! shared networks, rendered jointly to pinhole cameras and spinning LiDAR.

pub mod camera;
pub mod checkpoint;
pub mod check;
pub mod decoders;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod lidar;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod ssim;
pub mod trainer;

pub use error::{Error, Result};
