//! Datasets on disk: manifests, rasters, point clouds, and the synthetic generator.

pub mod dataset;
pub mod manifest;
pub mod ply;
pub mod raster;
pub mod synthetic;
pub mod voxel;

pub use dataset::{read_split, CameraFrame, Dataset, LidarScan};
pub use manifest::{load_manifest, DatasetManifest, Units};
pub use synthetic::{generate_synthetic_dataset, Recipe};
pub use voxel::{aggregate_and_downsample, VoxelFilter};
