//! A manifest with every referenced raster and scan loaded into memory.

use std::path::Path;

use rayon::prelude::*;

use crate::camera::CameraView;
use crate::error::{Error, Result};
use crate::grid::{Image, Mask};
use crate::io::manifest::{load_manifest, CameraEntry, DatasetManifest, LidarEntry};
use crate::io::ply::{read_ply, ScanPoint};
use crate::io::raster::{read_float_raster, read_mask_png, read_rgb_png};
use crate::io::voxel::{aggregate_and_downsample, VoxelFilter};
use crate::lidar::{build_range_images, LidarSpec, RangeImageSet};
use crate::math::Pose;
use crate::pipeline::{CameraSample, LidarSample, Sample};

#[derive(Clone, Debug)]
pub struct CameraFrame {
    pub name: String,
    pub view: CameraView,
    pub rgb: Image,
    /// True on sky pixels.
    pub sky: Mask,
    pub semantic: Option<Image>,
    /// Index of the paired scan in [`Dataset::scans`].
    pub lidar: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct LidarScan {
    pub name: String,
    pub pose: Pose,
    pub spec: LidarSpec,
    /// Sensor-frame points in meters.
    pub points: Vec<ScanPoint>,
    pub target: RangeImageSet,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub frames: Vec<CameraFrame>,
    pub scans: Vec<LidarScan>,
}

fn shape_err(entry: &CameraEntry, what: &str, got: (usize, usize)) -> Error {
    Error::Manifest {
        entry: format!("camera `{}`", entry.name),
        message: format!(
            "{what} is {}x{}, intrinsics say {}x{}",
            got.0, got.1, entry.intrinsics.width, entry.intrinsics.height
        ),
    }
}

fn load_frame(m: &DatasetManifest, entry: &CameraEntry) -> Result<CameraFrame> {
    let view = entry.view()?;
    let rgb = read_rgb_png(&m.resolve(&entry.image))?;
    let size = (view.width, view.height);
    if (rgb.width, rgb.height) != size {
        return Err(shape_err(entry, "image", (rgb.width, rgb.height)));
    }
    let sky = read_mask_png(&m.resolve(&entry.sky_mask))?;
    if (sky.width, sky.height) != size {
        return Err(shape_err(entry, "sky mask", (sky.width, sky.height)));
    }
    let semantic = match &entry.semantic {
        Some(p) => {
            let s = read_float_raster(&m.resolve(p))?;
            if (s.width, s.height) != size {
                return Err(shape_err(entry, "semantic map", (s.width, s.height)));
            }
            Some(s)
        }
        None => None,
    };
    Ok(CameraFrame {
        name: entry.name.clone(),
        view,
        rgb,
        sky,
        semantic,
        lidar: entry.lidar.as_deref().and_then(|n| m.lidar_index(n)),
    })
}

fn load_scan(m: &DatasetManifest, entry: &LidarEntry) -> Result<LidarScan> {
    let scale = m.point_scale();
    let points: Vec<ScanPoint> = read_ply(&m.resolve(&entry.points))?
        .into_iter()
        .map(|(p, i)| (p.map(|c| c * scale), i))
        .collect();
    let target = build_range_images(&points, &entry.spec);
    Ok(LidarScan {
        name: entry.name.clone(),
        pose: entry.pose,
        spec: entry.spec,
        points,
        target,
    })
}

impl Dataset {
    /// Loads a manifest and all of its files (in parallel per file).
    pub fn load(manifest_path: &Path) -> Result<Self> {
        Self::from_manifest(load_manifest(manifest_path)?)
    }

    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        let frames = manifest
            .cameras
            .par_iter()
            .map(|c| load_frame(&manifest, c))
            .collect::<Result<Vec<_>>>()?;
        let scans = manifest
            .lidar
            .par_iter()
            .map(|l| load_scan(&manifest, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, frames, scans })
    }

    /// Downsampled world-frame points for initialization: the manifest's
    /// `init_points` file if given, otherwise the aggregated scans.
    pub fn init_points(&self, filter: &VoxelFilter) -> Result<Vec<[f64; 3]>> {
        let scans: Vec<(Pose, Vec<ScanPoint>)> = match &self.manifest.init_points {
            Some(p) => {
                let scale = self.manifest.point_scale();
                let pts = read_ply(&self.manifest.resolve(p))?
                    .into_iter()
                    .map(|(q, i)| (q.map(|c| c * scale), i))
                    .collect();
                vec![(Pose::default(), pts)]
            }
            None => self.scans.iter().map(|s| (s.pose, s.points.clone())).collect(),
        };
        let out = aggregate_and_downsample(&scans, filter);
        if out.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        Ok(out)
    }

    /// Supervision for camera frame `i` plus its paired scan, if any.
    pub fn sample(&self, i: usize, with_lidar: bool) -> Sample<'_> {
        let f = &self.frames[i];
        Sample {
            camera: Some(CameraSample {
                view: &f.view,
                rgb: &f.rgb,
                sky: &f.sky,
                semantic: f.semantic.as_ref(),
            }),
            lidar: f.lidar.filter(|_| with_lidar).map(|j| self.lidar_sample(j)),
        }
    }

    pub fn lidar_sample(&self, j: usize) -> LidarSample<'_> {
        let s = &self.scans[j];
        LidarSample {
            pose: &s.pose,
            spec: &s.spec,
            target: &s.target,
        }
    }

    pub fn frame_index(&self, name: &str) -> Option<usize> {
        self.frames.iter().position(|f| f.name == name)
    }

    pub fn scan_index(&self, name: &str) -> Option<usize> {
        self.scans.iter().position(|s| s.name == name)
    }
}

/// Reads a held-out list: one frame or scan name per line; blank lines and
/// `#` comments are ignored.
pub fn read_split(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}
