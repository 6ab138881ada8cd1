//! Dataset manifests.
//!
//! A manifest is a JSON file; relative paths resolve against its directory.
//!
//! ```json
//! {
//!   "units": "m",
//!   "point_units": "m",
//!   "cameras": [{
//!     "name": "cam000",
//!     "image": "rgb/cam000.png",
//!     "sky_mask": "sky/cam000.png",
//!     "semantic": "semantic/cam000.embr",
//!     "lidar": "scan000",
//!     "pose": {"position": [0, 0, 0], "orientation": [1, 0, 0, 0]},
//!     "intrinsics": {"fx": 50, "fy": 50, "cx": 32, "cy": 32, "width": 64, "height": 64}
//!   }],
//!   "lidar": [{
//!     "name": "scan000",
//!     "points": "lidar/scan000.ply",
//!     "pose": {"position": [0, 0, 0], "orientation": [1, 0, 0, 0]},
//!     "spec": {"width": 256, "height": 32, "theta_min": -0.4, "theta_max": 0.4, "max_range": 30}
//!   }]
//! }
//! ```
//!
//! `units` applies to pose positions and `max_range`; `point_units` (default:
//! `units`) applies to coordinates inside point files. An optional
//! `init_points` PLY (world frame) seeds the Gaussians when present; otherwise
//! the aggregated scans do. `semantic` and `lidar`
//! (the name of the scan paired with a camera frame) are optional. Poses map
//! sensor coordinates to the world frame, which by convention is the frame of
//! the first LiDAR scan. Orientations are `[w, x, y, z]`.
//!
//! Loading converts everything but point files to meters and renormalizes
//! quaternions, so a loaded manifest saved again has `units = "m"`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::CameraView;
use crate::error::{Error, Result};
use crate::lidar::LidarSpec;
use crate::math::{Pose, Quat};

/// Quaternion norms within this distance of 1 are renormalized silently.
pub const QUAT_SILENT_DRIFT: f64 = 1e-3;
/// Norms further off, up to this distance, are renormalized with a warning;
/// anything beyond is an error.
pub const QUAT_MAX_DRIFT: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    #[default]
    M,
    Cm,
    Mm,
}

impl Units {
    pub fn to_meters(self) -> f64 {
        match self {
            Units::M => 1.0,
            Units::Cm => 0.01,
            Units::Mm => 0.001,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub name: String,
    pub image: PathBuf,
    pub sky_mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lidar: Option<String>,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

impl CameraEntry {
    pub fn view(&self) -> Result<CameraView> {
        let k = &self.intrinsics;
        CameraView::new(self.pose, k.fx, k.fy, k.cx, k.cy, k.width, k.height)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarEntry {
    pub name: String,
    pub points: PathBuf,
    pub pose: Pose,
    pub spec: LidarSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Directory relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
    #[serde(default)]
    pub units: Units,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_units: Option<Units>,
    pub cameras: Vec<CameraEntry>,
    #[serde(default)]
    pub lidar: Vec<LidarEntry>,
    /// World-frame PLY used to place the initial Gaussians instead of the
    /// aggregated scans.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_points: Option<PathBuf>,
    /// Non-fatal issues found while loading; not serialized.
    #[serde(skip)]
    pub warnings: Vec<String>,
}

fn manifest_err(entry: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Manifest {
        entry: entry.into(),
        message: message.into(),
    }
}

/// Renormalizes a quaternion according to the drift tiers.
fn normalize_orientation(q: &Quat, entry: &str, warnings: &mut Vec<String>) -> Result<Quat> {
    if q.iter().any(|c| !c.is_finite()) {
        return Err(manifest_err(entry, "non-finite orientation"));
    }
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    let drift = (n - 1.0).abs();
    if drift > QUAT_MAX_DRIFT {
        return Err(manifest_err(entry, format!("orientation norm {n} is not a unit quaternion")));
    }
    if drift > QUAT_SILENT_DRIFT {
        let msg = format!("{entry}: orientation norm {n} renormalized");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    // already-normalized input is kept bit-exact so load/save/load is a fixed point
    if drift <= 4.0 * f64::EPSILON {
        return Ok(*q);
    }
    Ok(q.map(|c| c / n))
}

fn check_pose(pose: &mut Pose, scale: f64, entry: &str, warnings: &mut Vec<String>) -> Result<()> {
    if pose.position.iter().any(|c| !c.is_finite()) {
        return Err(manifest_err(entry, "non-finite position"));
    }
    pose.orientation = normalize_orientation(&pose.orientation, entry, warnings)?;
    if scale != 1.0 {
        pose.position = pose.position.map(|c| c * scale);
    }
    Ok(())
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Meters per point-file unit.
    pub fn point_scale(&self) -> f64 {
        self.point_units.unwrap_or(self.units).to_meters()
    }

    /// LiDAR losses apply only when the dataset has scans.
    pub fn lidar_losses_enabled(&self) -> bool {
        !self.lidar.is_empty()
    }

    pub fn camera_index(&self, name: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.name == name)
    }

    pub fn lidar_index(&self, name: &str) -> Option<usize> {
        self.lidar.iter().position(|l| l.name == name)
    }

    /// Validates a parsed manifest, resolving nothing on disk.
    fn normalize(&mut self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(manifest_err("cameras", "at least one camera frame is required"));
        }
        let scale = self.units.to_meters();
        // point files keep the declared units after positions move to meters
        if self.units != Units::M {
            self.point_units = Some(self.point_units.unwrap_or(self.units));
        }
        let mut names = HashSet::new();
        let mut warnings = Vec::new();
        for l in &mut self.lidar {
            let entry = format!("lidar `{}`", l.name);
            if !names.insert(format!("lidar:{}", l.name)) {
                return Err(manifest_err(entry, "duplicate name"));
            }
            check_pose(&mut l.pose, scale, &entry, &mut warnings)?;
            l.spec.max_range *= scale;
            l.spec.validate().map_err(|e| manifest_err(entry, e.to_string()))?;
        }
        for c in &mut self.cameras {
            let entry = format!("camera `{}`", c.name);
            if !names.insert(format!("camera:{}", c.name)) {
                return Err(manifest_err(entry, "duplicate name"));
            }
            check_pose(&mut c.pose, scale, &entry, &mut warnings)?;
            c.view().map_err(|e| manifest_err(&entry, e.to_string()))?;
            if let Some(l) = &c.lidar {
                if !self.lidar.iter().any(|s| &s.name == l) {
                    return Err(manifest_err(entry, format!("paired scan `{l}` is not in the manifest")));
                }
            }
        }
        self.units = Units::M;
        self.warnings.extend(warnings);
        Ok(())
    }

    fn check_files(&self) -> Result<()> {
        let check = |p: &Path, entry: &str, field: &str| {
            let full = self.resolve(p);
            if full.is_file() {
                Ok(())
            } else {
                Err(manifest_err(entry, format!("{field} file {} does not exist", full.display())))
            }
        };
        for c in &self.cameras {
            let entry = format!("camera `{}`", c.name);
            check(&c.image, &entry, "image")?;
            check(&c.sky_mask, &entry, "sky mask")?;
            if let Some(s) = &c.semantic {
                check(s, &entry, "semantic")?;
            }
        }
        for l in &self.lidar {
            check(&l.points, &format!("lidar `{}`", l.name), "points")?;
        }
        if let Some(p) = &self.init_points {
            check(p, "init_points", "points")?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Parses, validates and unit-normalizes a manifest; every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    let mut m: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| manifest_err(path.display().to_string(), format!("malformed manifest: {e}")))?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.normalize()?;
    m.check_files()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(dir: &Path, orientation: Quat) -> PathBuf {
        fs::write(dir.join("a.png"), b"").unwrap();
        fs::write(dir.join("sky.png"), b"").unwrap();
        let m = serde_json::json!({
            "cameras": [{
                "name": "c0", "image": "a.png", "sky_mask": "sky.png",
                "pose": {"position": [1.0, 2.0, 3.0], "orientation": orientation},
                "intrinsics": {"fx": 10.0, "fy": 10.0, "cx": 4.0, "cy": 4.0, "width": 8, "height": 8}
            }]
        });
        let p = dir.join("manifest.json");
        fs::write(&p, m.to_string()).unwrap();
        p
    }

    #[test]
    fn minimal_manifest_disables_lidar() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(&minimal(dir.path(), [1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(!m.lidar_losses_enabled());
        assert!(m.warnings.is_empty());
        assert_eq!(m.cameras[0].pose.position, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn dangling_path_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = minimal(dir.path(), [1.0, 0.0, 0.0, 0.0]);
        fs::remove_file(dir.path().join("a.png")).unwrap();
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("a.png") && err.contains("c0"), "{err}");
    }

    #[test]
    fn quaternion_drift_tiers() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(&minimal(dir.path(), [1.0005, 0.0, 0.0, 0.0])).unwrap();
        assert!(m.warnings.is_empty());
        assert_eq!(m.cameras[0].pose.orientation, [1.0, 0.0, 0.0, 0.0]);

        let m = load_manifest(&minimal(dir.path(), [1.01, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(m.warnings.len(), 1);
        assert_eq!(m.cameras[0].pose.orientation, [1.0, 0.0, 0.0, 0.0]);

        let err = load_manifest(&minimal(dir.path(), [1.2, 0.0, 0.0, 0.0])).unwrap_err();
        assert!(err.to_string().contains("c0"));
    }

    #[test]
    fn units_convert_to_meters_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = minimal(dir.path(), [0.5, 0.5, 0.5, 0.5]);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        v["units"] = "cm".into();
        fs::write(&p, v.to_string()).unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.cameras[0].pose.position, [0.01, 0.02, 0.03]);
        assert_eq!(m.point_scale(), 0.01);
        m.save(&p).unwrap();
        let again = load_manifest(&p).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn malformed_pose() {
        let dir = tempfile::tempdir().unwrap();
        let p = minimal(dir.path(), [1.0, 0.0, 0.0, 0.0]);
        let text = fs::read_to_string(&p).unwrap().replace("\"orientation\":[1.0,0.0,0.0,0.0]", "\"orientation\":[1.0,0.0]");
        fs::write(&p, text).unwrap();
        assert!(load_manifest(&p).unwrap_err().to_string().contains("malformed"));
    }
}
