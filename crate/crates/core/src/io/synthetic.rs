//! Analytic sphere-and-box scenes rendered to a complete on-disk dataset.
//!
//! Camera pixels take the flat color of the first surface their center ray
//! hits; misses are sky. LiDAR beams are cast through range-image pixel
//! centers, so every stored point projects back into the pixel it came from.
//! The world frame of the written manifest is the frame of the first scan.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraView;
use crate::error::{Error, Result};
use crate::grid::{Image, Mask};
use crate::io::manifest::{CameraEntry, DatasetManifest, Intrinsics, LidarEntry, Units};
use crate::io::ply::{write_ply, ScanPoint};
use crate::io::raster::{write_float_raster, write_mask_png, write_rgb_png};
use crate::lidar::{build_range_images, spherical_unproject, LidarSpec, RangeImageSet};
use crate::math::Pose;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
        color: [f64; 3],
        reflectivity: f64,
        tag: String,
    },
    /// Axis-aligned box.
    Box {
        min: [f64; 3],
        max: [f64; 3],
        color: [f64; 3],
        reflectivity: f64,
        tag: String,
    },
}

impl Shape {
    fn color(&self) -> [f64; 3] {
        match self {
            Shape::Sphere { color, .. } | Shape::Box { color, .. } => *color,
        }
    }

    fn reflectivity(&self) -> f64 {
        match self {
            Shape::Sphere { reflectivity, .. } | Shape::Box { reflectivity, .. } => *reflectivity,
        }
    }

    fn tag(&self) -> &str {
        match self {
            Shape::Sphere { tag, .. } | Shape::Box { tag, .. } => tag,
        }
    }

    /// Nearest positive hit distance along a unit ray.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        const EPS: f64 = 1e-9;
        match self {
            Shape::Sphere { center, radius, .. } => {
                let oc = o - Vector3::from(*center);
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [-b - s, -b + s].into_iter().find(|&t| t > EPS)
            }
            Shape::Box { min, max, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    if d[k] == 0.0 {
                        if o[k] < min[k] || o[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (min[k] - o[k]) / d[k];
                    let b = (max[k] - o[k]) / d[k];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 {
                    return None;
                }
                [t0, t1].into_iter().find(|&t| t > EPS)
            }
        }
    }

    fn validate(&self, i: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Recipe(format!("shape {i}: {m}")));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.color().iter().all(|&c| unit(c)) || !unit(self.reflectivity()) {
            return bad("color and reflectivity must lie in [0, 1]");
        }
        match self {
            Shape::Sphere { center, radius, .. } => {
                if !(*radius > 0.0) || center.iter().any(|c| !c.is_finite()) {
                    return bad("sphere needs a finite center and positive radius");
                }
            }
            Shape::Box { min, max, .. } => {
                if (0..3).any(|k| !(min[k] < max[k])) {
                    return bad("box needs min < max on every axis");
                }
            }
        }
        Ok(())
    }
}

/// Sensors placed evenly on a horizontal circle, all looking at `target`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orbit {
    pub center: [f64; 3],
    pub radius: f64,
    pub height: f64,
    pub target: [f64; 3],
}

impl Orbit {
    fn position(&self, angle: f64) -> [f64; 3] {
        [
            self.center[0] + self.radius * angle.cos(),
            self.center[1] + self.radius * angle.sin(),
            self.center[2] + self.height,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in radians.
    pub fov_x: f64,
    pub orbit: Orbit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarRig {
    pub count: usize,
    pub spec: LidarSpec,
    pub orbit: Orbit,
    /// Probability that a return is dropped regardless of geometry.
    #[serde(default)]
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub shapes: Vec<Shape>,
    /// Semantic vector of each tag.
    pub tags: BTreeMap<String, [f64; 3]>,
    pub sky_color: [f64; 3],
    pub cameras: CameraRig,
    pub lidar: Option<LidarRig>,
    /// Every `holdout_every`-th frame and scan (the last of each group) is held out.
    pub holdout_every: usize,
}

impl Recipe {
    /// Ground slab, a sphere, and two boxes seen by 20 cameras at 64×64 and 10
    /// scans at 32×256.
    pub fn toy() -> Self {
        let sphere = |center, radius, color, reflectivity, tag: &str| Shape::Sphere {
            center,
            radius,
            color,
            reflectivity,
            tag: tag.into(),
        };
        let cube = |min, max, color, reflectivity, tag: &str| Shape::Box {
            min,
            max,
            color,
            reflectivity,
            tag: tag.into(),
        };
        Recipe {
            shapes: vec![
                cube([-6.0, -6.0, -0.2], [6.0, 6.0, 0.0], [0.45, 0.42, 0.38], 0.3, "ground"),
                sphere([0.0, 0.0, 0.8], 0.8, [0.85, 0.2, 0.15], 0.8, "object"),
                cube([1.2, -1.8, 0.0], [2.2, -0.8, 1.0], [0.2, 0.35, 0.8], 0.6, "object"),
                cube([-2.4, 0.6, 0.0], [-1.4, 1.8, 1.4], [0.25, 0.7, 0.3], 0.5, "building"),
            ],
            tags: BTreeMap::from([
                ("ground".into(), [0.0, 1.0, 0.0]),
                ("object".into(), [1.0, 0.0, 0.0]),
                ("building".into(), [0.0, 0.0, 1.0]),
            ]),
            sky_color: [0.55, 0.7, 0.95],
            cameras: CameraRig {
                count: 20,
                width: 64,
                height: 64,
                fov_x: 1.0,
                orbit: Orbit {
                    center: [0.0, 0.0, 0.0],
                    radius: 6.0,
                    height: 2.5,
                    target: [0.0, 0.0, 0.6],
                },
            },
            lidar: Some(LidarRig {
                count: 10,
                spec: LidarSpec {
                    width: 256,
                    height: 32,
                    theta_min: -0.5,
                    theta_max: 0.3,
                    max_range: 30.0,
                },
                orbit: Orbit {
                    center: [0.0, 0.0, 0.0],
                    radius: 3.5,
                    height: 1.2,
                    target: [0.0, 0.0, 1.2],
                },
                dropout: 0.02,
            }),
            holdout_every: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::Recipe("no shapes".into()));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            s.validate(i)?;
            if !self.tags.contains_key(s.tag()) {
                return Err(Error::Recipe(format!("shape {i}: unknown tag `{}`", s.tag())));
            }
        }
        if self.cameras.count == 0 || self.cameras.width == 0 || self.cameras.height == 0 {
            return Err(Error::Recipe("need at least one camera with a non-empty image".into()));
        }
        if !(self.cameras.fov_x > 0.0 && self.cameras.fov_x < PI) {
            return Err(Error::Recipe("camera fov must lie in (0, π)".into()));
        }
        if let Some(l) = &self.lidar {
            l.spec.validate()?;
            if l.count == 0 || !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::Recipe("lidar needs count ≥ 1 and dropout in [0, 1)".into()));
            }
        }
        if self.holdout_every < 2 {
            return Err(Error::Recipe("holdout_every must be at least 2".into()));
        }
        Ok(())
    }

    fn hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, &Shape)> {
        self.shapes
            .iter()
            .filter_map(|s| s.intersect(o, d).map(|t| (t, s)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Axis-aligned bounds of all shapes.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for s in &self.shapes {
            let (a, b) = match s {
                Shape::Sphere { center, radius, .. } => (center.map(|c| c - radius), center.map(|c| c + radius)),
                Shape::Box { min, max, .. } => (*min, *max),
            };
            for k in 0..3 {
                lo[k] = lo[k].min(a[k]);
                hi[k] = hi[k].max(b[k]);
            }
        }
        (lo, hi)
    }

    pub fn diameter(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
    }
}

/// Ground truth of one camera frame.
#[derive(Clone, Debug)]
pub struct SyntheticFrame {
    pub view: CameraView,
    pub rgb: Image,
    pub sky: Mask,
    pub semantic: Image,
    /// Ray length to the first hit; 0 on sky.
    pub distance: Image,
}

pub fn render_frame(recipe: &Recipe, view: &CameraView) -> SyntheticFrame {
    let (w, h) = (view.width, view.height);
    let mut rgb = Image::zeros(w, h, 3);
    let mut semantic = Image::zeros(w, h, 3);
    let mut distance = Image::zeros(w, h, 1);
    let mut sky = Mask::filled(w, h, false);
    let r = view.pose.rotation();
    let o = view.pose.center();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let dc = Vector3::new((x as f64 + 0.5 - view.cx) / view.fx, (y as f64 + 0.5 - view.cy) / view.fy, 1.0);
            let d = (r * dc).normalize();
            match recipe.hit(&o, &d) {
                Some((t, s)) => {
                    rgb.data[p * 3..p * 3 + 3].copy_from_slice(&s.color());
                    semantic.data[p * 3..p * 3 + 3].copy_from_slice(&recipe.tags[s.tag()]);
                    distance.data[p] = t;
                }
                None => {
                    rgb.data[p * 3..p * 3 + 3].copy_from_slice(&recipe.sky_color);
                    sky.data[p] = true;
                }
            }
        }
    }
    SyntheticFrame {
        view: *view,
        rgb,
        sky,
        semantic,
        distance,
    }
}

/// Casts one beam through every range-image pixel center. Points are in the
/// sensor frame and rounded to f32, the precision they are stored at.
pub fn scan_points(recipe: &Recipe, pose: &Pose, spec: &LidarSpec, dropout: f64, rng: &mut impl Rng) -> Vec<ScanPoint> {
    let r = pose.rotation();
    let o = pose.center();
    let mut out = Vec::new();
    for v in 0..spec.height {
        for u in 0..spec.width {
            let ds = Vector3::from(spherical_unproject(u as f64 + 0.5, v as f64 + 0.5, 1.0, spec));
            let d = r * ds;
            let keep = rng.random::<f64>() >= dropout;
            let Some((t, s)) = recipe.hit(&o, &d) else { continue };
            if t > spec.max_range || !keep {
                continue;
            }
            let p = (ds * t).map(|c| c as f32 as f64);
            out.push(([p.x, p.y, p.z], s.reflectivity() as f32 as f64));
        }
    }
    out
}

/// Camera pose on the orbit at `angle`.
fn camera_pose(orbit: &Orbit, angle: f64) -> Pose {
    Pose::look_at(orbit.position(angle), orbit.target, [0.0, 0.0, 1.0])
}

/// LiDAR pose on the orbit: x toward the target (kept horizontal), z up.
fn lidar_pose(orbit: &Orbit, angle: f64) -> Pose {
    let pos = orbit.position(angle);
    let mut fwd = Vector3::from(orbit.target) - Vector3::from(pos);
    fwd.z = 0.0;
    if fwd.norm() < 1e-9 {
        fwd = Vector3::new(angle.cos(), angle.sin(), 0.0);
    }
    let fwd = fwd.normalize();
    let up = Vector3::z();
    let left = up.cross(&fwd);
    Pose::from_rotation(pos, &Matrix3::from_columns(&[fwd, left, up]))
}

/// Expresses `pose` relative to `anchor`.
fn relative_to(anchor: &Pose, pose: &Pose) -> Pose {
    let ra = anchor.rotation().transpose();
    let p = ra * (pose.center() - anchor.center());
    Pose::from_rotation([p.x, p.y, p.z], &(ra * pose.rotation()))
}

/// Writes images, scans, `manifest.json` and `split.txt` under `out`.
/// Returns the manifest as written.
pub fn generate_synthetic_dataset(recipe: &Recipe, seed: u64, out: &Path) -> Result<DatasetManifest> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.random_range(0.0..2.0 * PI);
    for sub in ["rgb", "sky", "semantic", "lidar", "range"] {
        fs::create_dir_all(out.join(sub))?;
    }

    let cams = &recipe.cameras;
    let cam_poses: Vec<Pose> = (0..cams.count)
        .map(|k| camera_pose(&cams.orbit, phase + 2.0 * PI * k as f64 / cams.count as f64))
        .collect();
    let lidar_poses: Vec<Pose> = recipe.lidar.as_ref().map_or(Vec::new(), |l| {
        (0..l.count)
            .map(|k| lidar_pose(&l.orbit, phase + 2.0 * PI * k as f64 / l.count as f64))
            .collect()
    });
    let anchor = lidar_poses.first().copied().unwrap_or_default();

    let mut lidar_entries = Vec::new();
    if let Some(l) = &recipe.lidar {
        for (k, pose) in lidar_poses.iter().enumerate() {
            let name = format!("scan{k:03}");
            let points = scan_points(recipe, pose, &l.spec, l.dropout, &mut rng);
            let rel: PathBuf = format!("lidar/{name}.ply").into();
            write_ply(&out.join(&rel), &points)?;
            write_float_raster(&out.join(format!("range/{name}.embr")), &range_raster(&build_range_images(&points, &l.spec)))?;
            lidar_entries.push(LidarEntry {
                name,
                points: rel,
                pose: relative_to(&anchor, pose),
                spec: l.spec,
            });
        }
    }

    let mut camera_entries = Vec::new();
    for (k, pose) in cam_poses.iter().enumerate() {
        let name = format!("cam{k:03}");
        let view = CameraView::with_fov(*pose, cams.fov_x, cams.width, cams.height)?;
        let frame = render_frame(recipe, &view);
        let image: PathBuf = format!("rgb/{name}.png").into();
        let sky_mask: PathBuf = format!("sky/{name}.png").into();
        let semantic: PathBuf = format!("semantic/{name}.embr").into();
        write_rgb_png(&out.join(&image), &frame.rgb)?;
        write_mask_png(&out.join(&sky_mask), &frame.sky)?;
        write_float_raster(&out.join(&semantic), &frame.semantic)?;
        let lidar = (!lidar_entries.is_empty()).then(|| lidar_entries[k * lidar_entries.len() / cams.count].name.clone());
        camera_entries.push(CameraEntry {
            name,
            image,
            sky_mask,
            semantic: Some(semantic),
            lidar,
            pose: relative_to(&anchor, pose),
            intrinsics: Intrinsics {
                fx: view.fx,
                fy: view.fy,
                cx: view.cx,
                cy: view.cy,
                width: view.width,
                height: view.height,
            },
        });
    }

    let held = |k: usize| k % recipe.holdout_every == recipe.holdout_every - 1;
    let mut split = String::from("# held-out frames and scans\n");
    let names = camera_entries.iter().map(|c| &c.name).enumerate().filter(|(k, _)| held(*k));
    let scans = lidar_entries.iter().map(|l| &l.name).enumerate().filter(|(k, _)| held(*k));
    for (_, name) in names.chain(scans) {
        split.push_str(name);
        split.push('\n');
    }
    fs::write(out.join("split.txt"), split)?;

    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        units: Units::M,
        point_units: None,
        cameras: camera_entries,
        lidar: lidar_entries,
        init_points: None,
        warnings: Vec::new(),
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// Range, intensity and return mask as a 3-channel raster.
pub fn range_raster(set: &RangeImageSet) -> Image {
    let n = set.range.pixel_count();
    let mut im = Image::zeros(set.range.width, set.range.height, 3);
    for p in 0..n {
        im.data[p * 3] = set.range.data[p];
        im.data[p * 3 + 1] = set.intensity.data[p];
        im.data[p * 3 + 2] = if set.ray_mask.data[p] { 1.0 } else { 0.0 };
    }
    im
}
