use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use embsplat::camera::{CameraMode, CameraView};
use embsplat::check::run_checks;
use embsplat::checkpoint::{compare_explicit, load_checkpoint, per_point_storage, random_checkpoint, save_checkpoint, Checkpoint};
use embsplat::eval::evaluate_split;
use embsplat::grid::Image;
use embsplat::io::manifest::Intrinsics;
use embsplat::io::ply::write_ply;
use embsplat::io::raster::{write_float_raster, write_rgb_png};
use embsplat::io::{generate_synthetic_dataset, read_split, Dataset, Recipe};
use embsplat::lidar::{LidarFrame, LidarSpec};
use embsplat::math::Pose;
use embsplat::pipeline::{render_camera, render_lidar};
use embsplat::raster::BlendSettings;
use embsplat::trainer::{train_with, TrainConfig};

use crate::{CheckLevel, RenderMode};

/// Returned when a check suite ran but some check failed.
#[derive(Debug)]
pub struct ChecksFailed;

impl fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("one or more checks failed")
    }
}

impl std::error::Error for ChecksFailed {}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

fn load_dataset(data: &Path) -> Result<Dataset> {
    let path = manifest_path(data);
    Dataset::load(&path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load(ckpt: &Path) -> Result<Checkpoint> {
    load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))
}

fn write_json(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn gen_synthetic(recipe: &str, out: &Path, seed: u64) -> Result<()> {
    let recipe = if recipe == "toy" {
        Recipe::toy()
    } else {
        let text = fs::read_to_string(recipe).with_context(|| format!("reading recipe {recipe}"))?;
        serde_json::from_str(&text).with_context(|| format!("parsing recipe {recipe}"))?
    };
    let manifest = generate_synthetic_dataset(&recipe, seed, out)?;
    println!(
        "wrote {} camera frames and {} LiDAR scans to {}",
        manifest.cameras.len(),
        manifest.lidar.len(),
        out.display()
    );
    Ok(())
}

pub fn train(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    split: Option<&Path>,
    log_path: Option<&Path>,
    iterations: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let default_split = manifest_path(data).with_file_name("split.txt");
    let holdout = match split {
        Some(p) => read_split(p)?,
        None if default_split.is_file() => read_split(&default_split)?,
        None => Vec::new(),
    };
    log::info!(
        "training {} iterations, seed {}, config {}, {} held out",
        cfg.iterations,
        cfg.seed,
        cfg.hash(),
        holdout.len()
    );
    let start = Instant::now();
    let outcome = train_with(&dataset, &cfg, &holdout, |r| {
        if (r.iteration + 1) % 100 == 0 {
            log::info!("iteration {} loss {:.5} gaussians {}", r.iteration + 1, r.terms[0], r.gaussians);
        }
    })?;
    save_checkpoint(&outcome.checkpoint(&cfg), out).with_context(|| format!("writing {}", out.display()))?;
    let log_path = log_path.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.tsv");
        PathBuf::from(s)
    });
    fs::write(&log_path, outcome.log.to_tsv(true)).with_context(|| format!("writing {}", log_path.display()))?;
    let last = outcome.log.records.last().map_or(f64::NAN, |r| r.terms[0]);
    println!(
        "trained {} iterations in {:.1}s: {} Gaussians, final loss {last:.5}; checkpoint {}, log {}",
        cfg.iterations,
        start.elapsed().as_secs_f64(),
        outcome.state.scene.len(),
        out.display(),
        log_path.display()
    );
    Ok(())
}

/// A sensor described in JSON: a pose with either camera intrinsics or a LiDAR spec.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sensor {
    pose: Pose,
    intrinsics: Option<Intrinsics>,
    lidar: Option<LidarSpec>,
}

enum Target {
    Camera(CameraView),
    Lidar(Pose, LidarSpec),
}

fn resolve_pose(spec: &str, data: Option<&Path>, mode: RenderMode) -> Result<Target> {
    let want_lidar = mode == RenderMode::Lidar;
    if Path::new(spec).is_file() {
        let text = fs::read_to_string(spec)?;
        let s: Sensor = serde_json::from_str(&text).with_context(|| format!("parsing sensor file {spec}"))?;
        return match (want_lidar, s.intrinsics, s.lidar) {
            (false, Some(k), _) => Ok(Target::Camera(CameraView::new(s.pose, k.fx, k.fy, k.cx, k.cy, k.width, k.height)?)),
            (true, _, Some(l)) => Ok(Target::Lidar(s.pose, l)),
            (false, None, _) => bail!("sensor file {spec} has no `intrinsics` for a camera render"),
            (true, _, None) => bail!("sensor file {spec} has no `lidar` spec for a LiDAR render"),
        };
    }
    let Some(data) = data else {
        bail!("`{spec}` is not a file; pass --data to look it up as a frame or scan name");
    };
    let ds = load_dataset(data)?;
    if want_lidar {
        if let Some(j) = ds.scan_index(spec) {
            let s = &ds.scans[j];
            return Ok(Target::Lidar(s.pose, s.spec));
        }
        if let Some(i) = ds.frame_index(spec) {
            if let Some(j) = ds.frames[i].lidar {
                let s = &ds.scans[j];
                return Ok(Target::Lidar(s.pose, s.spec));
            }
        }
        bail!("no LiDAR scan named `{spec}` in the dataset");
    }
    match ds.frame_index(spec) {
        Some(i) => Ok(Target::Camera(ds.frames[i].view)),
        None => bail!("no camera frame named `{spec}` in the dataset"),
    }
}

/// Depth, intensity and raydrop as one three-channel raster.
fn lidar_raster(frame: &LidarFrame) -> Image {
    let n = frame.depth.data.len();
    let mut data = Vec::with_capacity(3 * n);
    for p in 0..n {
        data.extend([frame.depth.data[p], frame.intensity.data[p], frame.raydrop.data[p]]);
    }
    Image::from_vec(frame.depth.width, frame.depth.height, 3, data).expect("consistent shape")
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn render(ckpt: &Path, pose: &str, mode: RenderMode, out: &Path, data: Option<&Path>) -> Result<()> {
    let c = load(ckpt)?;
    let settings = BlendSettings::default();
    let target = resolve_pose(pose, data, mode)?;
    let (image, what) = match target {
        Target::Camera(view) => {
            let cam_mode = if mode == RenderMode::Semantic { CameraMode::Semantic } else { CameraMode::Rgb };
            let frame = render_camera(&c.scene, &c.bank, &view, cam_mode, &settings)?;
            if mode == RenderMode::Semantic {
                (frame.semantic, "semantic")
            } else {
                (frame.rgb, "rgb")
            }
        }
        Target::Lidar(p, spec) => (lidar_raster(&render_lidar(&c.scene, &c.bank, &p, &spec, &settings)?), "depth/intensity/raydrop"),
    };
    if is_png(out) {
        if mode != RenderMode::Rgb {
            bail!("PNG output is only available for rgb renders; use a .embr path");
        }
        write_rgb_png(out, &image)?;
    } else {
        write_float_raster(out, &image)?;
    }
    println!("rendered {}x{} {what} to {}", image.width, image.height, out.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Trajectory {
    lidar: LidarSpec,
    poses: Vec<Pose>,
}

#[derive(Serialize)]
struct SimulatedScan {
    index: usize,
    raster: String,
    points: String,
    returns: usize,
}

pub fn simulate_lidar(ckpt: &Path, trajectory: &Path, out: &Path, drop_threshold: f64) -> Result<()> {
    let c = load(ckpt)?;
    let text = fs::read_to_string(trajectory).with_context(|| format!("reading {}", trajectory.display()))?;
    let t: Trajectory = serde_json::from_str(&text).with_context(|| format!("parsing trajectory {}", trajectory.display()))?;
    t.lidar.validate()?;
    fs::create_dir_all(out)?;
    let settings = BlendSettings::default();
    let mut index = Vec::with_capacity(t.poses.len());
    for (i, pose) in t.poses.iter().enumerate() {
        let frame = render_lidar(&c.scene, &c.bank, pose, &t.lidar, &settings)?;
        let raster = format!("scan{i:04}.embr");
        let points = format!("scan{i:04}.ply");
        write_float_raster(&out.join(&raster), &lidar_raster(&frame))?;
        let cloud = frame.to_points(&t.lidar, drop_threshold);
        write_ply(&out.join(&points), &cloud)?;
        index.push(SimulatedScan {
            index: i,
            raster,
            points,
            returns: cloud.len(),
        });
    }
    write_json(&index, Some(&out.join("index.json")))?;
    let total: usize = index.iter().map(|s| s.returns).sum();
    println!("simulated {} scans ({total} returns) into {}", index.len(), out.display());
    Ok(())
}

pub fn eval(ckpt: &Path, data: &Path, split: &Path, out: Option<&Path>) -> Result<()> {
    let c = load(ckpt)?;
    let ds = load_dataset(data)?;
    let names = read_split(split)?;
    let report = evaluate_split(&c.scene, &c.bank, &ds, &names)?;
    if out.is_some() {
        write_json(&report, out)?;
    }
    for v in &report.views {
        println!("{:<16} psnr {:7.3} ssim {:.4} sky alpha {:.4}", v.name, v.psnr, v.ssim, v.sky_alpha);
    }
    for s in &report.scans {
        println!(
            "{:<16} depth rmse {:.4} medae {:.4} ssim {:.4} psnr {:.3}; intensity rmse {:.4} medae {:.4} ssim {:.4} psnr {:.3}",
            s.name, s.depth.rmse, s.depth.medae, s.depth.ssim, s.depth.psnr, s.intensity.rmse, s.intensity.medae, s.intensity.ssim, s.intensity.psnr
        );
    }
    println!(
        "mean psnr {:.3} ssim {:.4} sky alpha {:.4}; depth mae {:.4} rmse {:.4} medae {:.4}",
        report.mean_psnr, report.mean_ssim, report.mean_sky_alpha, report.depth_mae, report.depth_rmse, report.depth_medae
    );
    if out.is_none() {
        write_json(&report, None)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct StorageReport {
    checkpoint: String,
    file_bytes: u64,
    file_per_point: f64,
    explicit_h: usize,
    explicit_d: usize,
    #[serde(flatten)]
    comparison: embsplat::checkpoint::StorageComparison,
}

pub fn report_storage(ckpt: &Path, h: usize, d: usize, out: Option<&Path>) -> Result<()> {
    let c = load(ckpt)?;
    let n = c.scene.len();
    let file_per_point = per_point_storage(ckpt, n)?;
    let comparison = compare_explicit(&c.scene, &c.bank, h, d)?;
    let report = StorageReport {
        checkpoint: ckpt.display().to_string(),
        file_bytes: fs::metadata(ckpt)?.len(),
        file_per_point,
        explicit_h: h,
        explicit_d: d,
        comparison,
    };
    println!(
        "{n} Gaussians: checkpoint {:.1} B/point, model-only {:.1} B/point, explicit {:.1} B/point, reduction {:.1}% (payload {:.1}%)",
        file_per_point,
        comparison.ours_per_point,
        comparison.explicit_per_point,
        100.0 * comparison.reduction,
        100.0 * comparison.payload_reduction
    );
    if let Some(p) = out {
        write_json(&report, Some(p))?;
    }
    Ok(())
}

pub fn init_checkpoint(gaussians: usize, out: &Path, seed: u64) -> Result<()> {
    if gaussians == 0 {
        bail!("--gaussians must be positive");
    }
    save_checkpoint(&random_checkpoint(gaussians, seed)?, out)?;
    println!("wrote {gaussians}-Gaussian checkpoint to {}", out.display());
    Ok(())
}

pub fn check(level: CheckLevel, seed: u64) -> Result<()> {
    let outcomes = run_checks(level == CheckLevel::Full, seed)?;
    let mut ok = true;
    for o in &outcomes {
        ok &= o.passed;
        println!(
            "{} {}: {:.3e} (tolerance {:.0e}) in {:.1}s; {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.metric,
            o.tolerance,
            o.seconds,
            o.detail
        );
    }
    if ok {
        Ok(())
    } else {
        Err(ChecksFailed.into())
    }
}
