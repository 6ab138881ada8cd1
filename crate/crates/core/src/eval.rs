//! Held-out evaluation of a trained model against dataset frames and scans.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::camera::CameraMode;
use crate::decoders::DecoderBank;
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::metrics::{abs_errors, channel_metrics, masked_ssim, psnr, ChannelMetrics};
use crate::pipeline::{render_camera, render_lidar};
use crate::raster::BlendSettings;
use crate::scene::GaussianScene;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViewMetrics {
    pub name: String,
    /// Over non-sky pixels, peak 1.
    pub psnr: f64,
    pub ssim: f64,
    /// Mean accumulated alpha over sky pixels; NaN when the view has none.
    pub sky_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanMetrics {
    pub name: String,
    pub valid_rays: usize,
    pub depth: ChannelMetrics,
    pub intensity: ChannelMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub scans: Vec<ScanMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_sky_alpha: f64,
    /// Depth errors pooled over the valid rays of every scan.
    pub depth_mae: f64,
    pub depth_rmse: f64,
    pub depth_medae: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.filter(|v| !v.is_nan()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn evaluate_view(
    scene: &GaussianScene,
    bank: &DecoderBank,
    dataset: &Dataset,
    index: usize,
    settings: &BlendSettings,
) -> Result<ViewMetrics> {
    let f = &dataset.frames[index];
    let frame = render_camera(scene, bank, &f.view, CameraMode::Rgb, settings)?;
    let ground = f.sky.inverted();
    let sky_n = f.sky.count();
    let sky_alpha = if sky_n == 0 {
        f64::NAN
    } else {
        f.sky.data.iter().zip(&frame.accum_alpha.data).filter(|(s, _)| **s).map(|(_, a)| a).sum::<f64>() / sky_n as f64
    };
    Ok(ViewMetrics {
        name: f.name.clone(),
        psnr: psnr(&frame.rgb, &f.rgb, &ground, 1.0)?,
        ssim: masked_ssim(&frame.rgb, &f.rgb, &ground, 1.0)?,
        sky_alpha,
    })
}

fn evaluate_scan(
    scene: &GaussianScene,
    bank: &DecoderBank,
    dataset: &Dataset,
    index: usize,
    settings: &BlendSettings,
) -> Result<(ScanMetrics, Vec<f64>)> {
    let s = &dataset.scans[index];
    let frame = render_lidar(scene, bank, &s.pose, &s.spec, settings)?;
    let valid = &s.target.ray_mask;
    let errors = abs_errors(&frame.depth, &s.target.range, valid)?;
    Ok((
        ScanMetrics {
            name: s.name.clone(),
            valid_rays: valid.count(),
            depth: channel_metrics(&frame.depth, &s.target.range, valid, s.spec.max_range)?,
            intensity: channel_metrics(&frame.intensity, &s.target.intensity, valid, 1.0)?,
        },
        errors,
    ))
}

/// Scores every frame and scan named in `names`. Unknown names are an error.
pub fn evaluate_split(scene: &GaussianScene, bank: &DecoderBank, dataset: &Dataset, names: &[String]) -> Result<EvalReport> {
    let mut frames = Vec::new();
    let mut scans = Vec::new();
    let mut seen = HashSet::new();
    for name in names {
        if !seen.insert(name.as_str()) {
            continue;
        }
        if let Some(i) = dataset.frame_index(name) {
            frames.push(i);
        } else if let Some(j) = dataset.scan_index(name) {
            scans.push(j);
        } else {
            return Err(Error::Config(format!("no frame or scan named `{name}`")));
        }
    }
    let settings = BlendSettings::default();
    let views = frames
        .par_iter()
        .map(|&i| evaluate_view(scene, bank, dataset, i, &settings))
        .collect::<Result<Vec<_>>>()?;
    let scored = scans
        .par_iter()
        .map(|&j| evaluate_scan(scene, bank, dataset, j, &settings))
        .collect::<Result<Vec<_>>>()?;
    let mut pooled: Vec<f64> = scored.iter().flat_map(|(_, e)| e.iter().copied()).collect();
    pooled.sort_by(f64::total_cmp);
    let (depth_mae, depth_rmse, depth_medae) = if pooled.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let n = pooled.len() as f64;
        let m = pooled.len() / 2;
        let med = if pooled.len() % 2 == 1 { pooled[m] } else { 0.5 * (pooled[m - 1] + pooled[m]) };
        (pooled.iter().sum::<f64>() / n, (pooled.iter().map(|e| e * e).sum::<f64>() / n).sqrt(), med)
    };
    Ok(EvalReport {
        mean_psnr: mean(views.iter().map(|v| v.psnr)),
        mean_ssim: mean(views.iter().map(|v| v.ssim)),
        mean_sky_alpha: mean(views.iter().map(|v| v.sky_alpha)),
        views,
        scans: scored.into_iter().map(|(m, _)| m).collect(),
        depth_mae,
        depth_rmse,
        depth_medae,
    })
}
