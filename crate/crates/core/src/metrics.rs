//! Closed-form image metrics used by evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, Mask};
use crate::losses::compose;
use crate::ssim::ssim_map;

fn check(pred: &Image, gt: &Image, valid: &Mask) -> Result<()> {
    pred.same_shape(gt)?;
    valid.check(pred)
}

/// Mean squared error over the valid pixels (all channels).
pub fn masked_mse(pred: &Image, gt: &Image, valid: &Mask) -> Result<f64> {
    check(pred, gt, valid)?;
    let c = pred.channels;
    let mut sum = 0.0;
    for (p, _) in valid.data.iter().enumerate().filter(|(_, &ok)| ok) {
        for k in 0..c {
            let d = pred.data[p * c + k] - gt.data[p * c + k];
            sum += d * d;
        }
    }
    let n = valid.count() * c;
    if n == 0 {
        return Ok(f64::NAN);
    }
    Ok(sum / n as f64)
}

/// `10·log10(peak² / MSE)`; infinite for a perfect match, NaN with no valid pixels.
pub fn psnr(pred: &Image, gt: &Image, valid: &Mask, peak: f64) -> Result<f64> {
    let mse = masked_mse(pred, gt, valid)?;
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn rmse(pred: &Image, gt: &Image, valid: &Mask) -> Result<f64> {
    Ok(masked_mse(pred, gt, valid)?.sqrt())
}

pub fn mean_abs_error(pred: &Image, gt: &Image, valid: &Mask) -> Result<f64> {
    let e = abs_errors(pred, gt, valid)?;
    if e.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Median absolute error; for an even count, the mean of the two middle values.
pub fn median_abs_error(pred: &Image, gt: &Image, valid: &Mask) -> Result<f64> {
    let mut e = abs_errors(pred, gt, valid)?;
    if e.is_empty() {
        return Ok(f64::NAN);
    }
    e.sort_by(f64::total_cmp);
    let m = e.len() / 2;
    Ok(if e.len() % 2 == 1 { e[m] } else { 0.5 * (e[m - 1] + e[m]) })
}

pub(crate) fn abs_errors(pred: &Image, gt: &Image, valid: &Mask) -> Result<Vec<f64>> {
    check(pred, gt, valid)?;
    let c = pred.channels;
    let mut out = Vec::with_capacity(valid.count() * c);
    for (p, _) in valid.data.iter().enumerate().filter(|(_, &ok)| ok) {
        for k in 0..c {
            out.push((pred.data[p * c + k] - gt.data[p * c + k]).abs());
        }
    }
    Ok(out)
}

/// Mean SSIM over the valid pixels. Values are divided by `scale` first and
/// invalid prediction pixels take the target value, so they neither score nor
/// disturb the windows of their valid neighbours.
pub fn masked_ssim(pred: &Image, gt: &Image, valid: &Mask, scale: f64) -> Result<f64> {
    check(pred, gt, valid)?;
    if !(scale > 0.0) {
        return Err(Error::Config(format!("ssim scale must be positive, got {scale}")));
    }
    let norm = |im: &Image| Image {
        data: im.data.iter().map(|v| v / scale).collect(),
        ..im.clone()
    };
    let (p, g) = (norm(pred), norm(gt));
    let map = ssim_map(&compose(&p, &g, valid), &g)?;
    let c = pred.channels;
    let n = valid.count() * c;
    if n == 0 {
        return Ok(f64::NAN);
    }
    let sum: f64 = valid
        .data
        .iter()
        .enumerate()
        .filter(|(_, &ok)| ok)
        .map(|(p, _)| map.pixel(p).iter().sum::<f64>())
        .sum();
    Ok(sum / n as f64)
}

/// RMSE, median absolute error, SSIM and PSNR of one LiDAR channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub rmse: f64,
    pub medae: f64,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
}

/// `peak` normalizes SSIM and is the PSNR peak (max range for depth, 1 for intensity).
pub fn channel_metrics(pred: &Image, gt: &Image, valid: &Mask, peak: f64) -> Result<ChannelMetrics> {
    Ok(ChannelMetrics {
        rmse: rmse(pred, gt, valid)?,
        medae: median_abs_error(pred, gt, valid)?,
        mae: mean_abs_error(pred, gt, valid)?,
        ssim: masked_ssim(pred, gt, valid, peak)?,
        psnr: psnr(pred, gt, valid, peak)?,
    })
}
