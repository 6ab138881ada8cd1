//! Training objectives. Every term returns its value together with the
//! gradient with respect to the prediction it scores.
//!
//! Masked means normalize by the number of valid pixels (and channels).
//! Before SSIM is evaluated, masked-out prediction pixels are replaced by the
//! target, so the windowed statistics never see them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, Mask};
use crate::ssim::{ssim_backward, ssim_map};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_rgb: f64,
    pub lambda_semantic: f64,
    pub lambda_lidar: f64,
    pub lambda_sky: f64,
    pub lambda_dssim: f64,
    pub lambda_dssim_int: f64,
    pub lambda_intensity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rgb: 1.0,
            lambda_semantic: 0.1,
            lambda_lidar: 1.0,
            lambda_sky: 0.1,
            lambda_dssim: 0.2,
            lambda_dssim_int: 0.2,
            lambda_intensity: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_rgb,
            self.lambda_semantic,
            self.lambda_lidar,
            self.lambda_sky,
            self.lambda_dssim,
            self.lambda_dssim_int,
            self.lambda_intensity,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.lambda_dssim > 1.0 || self.lambda_dssim_int > 1.0 {
            return Err(Error::Config("DSSIM mixing weights must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One loss term: its value, the number of pixels it averaged over, and its
/// gradient with respect to the scored prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub pixels: usize,
    pub grad: Image,
}

impl LossTerm {
    fn zero(like: &Image) -> Self {
        Self {
            value: 0.0,
            pixels: 0,
            grad: Image::zeros(like.width, like.height, like.channels),
        }
    }

    /// No pixel contributed.
    pub fn is_empty(&self) -> bool {
        self.pixels == 0
    }
}

/// Prediction with masked-out pixels replaced by the target.
pub(crate) fn compose(pred: &Image, gt: &Image, valid: &Mask) -> Image {
    let mut out = pred.clone();
    for (p, &ok) in valid.data.iter().enumerate() {
        if !ok {
            let c = pred.channels;
            out.data[p * c..(p + 1) * c].copy_from_slice(gt.pixel(p));
        }
    }
    out
}

/// Masked L1 and DSSIM mixed by `lambda_dssim`.
fn l1_dssim(pred: &Image, gt: &Image, valid: &Mask, lambda_dssim: f64) -> Result<LossTerm> {
    pred.same_shape(gt)?;
    valid.check(pred)?;
    let count = valid.count();
    if count == 0 {
        return Ok(LossTerm::zero(pred));
    }
    let c = pred.channels;
    let norm = (count * c) as f64;
    let mut term = LossTerm::zero(pred);
    term.pixels = count;
    let mut l1 = 0.0;
    for (p, &ok) in valid.data.iter().enumerate() {
        if !ok {
            continue;
        }
        for k in 0..c {
            let i = p * c + k;
            let d = pred.data[i] - gt.data[i];
            l1 += d.abs();
            term.grad.data[i] = (1.0 - lambda_dssim) * sign(d) / norm;
        }
    }
    term.value = (1.0 - lambda_dssim) * l1 / norm;
    if lambda_dssim > 0.0 {
        let composed = compose(pred, gt, valid);
        let map = ssim_map(&composed, gt)?;
        let mut d_map = Image::zeros(pred.width, pred.height, c);
        let mut dssim = 0.0;
        for (p, &ok) in valid.data.iter().enumerate() {
            if !ok {
                continue;
            }
            for k in 0..c {
                dssim += 1.0 - map.data[p * c + k];
                d_map.data[p * c + k] = -lambda_dssim / norm;
            }
        }
        term.value += lambda_dssim * dssim / norm;
        let g = ssim_backward(&composed, gt, &d_map)?;
        for (p, &ok) in valid.data.iter().enumerate() {
            if ok {
                for k in 0..c {
                    term.grad.data[p * c + k] += g.data[p * c + k];
                }
            }
        }
    }
    Ok(term)
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(1−λ_DSSIM)·L1 + λ_DSSIM·(1−SSIM)` over non-sky pixels (`sky` true = sky).
pub fn rgb_loss(pred: &Image, gt: &Image, sky: &Mask, weights: &LossWeights) -> Result<LossTerm> {
    l1_dssim(pred, gt, &sky.inverted(), weights.lambda_dssim)
}

/// `λ_semantic ·` masked L1 over non-sky pixels.
pub fn semantic_loss(pred: &Image, gt: &Image, sky: &Mask, weights: &LossWeights) -> Result<LossTerm> {
    let mut t = l1_dssim(pred, gt, &sky.inverted(), 0.0)?;
    t.value *= weights.lambda_semantic;
    t.grad.data.iter_mut().for_each(|g| *g *= weights.lambda_semantic);
    Ok(t)
}

/// Depth, intensity, and raydrop terms of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarLosses {
    pub depth: LossTerm,
    pub intensity: LossTerm,
    pub raydrop: LossTerm,
}

/// Predicted LiDAR channels (each one channel).
#[derive(Clone, Copy, Debug)]
pub struct LidarPrediction<'a> {
    pub depth: &'a Image,
    pub intensity: &'a Image,
    pub raydrop: &'a Image,
}

/// Ground truth of one scan. `raydrop` is the drop target, `1 − ray_mask`.
#[derive(Clone, Copy, Debug)]
pub struct LidarTarget<'a> {
    pub range: &'a Image,
    pub intensity: &'a Image,
    pub raydrop: &'a Image,
    pub ray_mask: &'a Mask,
}

pub fn lidar_losses(pred: &LidarPrediction, gt: &LidarTarget, weights: &LossWeights) -> Result<LidarLosses> {
    let depth = l1_dssim(pred.depth, gt.range, gt.ray_mask, 0.0)?;
    let mut intensity = l1_dssim(pred.intensity, gt.intensity, gt.ray_mask, weights.lambda_dssim_int)?;
    intensity.value *= weights.lambda_intensity;
    intensity.grad.data.iter_mut().for_each(|g| *g *= weights.lambda_intensity);

    pred.raydrop.same_shape(gt.raydrop)?;
    let n = pred.raydrop.data.len();
    let mut raydrop = LossTerm::zero(pred.raydrop);
    raydrop.pixels = n;
    if n > 0 {
        for i in 0..n {
            let d = pred.raydrop.data[i] - gt.raydrop.data[i];
            raydrop.value += d * d;
            raydrop.grad.data[i] = 2.0 * d / n as f64;
        }
        raydrop.value /= n as f64;
    }
    Ok(LidarLosses {
        depth,
        intensity,
        raydrop,
    })
}

/// `λ_sky ·` mean over sky pixels of `accum_alpha²`.
pub fn sky_loss(accum_alpha: &Image, sky: &Mask, weights: &LossWeights) -> Result<LossTerm> {
    sky.check(accum_alpha)?;
    let count = sky.count();
    let mut t = LossTerm::zero(accum_alpha);
    if count == 0 {
        return Ok(t);
    }
    t.pixels = count;
    let norm = count as f64;
    for (p, &is_sky) in sky.data.iter().enumerate() {
        if is_sky {
            let a = accum_alpha.data[p];
            t.value += a * a;
            t.grad.data[p] = weights.lambda_sky * 2.0 * a / norm;
        }
    }
    t.value *= weights.lambda_sky / norm;
    Ok(t)
}

/// Scalar values of every term; absent terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rgb: f64,
    pub semantic: f64,
    pub depth: f64,
    pub intensity: f64,
    pub raydrop: f64,
    pub sky: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub rgb: usize,
    pub semantic: usize,
    pub depth: usize,
    pub intensity: usize,
    pub raydrop: usize,
    pub sky: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rgb: f64,
    pub semantic: f64,
    pub depth: f64,
    pub intensity: f64,
    pub raydrop: f64,
    pub sky: f64,
    pub lidar: f64,
    pub total: f64,
    pub pixels: PixelCounts,
    pub weights: LossWeights,
}

impl LossReport {
    /// Field order of [`LossReport::log_fields`].
    pub const LOG_FIELDS: [&'static str; 8] = ["total", "rgb", "semantic", "depth", "intensity", "raydrop", "sky", "lidar"];

    pub fn log_fields(&self) -> [f64; 8] {
        [
            self.total,
            self.rgb,
            self.semantic,
            self.depth,
            self.intensity,
            self.raydrop,
            self.sky,
            self.lidar,
        ]
    }
}

/// `λ_RGB·rgb + λ_semantic·semantic + λ_lidar·(depth + intensity + raydrop) + λ_sky·sky`.
pub fn total_loss(terms: &LossTerms, pixels: PixelCounts, weights: &LossWeights) -> Result<LossReport> {
    for (name, v) in [
        ("rgb", terms.rgb),
        ("semantic", terms.semantic),
        ("depth", terms.depth),
        ("intensity", terms.intensity),
        ("raydrop", terms.raydrop),
        ("sky", terms.sky),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    let lidar = terms.depth + terms.intensity + terms.raydrop;
    let total = weights.lambda_rgb * terms.rgb
        + weights.lambda_semantic * terms.semantic
        + weights.lambda_lidar * lidar
        + weights.lambda_sky * terms.sky;
    Ok(LossReport {
        rgb: terms.rgb,
        semantic: terms.semantic,
        depth: terms.depth,
        intensity: terms.intensity,
        raydrop: terms.raydrop,
        sky: terms.sky,
        lidar,
        total,
        pixels,
        weights: *weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn img(w: usize, h: usize, c: usize, data: &[f64]) -> Image {
        Image::from_vec(w, h, c, data.to_vec()).unwrap()
    }

    fn random(w: usize, h: usize, c: usize, rng: &mut impl Rng) -> Image {
        Image::from_vec(w, h, c, (0..w * h * c).map(|_| rng.random()).collect()).unwrap()
    }

    fn random_mask(w: usize, h: usize, rng: &mut impl Rng) -> Mask {
        Mask {
            width: w,
            height: h,
            data: (0..w * h).map(|_| rng.random_bool(0.3)).collect(),
        }
    }

    #[test]
    fn rgb_hand_case() {
        let w = LossWeights {
            lambda_dssim: 0.0,
            ..Default::default()
        };
        let pred = img(2, 2, 1, &[0.1, 0.5, 0.9, 0.0]);
        let gt = img(2, 2, 1, &[0.2, 0.2, 0.2, 1.0]);
        let sky = Mask {
            width: 2,
            height: 2,
            data: vec![false, false, false, true],
        };
        let t = rgb_loss(&pred, &gt, &sky, &w).unwrap();
        assert!((t.value - (0.1 + 0.3 + 0.7) / 3.0).abs() < 1e-15);
        assert_eq!(t.pixels, 3);
        let all_sky = Mask::filled(2, 2, true);
        let t = rgb_loss(&pred, &gt, &all_sky, &w).unwrap();
        assert!(t.value == 0.0 && t.is_empty());
    }

    #[test]
    fn semantic_hand_case() {
        let w = LossWeights::default();
        let pred = img(1, 1, 3, &[0.1, 0.2, 0.3]);
        let gt = img(1, 1, 3, &[0.0, 0.0, 0.0]);
        let t = semantic_loss(&pred, &gt, &Mask::filled(1, 1, false), &w).unwrap();
        assert!((t.value - w.lambda_semantic * 0.2).abs() < 1e-15);
        let zero = LossWeights {
            lambda_semantic: 0.0,
            ..w
        };
        assert_eq!(semantic_loss(&pred, &gt, &Mask::filled(1, 1, false), &zero).unwrap().value, 0.0);
    }

    #[test]
    fn lidar_hand_cases() {
        let w = LossWeights::default();
        let mask = Mask {
            width: 2,
            height: 1,
            data: vec![true, false],
        };
        let depth = img(2, 1, 1, &[7.0, 3.0]);
        let range = img(2, 1, 1, &[5.0, 0.0]);
        let half = img(2, 1, 1, &[0.5, 0.5]);
        let ones = img(2, 1, 1, &[1.0, 1.0]);
        let l = lidar_losses(
            &LidarPrediction {
                depth: &depth,
                intensity: &half,
                raydrop: &half,
            },
            &LidarTarget {
                range: &range,
                intensity: &half,
                raydrop: &ones,
                ray_mask: &mask,
            },
            &w,
        )
        .unwrap();
        assert_eq!(l.depth.value, 2.0);
        assert_eq!(l.raydrop.value, 0.25);
        assert!(l.intensity.value.abs() < 1e-12);
    }

    #[test]
    fn sky_hand_case() {
        let w = LossWeights {
            lambda_sky: 1.0,
            ..Default::default()
        };
        let a = img(3, 1, 1, &[0.2, 0.4, 0.9]);
        let sky = Mask {
            width: 3,
            height: 1,
            data: vec![true, true, false],
        };
        assert!((sky_loss(&a, &sky, &w).unwrap().value - 0.10).abs() < 1e-15);
        assert_eq!(sky_loss(&a, &Mask::filled(3, 1, false), &w).unwrap().value, 0.0);
    }

    #[test]
    fn total_matches_dot_product() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = LossTerms {
                rgb: rng.random(),
                semantic: rng.random(),
                depth: rng.random(),
                intensity: rng.random(),
                raydrop: rng.random(),
                sky: rng.random(),
            };
            let w = LossWeights {
                lambda_rgb: rng.random(),
                lambda_semantic: rng.random(),
                lambda_lidar: rng.random(),
                lambda_sky: rng.random(),
                ..Default::default()
            };
            let r = total_loss(&t, PixelCounts::default(), &w).unwrap();
            let weights = [w.lambda_rgb, w.lambda_semantic, w.lambda_lidar, w.lambda_lidar, w.lambda_lidar, w.lambda_sky];
            let values = [t.rgb, t.semantic, t.depth, t.intensity, t.raydrop, t.sky];
            let oracle: f64 = weights.iter().zip(values).map(|(a, b)| a * b).sum();
            assert!((r.total - oracle).abs() < 1e-12);
            assert!((r.lidar - (t.depth + t.intensity + t.raydrop)).abs() < 1e-15);
        }
        let bad = LossTerms {
            depth: f64::NAN,
            ..Default::default()
        };
        let e = total_loss(&bad, PixelCounts::default(), &LossWeights::default()).unwrap_err();
        assert!(e.to_string().contains("depth"));
    }

    #[test]
    fn gradients_match_fd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let w = LossWeights {
            lambda_dssim: 0.3,
            lambda_dssim_int: 0.4,
            lambda_intensity: 0.7,
            ..Default::default()
        };
        let pred = random(6, 5, 3, &mut rng);
        let gt = random(6, 5, 3, &mut rng);
        let mask = random_mask(6, 5, &mut rng);
        let h = 1e-7;
        let fd_check = |f: &dyn Fn(&Image) -> f64, grad: &Image, x: &Image| {
            for i in 0..x.data.len() {
                let mut p = x.clone();
                let mut m = x.clone();
                p.data[i] += h;
                m.data[i] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - grad.data[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{i}: {fd} vs {}", grad.data[i]);
            }
        };
        let t = rgb_loss(&pred, &gt, &mask, &w).unwrap();
        fd_check(&|p| rgb_loss(p, &gt, &mask, &w).unwrap().value, &t.grad, &pred);
        let t = semantic_loss(&pred, &gt, &mask, &w).unwrap();
        fd_check(&|p| semantic_loss(p, &gt, &mask, &w).unwrap().value, &t.grad, &pred);
        let a = random(6, 5, 1, &mut rng);
        let t = sky_loss(&a, &mask, &w).unwrap();
        fd_check(&|p| sky_loss(p, &mask, &w).unwrap().value, &t.grad, &a);

        let d = random(6, 5, 1, &mut rng);
        let i = random(6, 5, 1, &mut rng);
        let r = random(6, 5, 1, &mut rng);
        let gr = random(6, 5, 1, &mut rng);
        let gi = random(6, 5, 1, &mut rng);
        let gd = random(6, 5, 1, &mut rng);
        let target = LidarTarget {
            range: &gr,
            intensity: &gi,
            raydrop: &gd,
            ray_mask: &mask,
        };
        let base = lidar_losses(&LidarPrediction { depth: &d, intensity: &i, raydrop: &r }, &target, &w).unwrap();
        fd_check(
            &|p| lidar_losses(&LidarPrediction { depth: p, intensity: &i, raydrop: &r }, &target, &w).unwrap().depth.value,
            &base.depth.grad,
            &d,
        );
        fd_check(
            &|p| lidar_losses(&LidarPrediction { depth: &d, intensity: p, raydrop: &r }, &target, &w).unwrap().intensity.value,
            &base.intensity.grad,
            &i,
        );
        fd_check(
            &|p| lidar_losses(&LidarPrediction { depth: &d, intensity: &i, raydrop: p }, &target, &w).unwrap().raydrop.value,
            &base.raydrop.grad,
            &r,
        );
    }

    proptest! {
        #[test]
        fn zero_at_ground_truth_and_masked_fuzz_invariant(seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let w = LossWeights::default();
            let gt = random(9, 7, 3, &mut rng);
            let sky = random_mask(9, 7, &mut rng);
            prop_assert_eq!(rgb_loss(&gt, &gt, &sky, &w).unwrap().value, 0.0);
            prop_assert_eq!(semantic_loss(&gt, &gt, &sky, &w).unwrap().value, 0.0);
            let pred = random(9, 7, 3, &mut rng);
            let mut fuzzed = pred.clone();
            for (p, &s) in sky.data.iter().enumerate() {
                if s {
                    for c in 0..3 {
                        fuzzed.data[p * 3 + c] = rng.random_range(-5.0..5.0);
                    }
                }
            }
            prop_assert_eq!(rgb_loss(&pred, &gt, &sky, &w).unwrap().value, rgb_loss(&fuzzed, &gt, &sky, &w).unwrap().value);
            prop_assert_eq!(semantic_loss(&pred, &gt, &sky, &w).unwrap().value, semantic_loss(&fuzzed, &gt, &sky, &w).unwrap().value);
            let ray = sky.inverted();
            let gt1 = gt.channel(0);
            let drop = Image::from_vec(9, 7, 1, ray.data.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect()).unwrap();
            let target = LidarTarget { range: &gt1, intensity: &gt1, raydrop: &drop, ray_mask: &ray };
            let exact = lidar_losses(&LidarPrediction { depth: &gt1, intensity: &gt1, raydrop: &drop }, &target, &w).unwrap();
            prop_assert_eq!((exact.depth.value, exact.intensity.value, exact.raydrop.value), (0.0, 0.0, 0.0));
            let p1 = pred.channel(1);
            let mut f1 = p1.clone();
            for (p, &m) in ray.data.iter().enumerate() {
                if !m {
                    f1.data[p] = rng.random_range(-50.0..50.0);
                }
            }
            let a = lidar_losses(&LidarPrediction { depth: &p1, intensity: &p1, raydrop: &drop }, &target, &w).unwrap();
            let b = lidar_losses(&LidarPrediction { depth: &f1, intensity: &f1, raydrop: &drop }, &target, &w).unwrap();
            prop_assert_eq!((a.depth.value, a.intensity.value), (b.depth.value, b.intensity.value));
            let alpha = pred.channel(2);
            let mut fa = alpha.clone();
            for (p, &s) in sky.data.iter().enumerate() {
                if !s {
                    fa.data[p] = rng.random();
                }
            }
            prop_assert_eq!(sky_loss(&alpha, &sky, &w).unwrap().value, sky_loss(&fa, &sky, &w).unwrap().value);
            prop_assert_eq!(sky_loss(&Image::zeros(9, 7, 1), &sky, &w).unwrap().value, 0.0);
        }
    }
}
