//! Self-check suites: optimized renderers against the brute-force oracles,
//! and analytic gradients of the full loss against finite differences.

use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::camera::{CameraMode, CameraView};
use crate::decoders::{DecoderBank, DecoderInit};
use crate::error::Result;
use crate::grid::{Image, Mask};
use crate::lidar::{LidarSpec, RangeImageSet};
use crate::losses::LossWeights;
use crate::math::Pose;
use crate::oracle::{brute_force_render_camera, brute_force_render_lidar, finite_diff_params, OracleSettings};
use crate::pipeline::{all_params, evaluate, render_camera, render_lidar, CameraSample, LidarSample, ParamRef, Sample};
use crate::raster::BlendSettings;
use crate::scene::GaussianScene;

/// Outcome of one suite.
#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub metric: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

/// LiDAR pose at `position` whose forward axis looks along world +z with
/// world −y as up (matching an identity camera).
pub fn lidar_facing_z(position: [f64; 3]) -> Pose {
    let m = Matrix3::from_columns(&[Vector3::new(0.0, 0.0, 1.0), Vector3::new(-1.0, 0.0, 0.0), Vector3::new(0.0, -1.0, 0.0)]);
    Pose::from_rotation(position, &m)
}

/// Random Gaussians in the box `[-1, 1]² × [2, 4]` with a random decoder bank.
pub fn random_scene(rng: &mut impl Rng, n: usize) -> (GaussianScene, DecoderBank) {
    let normal = Normal::new(0.0, 0.5).expect("valid std");
    let positions: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..4.0)])
        .collect();
    let embeddings = (0..n).map(|_| std::array::from_fn(|_| normal.sample(rng))).collect();
    let env = std::array::from_fn(|_| normal.sample(rng));
    let scene = GaussianScene::new(positions, embeddings, env).expect("finite positions");
    let init = DecoderInit {
        initial_scale: rng.random_range(0.03..0.2),
        initial_opacity: rng.random_range(0.2..0.8),
        ..DecoderInit::default()
    };
    let bank = DecoderBank::seeded(&init, rng.random());
    (scene, bank)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest per-channel difference between the optimized renderers and the
/// oracles over `scenes` random scenes of up to `max_n` Gaussians.
pub fn oracle_equivalence(
    scenes: usize,
    max_n: usize,
    size: usize,
    seed: u64,
    settings: &BlendSettings,
) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oracle = OracleSettings::default();
    const CHANNELS: [&str; 7] = ["rgb", "semantic", "alpha", "depth", "intensity", "raydrop", "beta"];
    let mut per_channel = [0.0f64; 7];
    let mut worst: f64 = 0.0;
    let mut worst_scene = 0;
    for s in 0..scenes {
        let n = rng.random_range(1..=max_n);
        let (scene, bank) = random_scene(&mut rng, n);
        let view = CameraView::with_fov(
            Pose::new([rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0], [1.0, 0.0, 0.0, 0.0]),
            1.2,
            size,
            size,
        )?;
        let fast = render_camera(&scene, &bank, &view, CameraMode::Both, settings)?;
        let slow = brute_force_render_camera(&scene, &bank, &view, &oracle)?;
        let cam = [
            max_abs_diff(&fast.rgb.data, &slow.rgb),
            max_abs_diff(&fast.semantic.data, &slow.semantic),
            max_abs_diff(&fast.accum_alpha.data, &slow.accum_alpha),
        ];

        let spec = LidarSpec {
            width: size,
            height: size / 2,
            theta_min: -0.6,
            theta_max: 0.6,
            max_range: 50.0,
        };
        let pose = lidar_facing_z([rng.random_range(-0.2..0.2), 0.0, rng.random_range(-0.5..0.0)]);
        let fast = render_lidar(&scene, &bank, &pose, &spec, settings)?;
        let slow = brute_force_render_lidar(&scene, &bank, &pose, &spec, &oracle)?;
        let lid = [
            max_abs_diff(&fast.depth.data, &slow.depth),
            max_abs_diff(&fast.intensity.data, &slow.intensity),
            max_abs_diff(&fast.raydrop.data, &slow.raydrop),
            max_abs_diff(&fast.accum_beta.data, &slow.accum_beta),
        ];
        for (acc, e) in per_channel.iter_mut().zip(cam.iter().chain(&lid)) {
            *acc = acc.max(*e);
            if *e > worst {
                worst = *e;
                worst_scene = s;
            }
        }
    }
    let channels: Vec<String> = CHANNELS
        .iter()
        .zip(per_channel)
        .map(|(c, e)| format!("{c} {e:.1e}"))
        .collect();
    let tol = 1e-5;
    Ok(CheckOutcome {
        name: "oracle equivalence".into(),
        passed: worst < tol,
        metric: worst,
        tolerance: tol,
        detail: format!(
            "{scenes} scenes, worst {worst:.3e} in scene {worst_scene}; {}",
            channels.join(", ")
        ),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Per-group summary of a gradient check.
#[derive(Clone, Debug, Serialize)]
pub struct GradientGroup {
    pub group: String,
    pub count: usize,
    /// Largest `|analytic − fd| / max(|analytic|, |fd|, floor)`.
    pub max_rel_error: f64,
    /// `‖analytic − fd‖ / ‖fd‖` over the group.
    pub norm_rel_error: f64,
    pub tolerance: f64,
    pub worst: String,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientReport {
    pub groups: Vec<GradientGroup>,
    pub seconds: f64,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }
}

/// Fixed inputs of the gradient check: a 10-Gaussian scene with random
/// supervision for an 8x8 camera and a 16x32 range image.
pub struct GradientProblem {
    pub scene: GaussianScene,
    pub bank: DecoderBank,
    pub view: CameraView,
    pub rgb: Image,
    pub semantic: Image,
    pub sky: Mask,
    pub pose: Pose,
    pub spec: LidarSpec,
    pub target: RangeImageSet,
    pub weights: LossWeights,
}

impl GradientProblem {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scene, bank) = random_scene(&mut rng, 10);
        let view = CameraView::with_fov(Pose::default(), 1.0, 8, 8).expect("valid view");
        let rand_img = |rng: &mut ChaCha8Rng, w, h, c| {
            Image::from_vec(w, h, c, (0..w * h * c).map(|_| rng.random()).collect()).expect("sized")
        };
        let rgb = rand_img(&mut rng, 8, 8, 3);
        let semantic = rand_img(&mut rng, 8, 8, 3);
        let sky = Mask {
            width: 8,
            height: 8,
            data: (0..64).map(|_| rng.random_bool(0.25)).collect(),
        };
        let spec = LidarSpec {
            width: 32,
            height: 16,
            theta_min: -0.6,
            theta_max: 0.6,
            max_range: 50.0,
        };
        let mut target = RangeImageSet::empty(&spec);
        for p in 0..spec.width * spec.height {
            if rng.random_bool(0.6) {
                target.ray_mask.data[p] = true;
                target.range.data[p] = rng.random_range(2.0..4.5);
                target.intensity.data[p] = rng.random();
            }
        }
        Self {
            scene,
            bank,
            view,
            rgb,
            semantic,
            sky,
            pose: lidar_facing_z([0.0, 0.0, 0.0]),
            spec,
            target,
            weights: LossWeights::default(),
        }
    }

    pub fn sample(&self) -> Sample<'_> {
        Sample {
            camera: Some(CameraSample {
                view: &self.view,
                rgb: &self.rgb,
                sky: &self.sky,
                semantic: Some(&self.semantic),
            }),
            lidar: Some(LidarSample {
                pose: &self.pose,
                spec: &self.spec,
                target: &self.target,
            }),
        }
    }
}

/// Finite-difference settings of [`gradient_check`].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GradientCheckConfig {
    /// Central-difference step for positions, embeddings, and env.
    pub scene_step: f64,
    pub decoder_step: f64,
    /// Gradients smaller than this are compared in absolute rather than
    /// relative terms (the divisor never drops below it).
    pub floor: f64,
}

impl Default for GradientCheckConfig {
    fn default() -> Self {
        Self {
            scene_step: 1e-5,
            decoder_step: 1e-5,
            floor: 1e-4,
        }
    }
}

/// Compares the analytic gradient of the total loss with central differences
/// for every parameter, using the untruncated (smooth) blending settings.
pub fn gradient_check(seed: u64, config: &GradientCheckConfig) -> Result<GradientReport> {
    let start = Instant::now();
    let prob = GradientProblem::new(seed);
    let settings = BlendSettings::smooth();
    let sample = prob.sample();
    let eval = evaluate(&prob.scene, &prob.bank, &sample, &prob.weights, &settings, true)?;
    let grads = eval.grads.expect("requested");
    let params = all_params(&prob.scene, &prob.bank);
    let step = |p: ParamRef| match p {
        ParamRef::Net(..) => config.decoder_step,
        _ => config.scene_step,
    };
    let fd = finite_diff_params(&prob.scene, &prob.bank, &params, step, |s, b| {
        Ok(evaluate(s, b, &sample, &prob.weights, &settings, false)?.report.total)
    })?;
    let floor = config.floor;
    let mut groups = Vec::new();
    for (group, tol) in [("position", 1e-3), ("embedding", 1e-3), ("env", 1e-3), ("decoder", 1e-5)] {
        let mut max_rel: f64 = 0.0;
        let mut worst = String::new();
        let (mut num, mut den) = (0.0, 0.0);
        let mut count = 0;
        for (p, f) in params.iter().zip(&fd) {
            if p.group() != group {
                continue;
            }
            count += 1;
            let a = grads.get(*p);
            let rel = (a - f).abs() / a.abs().max(f.abs()).max(floor);
            num += (a - f) * (a - f);
            den += f * f;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{p:?}: analytic {a:.6e}, fd {f:.6e}");
            }
        }
        let norm_rel = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
        groups.push(GradientGroup {
            group: group.into(),
            count,
            max_rel_error: max_rel,
            norm_rel_error: norm_rel,
            tolerance: tol,
            worst,
            passed: max_rel < tol,
        });
    }
    Ok(GradientReport {
        groups,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// `quick`: a reduced oracle sweep and one gradient check. `full`: the
/// complete oracle sweep at the acceptance sizes.
pub fn run_checks(full: bool, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    out.push(if full {
        oracle_equivalence(50, 500, 64, seed, &BlendSettings::default())?
    } else {
        oracle_equivalence(8, 100, 32, seed, &BlendSettings::default())?
    });
    let g = gradient_check(seed, &GradientCheckConfig::default())?;
    let worst = g
        .groups
        .iter()
        .map(|x| x.max_rel_error / x.tolerance)
        .fold(0.0, f64::max);
    out.push(CheckOutcome {
        name: "gradient check".into(),
        passed: g.passed(),
        metric: worst,
        tolerance: 1.0,
        detail: g
            .groups
            .iter()
            .map(|x| format!("{} max rel {:.2e} (tol {:.0e})", x.group, x.max_rel_error, x.tolerance))
            .collect::<Vec<_>>()
            .join("; "),
        seconds: g.seconds,
    });
    Ok(out)
}

/// Elapsed time helper for callers that print durations.
pub fn fmt_duration(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}
