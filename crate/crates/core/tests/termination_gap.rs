//! Quantifies how far early transmittance termination moves the optimized
//! renderers away from the oracles on deeply overlapping scenes.

use embsplat::camera::{CameraMode, CameraView};
use embsplat::check::lidar_facing_z;
use embsplat::decoders::{DecoderBank, DecoderInit};
use embsplat::lidar::LidarSpec;
use embsplat::math::Pose;
use embsplat::oracle::{brute_force_render_camera, brute_force_render_lidar, OracleSettings};
use embsplat::pipeline::{render_camera, render_lidar};
use embsplat::raster::BlendSettings;
use embsplat::scene::GaussianScene;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Hundreds of wide, fairly opaque Gaussians stacked in front of the sensor.
fn deep_stack(seed: u64) -> (GaussianScene, DecoderBank) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 300;
    let positions = (0..n)
        .map(|_| [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15), rng.random_range(2.5..3.5)])
        .collect();
    let embeddings = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-0.3..0.3))).collect();
    let scene = GaussianScene::new(positions, embeddings, [0.0; 4]).unwrap();
    let init = DecoderInit {
        initial_scale: 0.25,
        initial_opacity: 0.7,
        ..DecoderInit::default()
    };
    (scene, DecoderBank::seeded(&init, seed))
}

#[test]
fn termination_gap_is_bounded_by_the_threshold() {
    let production = BlendSettings::default();
    let matched = BlendSettings {
        min_transmittance: OracleSettings::default().min_transmittance,
        ..production
    };
    let oracle = OracleSettings::default();
    let view = CameraView::with_fov(Pose::new([0.0; 3], [1.0, 0.0, 0.0, 0.0]), 1.0, 32, 32).unwrap();
    let spec = LidarSpec {
        width: 64,
        height: 32,
        theta_min: -0.6,
        theta_max: 0.6,
        max_range: 50.0,
    };
    let pose = lidar_facing_z([0.0; 3]);
    let t = production.min_transmittance;

    for seed in 0..3 {
        let (scene, bank) = deep_stack(seed);
        let slow = brute_force_render_camera(&scene, &bank, &view, &oracle).unwrap();
        let fast = render_camera(&scene, &bank, &view, CameraMode::Both, &production).unwrap();
        let rgb_gap = max_abs_diff(&fast.rgb.data, &slow.rgb);
        let alpha_gap = max_abs_diff(&fast.accum_alpha.data, &slow.accum_alpha);
        // colors lie in [0, 1] and the dropped tail weighs less than t
        assert!(rgb_gap <= t && alpha_gap <= t, "seed {seed}: rgb {rgb_gap:e}, alpha {alpha_gap:e}");
        assert!(alpha_gap > 1e-6, "seed {seed}: termination never triggered ({alpha_gap:e})");

        let exact = render_camera(&scene, &bank, &view, CameraMode::Both, &matched).unwrap();
        assert!(max_abs_diff(&exact.rgb.data, &slow.rgb) < 1e-12);
        assert!(max_abs_diff(&exact.accum_alpha.data, &slow.accum_alpha) < 1e-12);

        let slow = brute_force_render_lidar(&scene, &bank, &pose, &spec, &oracle).unwrap();
        let fast = render_lidar(&scene, &bank, &pose, &spec, &production).unwrap();
        let beta_gap = max_abs_diff(&fast.accum_beta.data, &slow.accum_beta);
        let depth_gap = max_abs_diff(&fast.depth.data, &slow.depth);
        assert!(beta_gap <= t, "seed {seed}: beta {beta_gap:e}");
        // the dropped tail can pull the normalized depth by at most t times
        // the range spread of the stack (about 1.5 m here)
        assert!(depth_gap <= 2.0 * t, "seed {seed}: depth {depth_gap:e}");
        println!("seed {seed}: rgb {rgb_gap:.2e} alpha {alpha_gap:.2e} beta {beta_gap:.2e} depth {depth_gap:.2e}");

        let exact = render_lidar(&scene, &bank, &pose, &spec, &matched).unwrap();
        assert!(max_abs_diff(&exact.depth.data, &slow.depth) < 1e-10);
        assert!(max_abs_diff(&exact.accum_beta.data, &slow.accum_beta) < 1e-12);
    }
}
