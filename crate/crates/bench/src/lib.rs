//! Shared fixtures for the criterion benches.

use embsplat::camera::CameraView;
use embsplat::check::{lidar_facing_z, random_scene};
use embsplat::decoders::DecoderBank;
use embsplat::lidar::LidarSpec;
use embsplat::math::Pose;
use embsplat::scene::GaussianScene;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn scene(n: usize, seed: u64) -> (GaussianScene, DecoderBank) {
    random_scene(&mut ChaCha8Rng::seed_from_u64(seed), n)
}

/// A camera at the origin looking down +z at the random-scene volume.
pub fn camera(size: usize) -> CameraView {
    CameraView::with_fov(Pose::default(), 1.0, size, size).expect("valid view")
}

pub fn lidar() -> (Pose, LidarSpec) {
    let spec = LidarSpec {
        width: 256,
        height: 32,
        theta_min: -0.5,
        theta_max: 0.5,
        max_range: 30.0,
    };
    (lidar_facing_z([0.0, 0.0, 0.0]), spec)
}
