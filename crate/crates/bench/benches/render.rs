use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use embsplat::camera::CameraMode;
use embsplat::oracle::{brute_force_render_camera, OracleSettings};
use embsplat::pipeline::{camera_attributes, render_camera, render_lidar};
use embsplat::raster::BlendSettings;
use embsplat_bench::{camera, lidar, scene};

fn camera_render(c: &mut Criterion) {
    let mut g = c.benchmark_group("camera_render");
    let settings = BlendSettings::default();
    for n in [100, 1000, 5000] {
        let (s, b) = scene(n, 1);
        let view = camera(64);
        g.bench_with_input(BenchmarkId::new("64px", n), &n, |bench, _| {
            bench.iter(|| render_camera(black_box(&s), &b, &view, CameraMode::Both, &settings).unwrap())
        });
    }
    let (s, b) = scene(1000, 1);
    let view = camera(256);
    g.bench_function("256px/1000", |bench| {
        bench.iter(|| render_camera(black_box(&s), &b, &view, CameraMode::Rgb, &settings).unwrap())
    });
    g.finish();
}

fn lidar_render(c: &mut Criterion) {
    let mut g = c.benchmark_group("lidar_render");
    let settings = BlendSettings::default();
    let (pose, spec) = lidar();
    for n in [100, 1000, 5000] {
        let (s, b) = scene(n, 2);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| render_lidar(black_box(&s), &b, &pose, &spec, &settings).unwrap())
        });
    }
    g.finish();
}

fn decoding(c: &mut Criterion) {
    let (s, b) = scene(1000, 3);
    c.bench_function("decode_camera_attributes/1000", |bench| {
        bench.iter(|| camera_attributes(black_box(&s), &b, &[0.0; 3]).unwrap())
    });
}

fn oracle(c: &mut Criterion) {
    let (s, b) = scene(100, 4);
    let view = camera(32);
    let mut g = c.benchmark_group("oracle");
    g.sample_size(10);
    g.bench_function("camera/32px/100", |bench| {
        bench.iter(|| brute_force_render_camera(black_box(&s), &b, &view, &OracleSettings::default()).unwrap())
    });
    g.finish();
}

criterion_group!(benches, camera_render, lidar_render, decoding, oracle);
criterion_main!(benches);
