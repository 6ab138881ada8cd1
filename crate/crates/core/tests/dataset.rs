use std::fs;
use std::path::Path;

use embsplat::io::raster::read_float_raster;
use embsplat::io::synthetic::range_raster;
use embsplat::io::{generate_synthetic_dataset, load_manifest, read_split, Dataset, Recipe};
use embsplat::lidar::build_range_images;

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "rgb", "sky", "semantic", "lidar", "range"] {
        let d = dir.join(sub);
        let mut names: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        names.sort();
        for p in names {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn toy_dataset_loads_and_is_self_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = Recipe::toy();
    generate_synthetic_dataset(&recipe, 3, dir.path()).unwrap();
    let data = Dataset::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(data.frames.len(), 20);
    assert_eq!(data.scans.len(), 10);
    assert!(data.manifest.lidar_losses_enabled());

    // the first scan defines the world frame
    assert_eq!(data.scans[0].pose.position, [0.0; 3]);

    for scan in &data.scans {
        let stored = read_float_raster(&dir.path().join(format!("range/{}.embr", scan.name))).unwrap();
        let rebuilt = range_raster(&build_range_images(&scan.points, &scan.spec));
        let rebuilt: Vec<f32> = rebuilt.data.iter().map(|&v| v as f32).collect();
        let stored: Vec<f32> = stored.data.iter().map(|&v| v as f32).collect();
        assert_eq!(rebuilt, stored, "scan {}", scan.name);
        assert!(scan.target.ray_mask.count() > 1000);
    }
    for f in &data.frames {
        let sky = f.sky.count();
        assert!(sky > 0 && sky < f.sky.data.len(), "{}: sky {sky}", f.name);
    }

    let split = read_split(&dir.path().join("split.txt")).unwrap();
    assert_eq!(split, ["cam004", "cam009", "cam014", "cam019", "scan004", "scan009"]);
}

#[test]
fn generation_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let recipe = Recipe::toy();
    generate_synthetic_dataset(&recipe, 9, a.path()).unwrap();
    generate_synthetic_dataset(&recipe, 9, b.path()).unwrap();
    generate_synthetic_dataset(&recipe, 10, c.path()).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
    assert_ne!(tree_bytes(a.path()), tree_bytes(c.path()));
}

#[test]
fn manifest_load_save_load_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&Recipe::toy(), 1, dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let first = load_manifest(&path).unwrap();
    first.save(&path).unwrap();
    let second = load_manifest(&path).unwrap();
    assert_eq!(first, second);
}

#[test]
fn shipped_toy_recipe_matches_builtin() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../recipes/toy.json");
    let r: Recipe = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(r, Recipe::toy());
}
