//! Scan aggregation and voxel-grid downsampling.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ply::ScanPoint;
use crate::math::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelFilter {
    /// Edge length in meters.
    pub size: f64,
}

impl VoxelFilter {
    pub fn new(size: f64) -> Result<Self> {
        if !(size > 0.0) || !size.is_finite() {
            return Err(Error::Config(format!("voxel size must be positive, got {size}")));
        }
        Ok(Self { size })
    }

    fn key(&self, p: &[f64; 3]) -> [i64; 3] {
        p.map(|c| (c / self.size).floor() as i64)
    }

    /// One centroid per occupied voxel, ordered by voxel index.
    pub fn downsample(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let mut cells: BTreeMap<[i64; 3], ([f64; 3], usize)> = BTreeMap::new();
        for p in points {
            let (sum, n) = cells.entry(self.key(p)).or_insert(([0.0; 3], 0));
            for k in 0..3 {
                sum[k] += p[k];
            }
            *n += 1;
        }
        cells
            .into_values()
            .map(|(sum, n)| if n == 1 { sum } else { sum.map(|s| s / n as f64) })
            .collect()
    }
}

/// Moves every scan into the world frame and downsamples the union.
/// Non-finite points are dropped.
pub fn aggregate_and_downsample(scans: &[(Pose, Vec<ScanPoint>)], filter: &VoxelFilter) -> Vec<[f64; 3]> {
    let mut world = Vec::with_capacity(scans.iter().map(|(_, s)| s.len()).sum());
    for (pose, scan) in scans {
        for (p, _) in scan {
            let w = pose.sensor_to_world(&Vector3::from(*p));
            if w.iter().all(|c| c.is_finite()) {
                world.push([w.x, w.y, w.z]);
            }
        }
    }
    filter.downsample(&world)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_voxel_gives_centroid() {
        let f = VoxelFilter::new(3.0).unwrap();
        let out = f.downsample(&[[0.5, 0.5, 0.5], [0.6, 0.5, 0.5]]);
        assert_eq!(out.len(), 1);
        assert!((out[0][0] - 0.55).abs() < 1e-15);
    }

    #[test]
    fn distant_points_stay_apart() {
        let f = VoxelFilter::new(3.0).unwrap();
        assert_eq!(f.downsample(&[[0.5, 0.5, 0.5], [10.5, 0.5, 0.5]]).len(), 2);
    }

    #[test]
    fn grid_count_is_closed_form() {
        // 31 samples per axis at 1 m spacing on [0, 30] fill voxels 0..=10
        // of size 3: the last voxel holds only the coordinate 30
        let f = VoxelFilter::new(3.0).unwrap();
        let mut pts = Vec::new();
        for i in 0..=30 {
            for j in 0..=30 {
                pts.push([i as f64 + 0.25, j as f64 + 0.25, 0.25]);
            }
        }
        let per_axis = (30.25f64 / 3.0).floor() as usize + 1;
        assert_eq!(f.downsample(&pts).len(), per_axis * per_axis);
    }

    #[test]
    fn transforms_to_world() {
        let pose = Pose::new([10.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]);
        let out = aggregate_and_downsample(&[(pose, vec![([1.0, 1.0, 1.0], 0.3)])], &VoxelFilter::new(0.5).unwrap());
        assert_eq!(out, vec![[11.0, 1.0, 1.0]]);
    }

    #[test]
    fn rejects_bad_size() {
        assert!(VoxelFilter::new(0.0).is_err());
        assert!(VoxelFilter::new(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn idempotent(pts in prop::collection::vec(prop::array::uniform3(-20.0f64..20.0), 1..200), size in 0.1f64..5.0) {
            let f = VoxelFilter::new(size).unwrap();
            let once = f.downsample(&pts);
            prop_assert_eq!(f.downsample(&once), once);
        }
    }
}
