//! Independent references for the optimized code paths. Nothing here calls
//! the rasterizer or the projection code of the renderers.

mod camera;
mod eig;
mod fd;
mod lidar;

pub use camera::{brute_force_render_camera, OracleCameraFrame};
pub use eig::{dense_eig_2x2, dense_eig_3x3};
pub use fd::{finite_diff_gradient, finite_diff_params, DEFAULT_FD_STEP};
pub use lidar::{brute_force_render_lidar, OracleLidarFrame};

/// Truncation knobs of the brute-force renderers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleSettings {
    /// Same meaning as in the optimized renderer; it is part of the blending
    /// math, not an optimization.
    pub cutoff_sigma: Option<f64>,
    pub min_transmittance: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            cutoff_sigma: Some(3.0),
            min_transmittance: 1e-12,
        }
    }
}

/// One candidate contribution at a pixel.
pub(crate) struct Hit {
    pub depth: f64,
    pub index: usize,
    pub alpha: f64,
}

/// Blends hits front to back; returns the accumulated feature vector and `1 - T`.
pub(crate) fn blend_sorted(mut hits: Vec<(Hit, Vec<f64>)>, channels: usize, min_t: f64) -> (Vec<f64>, f64) {
    hits.sort_by(|a, b| a.0.depth.partial_cmp(&b.0.depth).unwrap().then(a.0.index.cmp(&b.0.index)));
    let mut out = vec![0.0; channels];
    let mut t = 1.0f64;
    for (h, f) in hits {
        for c in 0..channels {
            out[c] += f[c] * h.alpha * t;
        }
        t *= 1.0 - h.alpha;
        if t < min_t {
            break;
        }
    }
    (out, 1.0 - t)
}

/// Effective opacity of a 2D Gaussian with covariance `[a, b, c]` at offset `(dx, dy)`.
pub(crate) fn falloff(opacity: f64, cov: [f64; 3], dx: f64, dy: f64, cutoff_sigma: Option<f64>) -> Option<f64> {
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > 0.0) {
        return None;
    }
    // dᵀ Σ⁻¹ d without forming the inverse
    let m = (cov[2] * dx * dx - 2.0 * cov[1] * dx * dy + cov[0] * dy * dy) / det;
    if let Some(k) = cutoff_sigma {
        if m > k * k {
            return None;
        }
    }
    Some(opacity * (-0.5 * m).exp())
}
