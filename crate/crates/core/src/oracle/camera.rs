use crate::camera::CameraView;
use crate::decoders::{decode_color, decode_covariance, decode_opacities, decode_semantic, DecoderBank};
use crate::error::Result;
use crate::scene::GaussianScene;

use super::{blend_sorted, falloff, Hit, OracleSettings};

#[derive(Clone, Debug, PartialEq)]
pub struct OracleCameraFrame {
    pub width: usize,
    pub height: usize,
    /// `H * W * 3`.
    pub rgb: Vec<f64>,
    pub semantic: Vec<f64>,
    pub accum_alpha: Vec<f64>,
}

fn quat_rows(q: &[f64; 4]) -> [[f64; 3]; 3] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

struct Projected {
    index: usize,
    u: f64,
    v: f64,
    depth: f64,
    cov: [f64; 3],
    alpha: f64,
    features: Vec<f64>,
}

/// Evaluates every Gaussian at every pixel and blends the globally sorted hits.
pub fn brute_force_render_camera(
    scene: &GaussianScene,
    bank: &DecoderBank,
    view: &CameraView,
    settings: &OracleSettings,
) -> Result<OracleCameraFrame> {
    let rot = quat_rows(&view.pose.orientation);
    let center = view.pose.position;
    let mut projected = Vec::new();
    for (i, (p, e)) in scene.positions().iter().zip(scene.embeddings()).enumerate() {
        let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
        // camera coordinates: Rᵀ d
        let t: Vec<f64> = (0..3).map(|c| (0..3).map(|r| rot[r][c] * d[r]).sum()).collect();
        if t[2] <= 0.01 {
            continue;
        }
        let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let dir = [d[0] / dist, d[1] / dist, d[2] / dist];
        let cov3 = decode_covariance(bank, e).covariance;
        let (alpha, _) = decode_opacities(bank, e, p);
        let color = decode_color(bank, e, &dir, dist)?;
        let sem = decode_semantic(bank, e);
        // Jacobian rows of (fx x/z, fy y/z) in camera coordinates, with the
        // slopes x/z, y/z limited to 1.3 half fields of view, then rotated to world
        let sx = (t[0] / t[2]).clamp(-0.65 * view.width as f64 / view.fx, 0.65 * view.width as f64 / view.fx);
        let sy = (t[1] / t[2]).clamp(-0.65 * view.height as f64 / view.fy, 0.65 * view.height as f64 / view.fy);
        let jc = [
            [view.fx / t[2], 0.0, -view.fx * sx / t[2]],
            [0.0, view.fy / t[2], -view.fy * sy / t[2]],
        ];
        let jw: Vec<[f64; 3]> = jc
            .iter()
            .map(|row| {
                let mut o = [0.0; 3];
                for (k, ok) in o.iter_mut().enumerate() {
                    // (J Rᵀ)[k] = Σ_c J[c] R[k][c]
                    *ok = (0..3).map(|c| row[c] * rot[k][c]).sum();
                }
                o
            })
            .collect();
        let mut s = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let mut acc = 0.0;
                for r in 0..3 {
                    for c in 0..3 {
                        acc += jw[a][r] * cov3[(r, c)] * jw[b][c];
                    }
                }
                s[a][b] = acc;
            }
        }
        projected.push(Projected {
            index: i,
            u: view.fx * t[0] / t[2] + view.cx,
            v: view.fy * t[1] / t[2] + view.cy,
            depth: t[2],
            cov: [s[0][0] + 0.3, 0.5 * (s[0][1] + s[1][0]), s[1][1] + 0.3],
            alpha,
            features: vec![color[0], color[1], color[2], sem[0], sem[1], sem[2]],
        });
    }
    let (w, h) = (view.width, view.height);
    let mut out = OracleCameraFrame {
        width: w,
        height: h,
        rgb: vec![0.0; w * h * 3],
        semantic: vec![0.0; w * h * 3],
        accum_alpha: vec![0.0; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let hits: Vec<(Hit, Vec<f64>)> = projected
                .iter()
                .filter_map(|g| {
                    let a = falloff(g.alpha, g.cov, x as f64 + 0.5 - g.u, y as f64 + 0.5 - g.v, settings.cutoff_sigma)?;
                    Some((
                        Hit {
                            depth: g.depth,
                            index: g.index,
                            alpha: a,
                        },
                        g.features.clone(),
                    ))
                })
                .collect();
            let (f, acc) = blend_sorted(hits, 6, settings.min_transmittance);
            let p = y * w + x;
            out.rgb[p * 3..p * 3 + 3].copy_from_slice(&f[..3]);
            out.semantic[p * 3..p * 3 + 3].copy_from_slice(&f[3..]);
            out.accum_alpha[p] = acc;
        }
    }
    Ok(out)
}
