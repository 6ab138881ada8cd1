use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use crate::decoders::{decode_covariance, decode_lidar, decode_opacities, DecoderBank};
use crate::error::Result;
use crate::lidar::LidarSpec;
use crate::math::Pose;
use crate::scene::GaussianScene;

use super::{blend_sorted, falloff, Hit, OracleSettings};

#[derive(Clone, Debug, PartialEq)]
pub struct OracleLidarFrame {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub intensity: Vec<f64>,
    pub raydrop: Vec<f64>,
    pub accum_beta: Vec<f64>,
}

struct Projected {
    index: usize,
    u: f64,
    v: f64,
    range: f64,
    cov: [f64; 3],
    beta: f64,
    features: Vec<f64>,
}

/// Per-ray brute force over every Gaussian. The footprint is built from the
/// orthogonal-plane covariance written in the azimuth/elevation basis.
pub fn brute_force_render_lidar(
    scene: &GaussianScene,
    bank: &DecoderBank,
    pose: &Pose,
    spec: &LidarSpec,
    settings: &OracleSettings,
) -> Result<OracleLidarFrame> {
    let rot = pose.rotation();
    let center = Vector3::from(pose.position);
    let su = spec.width as f64 / (2.0 * PI);
    let sv = spec.height as f64 / (spec.theta_max - spec.theta_min);
    let mut projected = Vec::new();
    for (i, (p, e)) in scene.positions().iter().zip(scene.embeddings()).enumerate() {
        let d = Vector3::from(*p) - center;
        let q = rot.transpose() * d;
        let r = q.norm();
        let rho = q.xy().norm();
        if r <= 0.01 || r > spec.max_range || rho < 1e-9 * r {
            continue;
        }
        let phi = q.y.atan2(q.x);
        let theta = (q.z / r).asin();
        let e_phi = Vector3::new(-phi.sin(), phi.cos(), 0.0);
        let e_theta = Vector3::new(-theta.sin() * phi.cos(), -theta.sin() * phi.sin(), theta.cos());
        let sigma_world = decode_covariance(bank, e).covariance;
        let sigma: Matrix3<f64> = rot.transpose() * sigma_world * rot;
        let n = q / r;
        let proj = Matrix3::identity() - n * n.transpose();
        let flat = proj * sigma * proj;
        let a = [e_phi * (su / rho), e_theta * (-sv / r)];
        let m = |x: usize, y: usize| a[x].dot(&(flat * a[y]));
        let (beta_alpha, beta) = decode_opacities(bank, e, p);
        let _ = beta_alpha;
        let dir = d / d.norm();
        let (int, drop) = decode_lidar(bank, e, &[dir.x, dir.y, dir.z], d.norm(), &scene.env)?;
        projected.push(Projected {
            index: i,
            u: su * (phi + PI),
            v: sv * (spec.theta_max - theta),
            range: r,
            cov: [m(0, 0) + 0.3, 0.5 * (m(0, 1) + m(1, 0)), m(1, 1) + 0.3],
            beta,
            features: vec![int, drop, r],
        });
    }
    let (w, h) = (spec.width, spec.height);
    let wf = w as f64;
    let mut out = OracleLidarFrame {
        width: w,
        height: h,
        depth: vec![0.0; w * h],
        intensity: vec![0.0; w * h],
        raydrop: vec![0.0; w * h],
        accum_beta: vec![0.0; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let hits: Vec<(Hit, Vec<f64>)> = projected
                .iter()
                .filter_map(|g| {
                    let mut du = x as f64 + 0.5 - g.u;
                    while du > wf / 2.0 {
                        du -= wf;
                    }
                    while du < -wf / 2.0 {
                        du += wf;
                    }
                    let a = falloff(g.beta, g.cov, du, y as f64 + 0.5 - g.v, settings.cutoff_sigma)?;
                    Some((
                        Hit {
                            depth: g.range,
                            index: g.index,
                            alpha: a,
                        },
                        g.features.clone(),
                    ))
                })
                .collect();
            let (f, acc) = blend_sorted(hits, 3, settings.min_transmittance);
            let p = y * w + x;
            out.intensity[p] = f[0];
            out.raydrop[p] = f[1] + 1.0 - acc;
            out.depth[p] = f[2] / acc.max(crate::lidar::DEPTH_NORM_FLOOR);
            out.accum_beta[p] = acc;
        }
    }
    Ok(out)
}
