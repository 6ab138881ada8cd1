//! Range-view rendering for a spinning LiDAR: spherical pixel mapping,
//! ground-truth range images from raw scans, and β-blended depth, intensity,
//! and raydrop with the exact reverse pass.
//!
//! Sensor frame: x forward, y left, z up. Azimuth `φ = atan2(y, x)`,
//! elevation `θ = asin(z / r)`. Pixel column `u = W/(2π)·(φ + π)`,
//! row `v = H/(Θmax − Θmin)·(Θmax − θ)`.

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, Mask};
use crate::math::Pose;
use crate::raster::{rasterize, rasterize_backward, BlendSettings, Blended, Canvas, Splat};

/// Returns closer than this (meters) are culled.
pub const NEAR_RANGE: f64 = 0.01;
/// Added to the diagonal of every range-view covariance (px²).
pub const DILATION: f64 = 0.3;
/// Expected depth divides by `max(accum, DEPTH_NORM_FLOOR)`; rays with no
/// contributor render depth 0.
pub const DEPTH_NORM_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub width: usize,
    pub height: usize,
    /// Lower vertical field-of-view bound (radians).
    pub theta_min: f64,
    pub theta_max: f64,
    pub max_range: f64,
}

impl LidarSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_max > self.theta_min) || self.width == 0 || self.height == 0 || !(self.max_range > 0.0) {
            return Err(Error::Config(format!("invalid lidar spec {self:?}")));
        }
        Ok(())
    }

    /// Pixels per radian of azimuth.
    pub fn ku(&self) -> f64 {
        self.width as f64 / (2.0 * PI)
    }

    /// Pixels per radian of elevation.
    pub fn kv(&self) -> f64 {
        self.height as f64 / (self.theta_max - self.theta_min)
    }

    fn canvas(&self) -> Canvas {
        Canvas {
            width: self.width,
            height: self.height,
            wrap: true,
        }
    }
}

/// Continuous pixel coordinates `(u, v)` and range of a sensor-frame point.
pub fn spherical_coords(q: &[f64; 3], spec: &LidarSpec) -> Result<(f64, f64, f64)> {
    let r = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
    if r == 0.0 {
        return Err(Error::ZeroNormPoint);
    }
    let phi = q[1].atan2(q[0]);
    let theta = (q[2] / r).clamp(-1.0, 1.0).asin();
    Ok((spec.ku() * (phi + PI), spec.kv() * (spec.theta_max - theta), r))
}

/// Pixel `(u, v)` and range, or `None` outside the field of view or beyond
/// `max_range`.
pub fn spherical_project(q: &[f64; 3], spec: &LidarSpec) -> Result<Option<(usize, usize, f64)>> {
    let (uf, vf, r) = spherical_coords(q, spec)?;
    let theta = (q[2] / r).clamp(-1.0, 1.0).asin();
    if theta < spec.theta_min || theta > spec.theta_max || r > spec.max_range {
        return Ok(None);
    }
    let u = (uf.floor() as i64).rem_euclid(spec.width as i64) as usize;
    let v = (vf.floor() as usize).min(spec.height - 1);
    Ok(Some((u, v, r)))
}

/// Inverse of [`spherical_coords`].
pub fn spherical_unproject(u: f64, v: f64, range: f64, spec: &LidarSpec) -> [f64; 3] {
    let phi = u / spec.ku() - PI;
    let theta = spec.theta_max - v / spec.kv();
    [
        range * theta.cos() * phi.cos(),
        range * theta.cos() * phi.sin(),
        range * theta.sin(),
    ]
}

/// Ground-truth rasters of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImageSet {
    pub range: Image,
    pub intensity: Image,
    pub ray_mask: Mask,
}

impl RangeImageSet {
    pub fn empty(spec: &LidarSpec) -> Self {
        Self {
            range: Image::zeros(spec.width, spec.height, 1),
            intensity: Image::zeros(spec.width, spec.height, 1),
            ray_mask: Mask::filled(spec.width, spec.height, false),
        }
    }

    /// Raydrop target: 1 where the beam returned nothing.
    pub fn raydrop_target(&self) -> Image {
        Image {
            width: self.ray_mask.width,
            height: self.ray_mask.height,
            channels: 1,
            data: self.ray_mask.data.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect(),
        }
    }
}

/// Rasterizes a sensor-frame scan, keeping the nearest return per pixel.
/// Zero-norm points are skipped.
pub fn build_range_images(scan: &[([f64; 3], f64)], spec: &LidarSpec) -> RangeImageSet {
    let mut out = RangeImageSet::empty(spec);
    for (p, intensity) in scan {
        let Ok(Some((u, v, r))) = spherical_project(p, spec) else {
            continue;
        };
        let i = v * spec.width + u;
        if !out.ray_mask.data[i] || r < out.range.data[i] {
            out.ray_mask.data[i] = true;
            out.range.data[i] = r;
            out.intensity.data[i] = *intensity;
        }
    }
    out
}

/// Covariance seen on the plane orthogonal to a viewing direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrthoProjection {
    /// `P Σ Pᵀ` with `P = I − v vᵀ`.
    pub cov: Matrix3<f64>,
    /// Square roots of the two largest eigenvalues, descending.
    pub scales: [f64; 2],
    /// Two largest eigenvalues with their eigenvectors, descending.
    pub eigenvalues: [f64; 2],
    pub eigenvectors: [Vector3<f64>; 2],
}

/// Any orthonormal pair spanning the plane orthogonal to unit `v`.
fn orthonormal_basis(v: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if v.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let a = (helper - v * v.dot(&helper)).normalize();
    (a, v.cross(&a))
}

/// Projects `cov` onto the plane orthogonal to unit `view_dir`. The
/// eigenpairs come from the 2x2 restriction to that plane.
pub fn project_covariance_orthogonal(cov: &Matrix3<f64>, view_dir: &Vector3<f64>) -> OrthoProjection {
    let v = view_dir;
    let p = Matrix3::identity() - v * v.transpose();
    let mut c = p * cov * p.transpose();
    c = (c + c.transpose()) * 0.5;
    let (a, b) = orthonormal_basis(v);
    let m = [a.dot(&(cov * a)), a.dot(&(cov * b)), b.dot(&(cov * b))];
    let half_tr = 0.5 * (m[0] + m[2]);
    let diff = 0.5 * (m[0] - m[2]);
    let disc = (diff * diff + m[1] * m[1]).sqrt();
    let (l0, l1) = (half_tr + disc, half_tr - disc);
    // eigenvector of the larger eigenvalue in the (a, b) basis
    let (ex, ey) = if disc == 0.0 {
        (1.0, 0.0)
    } else if diff >= 0.0 {
        let t = m[1] / (diff + disc);
        let n = (1.0 + t * t).sqrt();
        (1.0 / n, t / n)
    } else {
        let t = (disc - diff) / m[1];
        let n = (1.0 + t * t).sqrt();
        (1.0 / n, t / n)
    };
    let e0 = a * ex + b * ey;
    let e1 = a * -ey + b * ex;
    OrthoProjection {
        cov: c,
        scales: [l0.max(0.0).sqrt(), l1.max(0.0).sqrt()],
        eigenvalues: [l0, l1],
        eigenvectors: [e0, e1],
    }
}

/// Minimal arithmetic needed to differentiate the spherical Jacobian.
trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn lift(v: f64) -> Self;
    fn sqrt(self) -> Self;
}

impl Scalar for f64 {
    fn lift(v: f64) -> Self {
        v
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Forward-mode dual number `re + du·ε`.
#[derive(Clone, Copy, Debug)]
struct Dual {
    re: f64,
    du: f64,
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { re: self.re + o.re, du: self.du + o.du }
    }
}
impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { re: self.re - o.re, du: self.du - o.du }
    }
}
impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { re: self.re * o.re, du: self.du * o.re + self.re * o.du }
    }
}
impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual { re: self.re / o.re, du: (self.du * o.re - self.re * o.du) / (o.re * o.re) }
    }
}
impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { re: -self.re, du: -self.du }
    }
}
impl Scalar for Dual {
    fn lift(v: f64) -> Self {
        Dual { re: v, du: 0.0 }
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual { re: s, du: self.du / (2.0 * s) }
    }
}

/// Gradients of azimuth and elevation with respect to the sensor-frame point.
fn angle_gradients<T: Scalar>(q: [T; 3]) -> ([T; 3], [T; 3]) {
    let [x, y, z] = q;
    let rho2 = x * x + y * y;
    let rho = rho2.sqrt();
    let r2 = rho2 + z * z;
    let zero = T::lift(0.0);
    let g_phi = [-y / rho2, x / rho2, zero];
    let s = z / (rho * r2);
    let g_theta = [-x * s, -y * s, rho / r2];
    (g_phi, g_theta)
}

/// `(H_φ w, H_θ w)`: Hessian-vector products of azimuth and elevation.
fn angle_hessian_products(q: &Vector3<f64>, w: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let d = [
        Dual { re: q.x, du: w.x },
        Dual { re: q.y, du: w.y },
        Dual { re: q.z, du: w.z },
    ];
    let (gp, gt) = angle_gradients(d);
    (
        Vector3::new(gp[0].du, gp[1].du, gp[2].du),
        Vector3::new(gt[0].du, gt[1].du, gt[2].du),
    )
}

/// Range-view footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeFootprint {
    pub index: usize,
    pub mean: [f64; 2],
    /// Pixel-space covariance before dilation.
    pub cov: [f64; 3],
    pub range: f64,
    sensor_point: Vector3<f64>,
    /// Rows `ku ∇φ` and `−kv ∇θ` in the sensor frame.
    js: Matrix2x3<f64>,
}

/// Projects a world-frame Gaussian into the range image of a sensor at `pose`.
/// The pixel covariance is the orthogonal-plane covariance expressed in the
/// local azimuth/elevation basis and scaled to pixels.
pub fn project_gaussian_lidar(
    pose: &Pose,
    spec: &LidarSpec,
    index: usize,
    mean: &[f64; 3],
    cov: &Matrix3<f64>,
) -> Option<RangeFootprint> {
    let rs = pose.rotation();
    let q = rs.transpose() * (Vector3::from(*mean) - pose.center());
    let r = q.norm();
    let rho = (q.x * q.x + q.y * q.y).sqrt();
    if r <= NEAR_RANGE || r > spec.max_range || rho < 1e-9 * r {
        return None;
    }
    let (gp, gt) = angle_gradients([q.x, q.y, q.z]);
    let (ku, kv) = (spec.ku(), spec.kv());
    let js = Matrix2x3::new(
        ku * gp[0],
        ku * gp[1],
        ku * gp[2],
        -kv * gt[0],
        -kv * gt[1],
        -kv * gt[2],
    );
    let j = js * rs.transpose();
    let c = j * cov * j.transpose();
    let (u, v, _) = spherical_coords(&[q.x, q.y, q.z], spec).ok()?;
    Some(RangeFootprint {
        index,
        mean: [u, v],
        cov: [c[(0, 0)], 0.5 * (c[(0, 1)] + c[(1, 0)]), c[(1, 1)]],
        range: r,
        sensor_point: q,
        js,
    })
}

/// Decoded per-Gaussian inputs of a LiDAR render.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LidarAttributes {
    pub positions: Vec<[f64; 3]>,
    pub covariances: Vec<Matrix3<f64>>,
    pub betas: Vec<f64>,
    pub intensities: Vec<f64>,
    pub raydrops: Vec<f64>,
}

impl LidarAttributes {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Debug)]
struct LidarTape {
    count: usize,
    footprints: Vec<RangeFootprint>,
    splats: Vec<Splat>,
    features: Vec<f64>,
    blended: Blended,
    settings: BlendSettings,
}

/// Rendered range view. `depth` is the weight-normalized expected range;
/// `intensity` is blended like camera color; `raydrop` counts the
/// transmittance left after the last contributor as dropped.
#[derive(Clone, Debug)]
pub struct LidarFrame {
    pub depth: Image,
    pub intensity: Image,
    pub raydrop: Image,
    pub accum_beta: Image,
    tape: Option<LidarTape>,
}

impl LidarFrame {
    pub fn is_training(&self) -> bool {
        self.tape.is_some()
    }

    /// Sensor-frame returns through pixel centers, skipping rays whose
    /// rendered raydrop is at least `drop_threshold` or whose depth is not
    /// positive.
    pub fn to_points(&self, spec: &LidarSpec, drop_threshold: f64) -> Vec<([f64; 3], f64)> {
        let mut out = Vec::new();
        for v in 0..spec.height {
            for u in 0..spec.width {
                let p = v * spec.width + u;
                let r = self.depth.data[p];
                if self.raydrop.data[p] >= drop_threshold || !(r > 0.0) {
                    continue;
                }
                out.push((spherical_unproject(u as f64 + 0.5, v as f64 + 0.5, r, spec), self.intensity.data[p]));
            }
        }
        out
    }
}

const CHANNELS: usize = 3;

pub fn render_lidar_attributes(
    attrs: &LidarAttributes,
    pose: &Pose,
    spec: &LidarSpec,
    settings: &BlendSettings,
    record: bool,
) -> Result<LidarFrame> {
    spec.validate()?;
    let n = attrs.len();
    for (name, len) in [
        ("covariances", attrs.covariances.len()),
        ("betas", attrs.betas.len()),
        ("intensities", attrs.intensities.len()),
        ("raydrops", attrs.raydrops.len()),
    ] {
        if len != n {
            return Err(Error::DimensionMismatch {
                context: name,
                expected: n,
                got: len,
            });
        }
    }
    let mut footprints = Vec::new();
    let mut splats = Vec::new();
    let mut features = Vec::new();
    for i in 0..n {
        let Some(fp) = project_gaussian_lidar(pose, spec, i, &attrs.positions[i], &attrs.covariances[i]) else {
            continue;
        };
        let cov = [fp.cov[0] + DILATION, fp.cov[1], fp.cov[2] + DILATION];
        let Some(s) = Splat::new(
            i,
            fp.mean,
            cov,
            fp.range,
            attrs.betas[i],
            settings.cutoff_sigma,
            spec.width,
            spec.height,
            true,
        ) else {
            continue;
        };
        footprints.push(fp);
        splats.push(s);
        features.extend_from_slice(&[attrs.intensities[i], attrs.raydrops[i], fp.range]);
    }
    let canvas = spec.canvas();
    let blended = rasterize(&splats, &features, CHANNELS, &canvas, settings, record);
    let (w, h) = (spec.width, spec.height);
    let mut depth = Image::zeros(w, h, 1);
    let mut intensity = Image::zeros(w, h, 1);
    let mut raydrop = Image::zeros(w, h, 1);
    for p in 0..w * h {
        let f = &blended.features[p * CHANNELS..(p + 1) * CHANNELS];
        let a = blended.accum[p];
        intensity.data[p] = f[0];
        raydrop.data[p] = f[1] + (1.0 - a);
        depth.data[p] = f[2] / a.max(DEPTH_NORM_FLOOR);
    }
    let accum_beta = Image::from_vec(w, h, 1, blended.accum.clone())?;
    let tape = record.then_some(LidarTape {
        count: n,
        footprints,
        splats,
        features,
        blended,
        settings: *settings,
    });
    Ok(LidarFrame {
        depth,
        intensity,
        raydrop,
        accum_beta,
        tape,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LidarGrads {
    pub positions: Vec<[f64; 3]>,
    pub covariances: Vec<Matrix3<f64>>,
    pub betas: Vec<f64>,
    pub intensities: Vec<f64>,
    pub raydrops: Vec<f64>,
}

impl LidarGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![[0.0; 3]; n],
            covariances: vec![Matrix3::zeros(); n],
            betas: vec![0.0; n],
            intensities: vec![0.0; n],
            raydrops: vec![0.0; n],
        }
    }
}

/// Upstream gradients of a [`LidarFrame`]; `None` counts as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LidarUpstream<'a> {
    pub depth: Option<&'a Image>,
    pub intensity: Option<&'a Image>,
    pub raydrop: Option<&'a Image>,
    pub accum: Option<&'a Image>,
}

pub fn render_lidar_backward(
    frame: &LidarFrame,
    pose: &Pose,
    spec: &LidarSpec,
    attrs: &LidarAttributes,
    upstream: &LidarUpstream,
) -> Result<LidarGrads> {
    let tape = frame.tape.as_ref().ok_or(Error::NotTrainingFrame)?;
    let npix = spec.width * spec.height;
    for img in [upstream.depth, upstream.intensity, upstream.raydrop, upstream.accum].into_iter().flatten() {
        img.same_shape(&frame.depth)?;
    }
    let get = |img: Option<&Image>, p: usize| img.map_or(0.0, |i| i.data[p]);
    let mut d_feat = vec![0.0; npix * CHANNELS];
    let mut d_acc = vec![0.0; npix];
    for p in 0..npix {
        let a = tape.blended.accum[p];
        let f_range = tape.blended.features[p * CHANNELS + 2];
        let dd = get(upstream.depth, p);
        let drd = get(upstream.raydrop, p);
        d_feat[p * CHANNELS] = get(upstream.intensity, p);
        d_feat[p * CHANNELS + 1] = drd;
        let mut da = get(upstream.accum, p) - drd;
        let norm = a.max(DEPTH_NORM_FLOOR);
        d_feat[p * CHANNELS + 2] = dd / norm;
        if a > DEPTH_NORM_FLOOR {
            da -= dd * (f_range / a) / a;
        }
        d_acc[p] = da;
    }
    let splat_grads = rasterize_backward(
        &tape.splats,
        &tape.features,
        &tape.blended,
        &d_feat,
        &d_acc,
        &spec.canvas(),
        &tape.settings,
    )?;

    let mut out = LidarGrads::zeros(tape.count);
    let rs = pose.rotation();
    for (fp, g) in tape.footprints.iter().zip(&splat_grads) {
        let i = fp.index;
        out.betas[i] += g.opacity;
        out.intensities[i] += g.features[0];
        out.raydrops[i] += g.features[1];

        let q = fp.sensor_point;
        let gm = Matrix2::new(g.cov[0], g.cov[1], g.cov[1], g.cov[2]);
        let j = fp.js * rs.transpose();
        let sigma = &attrs.covariances[i];
        out.covariances[i] += j.transpose() * gm * j;

        let mut dq = q / fp.range * g.features[2];
        dq += fp.js.transpose() * nalgebra::Vector2::new(g.mean[0], g.mean[1]);
        let d_js = 2.0 * gm * j * sigma * rs;
        let row0 = Vector3::new(d_js[(0, 0)], d_js[(0, 1)], d_js[(0, 2)]);
        let row1 = Vector3::new(d_js[(1, 0)], d_js[(1, 1)], d_js[(1, 2)]);
        let (h_phi_row0, _) = angle_hessian_products(&q, &row0);
        let (_, h_theta_row1) = angle_hessian_products(&q, &row1);
        dq += h_phi_row0 * spec.ku() - h_theta_row1 * spec.kv();
        let dp = rs * dq;
        for c in 0..3 {
            out.positions[i][c] += dp[c];
        }
    }
    Ok(out)
}
