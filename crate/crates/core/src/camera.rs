//! Perspective splatting of decoded Gaussians into RGB, semantic, and
//! coverage images, with the exact reverse pass.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::math::{Pose, Sym2};
use crate::raster::{rasterize, rasterize_backward, BlendSettings, Blended, Canvas, Splat};

/// Gaussians at or in front of this camera depth are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Added to the diagonal of every pixel-space covariance (px²).
pub const DILATION: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    /// Camera-to-world pose with OpenCV axes (x right, y down, z forward).
    pub pose: Pose,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraView {
    pub fn new(pose: Pose, fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let v = Self {
            pose,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        v.validate()?;
        Ok(v)
    }

    /// Square pixels, principal point at the image center.
    pub fn with_fov(pose: Pose, fov_x: f64, width: usize, height: usize) -> Result<Self> {
        let f = width as f64 / (2.0 * (fov_x / 2.0).tan());
        Self::new(pose, f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if !ok {
            return Err(Error::Config(format!(
                "invalid intrinsics fx={} fy={} cx={} cy={} for {}x{}",
                self.fx, self.fy, self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 3] {
        self.pose.position
    }

    fn canvas(&self) -> Canvas {
        Canvas {
            width: self.width,
            height: self.height,
            wrap: false,
        }
    }
}

/// Pixel-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatFootprint {
    pub index: usize,
    pub mean: [f64; 2],
    /// `J W Σ Wᵀ Jᵀ`, before dilation.
    pub cov: Sym2,
    pub depth: f64,
    pub bbox: [i64; 4],
    cam_point: Vector3<f64>,
    jw: Matrix2x3<f64>,
}

impl SplatFootprint {
    /// Covariance used for blending.
    pub fn dilated_cov(&self) -> Sym2 {
        [self.cov[0] + DILATION, self.cov[1], self.cov[2] + DILATION]
    }
}

/// The footprint Jacobian is evaluated with the image-plane slope clamped to
/// this multiple of the half field of view. Off-screen Gaussians close to the
/// camera otherwise get linearized footprints hundreds of pixels wide that
/// haze the whole image.
pub const JACOBIAN_CLAMP: f64 = 1.3;

/// Clamped slopes `x/z`, `y/z` and whether each is unclamped (and so carries
/// gradient).
fn jacobian_slopes(view: &CameraView, t: &Vector3<f64>) -> ([f64; 2], [bool; 2]) {
    let lim = [
        JACOBIAN_CLAMP * 0.5 * view.width as f64 / view.fx,
        JACOBIAN_CLAMP * 0.5 * view.height as f64 / view.fy,
    ];
    let raw = [t.x / t.z, t.y / t.z];
    let u = [raw[0].clamp(-lim[0], lim[0]), raw[1].clamp(-lim[1], lim[1])];
    (u, [u[0] == raw[0], u[1] == raw[1]])
}

fn perspective_jacobian(view: &CameraView, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let (u, _) = jacobian_slopes(view, t);
    Matrix2x3::new(view.fx * iz, 0.0, -view.fx * u[0] * iz, 0.0, view.fy * iz, -view.fy * u[1] * iz)
}

/// Projects a 3D Gaussian; `None` when it is behind the near plane or its
/// footprint misses the image.
pub fn project_gaussian(
    view: &CameraView,
    index: usize,
    mean: &[f64; 3],
    cov: &Matrix3<f64>,
    cutoff_sigma: Option<f64>,
) -> Option<SplatFootprint> {
    let w = view.pose.rotation().transpose();
    let t = w * (Vector3::from(*mean) - view.pose.center());
    if t.z <= NEAR_PLANE {
        return None;
    }
    let jw = perspective_jacobian(view, &t) * w;
    let c = jw * cov * jw.transpose();
    let cov2 = [c[(0, 0)], 0.5 * (c[(0, 1)] + c[(1, 0)]), c[(1, 1)]];
    let mean2 = [view.fx * t.x / t.z + view.cx, view.fy * t.y / t.z + view.cy];
    let fp = SplatFootprint {
        index,
        mean: mean2,
        cov: cov2,
        depth: t.z,
        bbox: [0; 4],
        cam_point: t,
        jw,
    };
    let splat = Splat::new(
        index,
        mean2,
        fp.dilated_cov(),
        t.z,
        1.0,
        cutoff_sigma,
        view.width,
        view.height,
        false,
    )?;
    Some(SplatFootprint {
        bbox: splat.bbox,
        ..fp
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraMode {
    Rgb,
    Semantic,
    #[default]
    Both,
}

impl CameraMode {
    fn channels(self) -> usize {
        match self {
            CameraMode::Both => 6,
            _ => 3,
        }
    }
}

/// Decoded per-Gaussian inputs of a camera render.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CameraAttributes {
    pub positions: Vec<[f64; 3]>,
    pub covariances: Vec<Matrix3<f64>>,
    pub alphas: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub semantics: Vec<[f64; 3]>,
}

impl CameraAttributes {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Debug)]
struct CameraTape {
    count: usize,
    footprints: Vec<SplatFootprint>,
    splats: Vec<Splat>,
    features: Vec<f64>,
    blended: Blended,
    canvas: Canvas,
    settings: BlendSettings,
}

/// Camera render output. Channels not requested by the mode stay zero.
#[derive(Clone, Debug)]
pub struct RenderedFrame {
    pub mode: CameraMode,
    pub rgb: Image,
    pub semantic: Image,
    pub accum_alpha: Image,
    tape: Option<CameraTape>,
}

impl RenderedFrame {
    pub fn is_training(&self) -> bool {
        self.tape.is_some()
    }

    /// Number of (pixel, Gaussian) blending steps, when recorded.
    pub fn contribution_count(&self) -> Option<usize> {
        self.tape
            .as_ref()
            .and_then(|t| t.blended.contributions.as_ref())
            .map(|c| c.total())
    }
}

/// Renders decoded attributes. `record` keeps what the reverse pass needs.
pub fn render_camera_attributes(
    attrs: &CameraAttributes,
    view: &CameraView,
    mode: CameraMode,
    settings: &BlendSettings,
    record: bool,
) -> Result<RenderedFrame> {
    view.validate()?;
    let n = attrs.len();
    for (name, len) in [
        ("covariances", attrs.covariances.len()),
        ("alphas", attrs.alphas.len()),
        ("colors", attrs.colors.len()),
        ("semantics", attrs.semantics.len()),
    ] {
        if len != n {
            return Err(Error::DimensionMismatch {
                context: name,
                expected: n,
                got: len,
            });
        }
    }
    let k = mode.channels();
    let mut footprints = Vec::new();
    let mut splats = Vec::new();
    let mut features = Vec::new();
    for i in 0..n {
        let Some(fp) = project_gaussian(view, i, &attrs.positions[i], &attrs.covariances[i], settings.cutoff_sigma)
        else {
            continue;
        };
        let Some(s) = Splat::new(
            i,
            fp.mean,
            fp.dilated_cov(),
            fp.depth,
            attrs.alphas[i],
            settings.cutoff_sigma,
            view.width,
            view.height,
            false,
        ) else {
            continue;
        };
        footprints.push(fp);
        splats.push(s);
        if mode != CameraMode::Semantic {
            features.extend_from_slice(&attrs.colors[i]);
        }
        if mode != CameraMode::Rgb {
            features.extend_from_slice(&attrs.semantics[i]);
        }
    }
    let canvas = view.canvas();
    let blended = rasterize(&splats, &features, k, &canvas, settings, record);

    let (w, h) = (view.width, view.height);
    let mut rgb = Image::zeros(w, h, 3);
    let mut semantic = Image::zeros(w, h, 3);
    for p in 0..w * h {
        let px = &blended.features[p * k..(p + 1) * k];
        match mode {
            CameraMode::Rgb => rgb.data[p * 3..p * 3 + 3].copy_from_slice(px),
            CameraMode::Semantic => semantic.data[p * 3..p * 3 + 3].copy_from_slice(px),
            CameraMode::Both => {
                rgb.data[p * 3..p * 3 + 3].copy_from_slice(&px[..3]);
                semantic.data[p * 3..p * 3 + 3].copy_from_slice(&px[3..]);
            }
        }
    }
    let accum_alpha = Image::from_vec(w, h, 1, blended.accum.clone())?;
    let tape = record.then_some(CameraTape {
        count: n,
        footprints,
        splats,
        features,
        blended,
        canvas,
        settings: *settings,
    });
    Ok(RenderedFrame {
        mode,
        rgb,
        semantic,
        accum_alpha,
        tape,
    })
}

/// Gradients with respect to every input of [`render_camera_attributes`].
/// Covariance gradients are full-matrix (symmetric) gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraGrads {
    pub positions: Vec<[f64; 3]>,
    pub covariances: Vec<Matrix3<f64>>,
    pub alphas: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub semantics: Vec<[f64; 3]>,
}

impl CameraGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![[0.0; 3]; n],
            covariances: vec![Matrix3::zeros(); n],
            alphas: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
            semantics: vec![[0.0; 3]; n],
        }
    }
}

/// Reverse pass. Missing upstream images count as zero.
pub fn render_camera_backward(
    frame: &RenderedFrame,
    view: &CameraView,
    attrs: &CameraAttributes,
    d_rgb: Option<&Image>,
    d_semantic: Option<&Image>,
    d_accum: Option<&Image>,
) -> Result<CameraGrads> {
    let tape = frame.tape.as_ref().ok_or(Error::NotTrainingFrame)?;
    let k = frame.mode.channels();
    let npix = tape.canvas.width * tape.canvas.height;
    for img in [d_rgb, d_semantic].into_iter().flatten() {
        img.same_shape(&frame.rgb)?;
    }
    if let Some(a) = d_accum {
        a.same_shape(&frame.accum_alpha)?;
    }
    let mut d_feat = vec![0.0; npix * k];
    for p in 0..npix {
        let dst = &mut d_feat[p * k..(p + 1) * k];
        let (rgb_off, sem_off) = match frame.mode {
            CameraMode::Rgb => (Some(0), None),
            CameraMode::Semantic => (None, Some(0)),
            CameraMode::Both => (Some(0), Some(3)),
        };
        if let (Some(o), Some(img)) = (rgb_off, d_rgb) {
            dst[o..o + 3].copy_from_slice(img.pixel(p));
        }
        if let (Some(o), Some(img)) = (sem_off, d_semantic) {
            dst[o..o + 3].copy_from_slice(img.pixel(p));
        }
    }
    let d_acc = d_accum.map(|a| a.data.clone()).unwrap_or_else(|| vec![0.0; npix]);
    let splat_grads = rasterize_backward(
        &tape.splats,
        &tape.features,
        &tape.blended,
        &d_feat,
        &d_acc,
        &tape.canvas,
        &tape.settings,
    )?;

    let mut out = CameraGrads::zeros(tape.count);
    let r = view.pose.rotation();
    for (fp, g) in tape.footprints.iter().zip(&splat_grads) {
        let i = fp.index;
        out.alphas[i] += g.opacity;
        let (rgb_off, sem_off) = match frame.mode {
            CameraMode::Rgb => (Some(0), None),
            CameraMode::Semantic => (None, Some(0)),
            CameraMode::Both => (Some(0), Some(3)),
        };
        if let Some(o) = rgb_off {
            for c in 0..3 {
                out.colors[i][c] += g.features[o + c];
            }
        }
        if let Some(o) = sem_off {
            for c in 0..3 {
                out.semantics[i][c] += g.features[o + c];
            }
        }

        let gm = Matrix2::new(g.cov[0], g.cov[1], g.cov[1], g.cov[2]);
        let sigma = &attrs.covariances[i];
        out.covariances[i] += fp.jw.transpose() * gm * fp.jw;

        let t = fp.cam_point;
        let d_jw = 2.0 * gm * fp.jw * sigma;
        let d_j = d_jw * r;
        let iz = 1.0 / t.z;
        let iz2 = iz * iz;
        let mut dt = Vector3::zeros();
        // through the pixel mean
        dt.x += g.mean[0] * view.fx * iz;
        dt.y += g.mean[1] * view.fy * iz;
        dt.z -= (g.mean[0] * view.fx * t.x + g.mean[1] * view.fy * t.y) * iz2;
        // through the Jacobian entries; J02 = -fx·u/z with u = x/z unless clamped
        let (u, free) = jacobian_slopes(view, &t);
        let f = [view.fx, view.fy];
        dt.z -= (d_j[(0, 0)] * view.fx + d_j[(1, 1)] * view.fy) * iz2;
        for a in 0..2 {
            let dj = d_j[(a, 2)] * f[a];
            if free[a] {
                dt[a] -= dj * iz2;
                dt.z += 2.0 * dj * u[a] * iz2;
            } else {
                dt.z += dj * u[a] * iz2;
            }
        }
        let dp = r * dt;
        for c in 0..3 {
            out.positions[i][c] += dp[c];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_view(w: usize, h: usize) -> CameraView {
        CameraView::new(Pose::default(), 50.0, 60.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    fn single(pos: [f64; 3], s: f64, alpha: f64, color: [f64; 3]) -> CameraAttributes {
        CameraAttributes {
            positions: vec![pos],
            covariances: vec![Matrix3::identity() * s * s],
            alphas: vec![alpha],
            colors: vec![color],
            semantics: vec![[0.0; 3]],
        }
    }

    #[test]
    fn intrinsics_validated() {
        assert!(CameraView::new(Pose::default(), 0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraView::new(Pose::default(), 1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn on_axis_projects_to_principal_point() {
        let v = axis_view(32, 24);
        let fp = project_gaussian(&v, 0, &[0.0, 0.0, 3.0], &(Matrix3::identity() * 0.01), Some(3.0)).unwrap();
        assert_eq!(fp.mean, [16.0, 12.0]);
        assert_eq!(fp.depth, 3.0);
    }

    #[test]
    fn isotropic_footprint_matches_jacobian() {
        let v = axis_view(32, 24);
        let (s, z) = (0.05, 4.0);
        let fp = project_gaussian(&v, 0, &[0.0, 0.0, z], &(Matrix3::identity() * s * s), None).unwrap();
        let ex = (v.fx * s / z).powi(2);
        let ey = (v.fy * s / z).powi(2);
        assert!((fp.cov[0] - ex).abs() < 1e-12 && (fp.cov[2] - ey).abs() < 1e-12);
        assert!(fp.cov[1].abs() < 1e-15);
    }

    #[test]
    fn behind_camera_culled() {
        let v = axis_view(16, 16);
        let c = Matrix3::identity() * 0.01;
        assert!(project_gaussian(&v, 0, &[0.0, 0.0, -1.0], &c, Some(3.0)).is_none());
        assert!(project_gaussian(&v, 0, &[0.0, 0.0, 0.005], &c, Some(3.0)).is_none());
        assert!(project_gaussian(&v, 0, &[100.0, 0.0, 1.0], &c, Some(3.0)).is_none());
    }

    #[test]
    fn empty_scene_is_black() {
        let v = axis_view(8, 8);
        let f = render_camera_attributes(&CameraAttributes::default(), &v, CameraMode::Both, &BlendSettings::default(), false)
            .unwrap();
        assert!(f.rgb.data.iter().chain(&f.accum_alpha.data).all(|&x| x == 0.0));
    }

    #[test]
    fn opaque_center_pixel_takes_color() {
        // centered on pixel (3, 3) of an 8x8 image
        let v = CameraView::new(Pose::default(), 50.0, 50.0, 3.5, 3.5, 8, 8).unwrap();
        let attrs = single([0.0, 0.0, 2.0], 0.01, 1.0, [0.2, 0.4, 0.6]);
        let f = render_camera_attributes(&attrs, &v, CameraMode::Rgb, &BlendSettings::default(), false).unwrap();
        assert_eq!(f.rgb.pixel(3 * 8 + 3), &[0.2, 0.4, 0.6]);
        assert_eq!(f.accum_alpha.data[3 * 8 + 3], 1.0);
    }

    #[test]
    fn backward_requires_training_frame() {
        let v = axis_view(8, 8);
        let attrs = single([0.0, 0.0, 2.0], 0.1, 0.5, [1.0; 3]);
        let f = render_camera_attributes(&attrs, &v, CameraMode::Both, &BlendSettings::default(), false).unwrap();
        let e = render_camera_backward(&f, &v, &attrs, None, None, None).unwrap_err();
        assert_eq!(e.to_string(), "frame not rendered in training mode");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let v = axis_view(8, 8);
        let attrs = single([0.0, 0.0, 2.0], 0.1, 0.5, [1.0; 3]);
        let f = render_camera_attributes(&attrs, &v, CameraMode::Both, &BlendSettings::default(), true).unwrap();
        let g = render_camera_backward(&f, &v, &attrs, None, None, None).unwrap();
        assert_eq!(g, CameraGrads::zeros(1));
    }

    #[test]
    fn color_gradient_is_effective_opacity() {
        let v = CameraView::new(Pose::default(), 50.0, 50.0, 3.5, 3.5, 8, 8).unwrap();
        let attrs = single([0.0, 0.0, 2.0], 0.02, 0.7, [0.5; 3]);
        let f = render_camera_attributes(&attrs, &v, CameraMode::Rgb, &BlendSettings::default(), true).unwrap();
        let mut d = Image::zeros(8, 8, 3);
        d.data[(3 * 8 + 3) * 3] = 1.0;
        let g = render_camera_backward(&f, &v, &attrs, Some(&d), None, None).unwrap();
        assert!((g.colors[0][0] - f.accum_alpha.data[3 * 8 + 3]).abs() < 1e-15);
        assert_eq!(g.colors[0][1], 0.0);
    }

    /// Finite-difference check of position and covariance gradients through
    /// the projection, with a random upstream image.
    #[test]
    fn projection_gradients_match_fd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pose = Pose::look_at([0.3, -0.2, -3.0], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0]);
        let v = CameraView::new(pose, 9.0, 10.0, 4.1, 3.9, 8, 8).unwrap();
        let n = 3;
        let mut attrs = CameraAttributes::default();
        for _ in 0..n {
            attrs.positions.push([rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]);
            let a = Matrix3::from_fn(|_, _| rng.random_range(-0.3..0.3));
            attrs.covariances.push(a * a.transpose() + Matrix3::identity() * 0.05);
            attrs.alphas.push(rng.random_range(0.2..0.8));
            attrs.colors.push([rng.random(), rng.random(), rng.random()]);
            attrs.semantics.push([rng.random(), rng.random(), rng.random()]);
        }
        // off-screen to the right and close, so its Jacobian slope is clamped
        let side = pose.center() + pose.rotation() * Vector3::new(0.8, 0.1, 1.0);
        assert!(!jacobian_slopes(&v, &Vector3::new(0.8, 0.1, 1.0)).1[0]);
        attrs.positions.push(side.into());
        attrs.covariances.push(Matrix3::identity() * 0.25);
        attrs.alphas.push(0.6);
        attrs.colors.push([0.3, 0.6, 0.9]);
        attrs.semantics.push([0.0; 3]);
        let n = n + 1;
        let up: Vec<f64> = (0..64 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up_a: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let settings = BlendSettings::smooth();
        let loss = |a: &CameraAttributes| {
            let f = render_camera_attributes(a, &v, CameraMode::Rgb, &settings, false).unwrap();
            f.rgb.data.iter().zip(&up).map(|(x, y)| x * y).sum::<f64>()
                + f.accum_alpha.data.iter().zip(&up_a).map(|(x, y)| x * y).sum::<f64>()
        };
        let f = render_camera_attributes(&attrs, &v, CameraMode::Rgb, &settings, true).unwrap();
        let d_rgb = Image::from_vec(8, 8, 3, up.clone()).unwrap();
        let d_acc = Image::from_vec(8, 8, 1, up_a.clone()).unwrap();
        let g = render_camera_backward(&f, &v, &attrs, Some(&d_rgb), None, Some(&d_acc)).unwrap();
        assert!(g.positions[3].iter().any(|d| d.abs() > 1e-3), "{:?}", g.positions[3]);
        let h = 1e-6;
        for i in 0..n {
            for c in 0..3 {
                let mut a = attrs.clone();
                let mut b = attrs.clone();
                a.positions[i][c] += h;
                b.positions[i][c] -= h;
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                assert!((fd - g.positions[i][c]).abs() < 1e-6 * (1.0 + fd.abs()), "pos {i}{c}: {fd} vs {}", g.positions[i][c]);
            }
            for r in 0..3 {
                for c in r..3 {
                    let mut a = attrs.clone();
                    let mut b = attrs.clone();
                    a.covariances[i][(r, c)] += h;
                    b.covariances[i][(r, c)] -= h;
                    if r != c {
                        a.covariances[i][(c, r)] += h;
                        b.covariances[i][(c, r)] -= h;
                    }
                    let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                    let an = if r == c { g.covariances[i][(r, c)] } else { 2.0 * g.covariances[i][(r, c)] };
                    assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "cov {i}{r}{c}: {fd} vs {an}");
                }
            }
            let mut a = attrs.clone();
            let mut b = attrs.clone();
            a.alphas[i] += h;
            b.alphas[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - g.alphas[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}
