//! Scene-level rendering and the full differentiable path from scene and
//! decoder parameters to the total loss.

use nalgebra::Matrix3;

use crate::camera::{
    render_camera_attributes, render_camera_backward, CameraAttributes, CameraMode, CameraView, RenderedFrame,
};
use crate::decoders::{
    color_input, lidar_input, opacity_input, view_geometry, view_geometry_backward, CovarianceDecode, DecoderBank,
    NetId,
};
use crate::error::{Error, Result};
use crate::grid::{Image, Mask};
use crate::lidar::{
    render_lidar_attributes, render_lidar_backward, LidarAttributes, LidarFrame, LidarSpec, LidarUpstream,
    RangeImageSet,
};
use crate::losses::{
    lidar_losses, rgb_loss, semantic_loss, sky_loss, total_loss, LidarPrediction, LidarTarget, LossReport, LossTerms,
    LossWeights, PixelCounts,
};
use crate::math::{covariance_backward, Pose};
use crate::nn::{positional_encode, positional_encode_backward, GradTape};
use crate::raster::BlendSettings;
use crate::scene::{Embedding, GaussianScene, EMBED_DIM, ENV_DIM};

/// One tape per decoder.
struct Tapes([GradTape; 7]);

impl Tapes {
    fn new() -> Self {
        Self(std::array::from_fn(|_| GradTape::new()))
    }

    fn get(&mut self, id: NetId) -> &mut GradTape {
        &mut self.0[id.index()]
    }
}

fn run(bank: &DecoderBank, id: NetId, input: &[f64], tapes: &mut Option<&mut Tapes>) -> Result<(Vec<f64>, usize)> {
    match tapes {
        Some(t) => bank.net(id).forward_taped(input, t.get(id)),
        None => Ok((bank.net(id).forward(input)?, usize::MAX)),
    }
}

/// Tape record indices of one Gaussian's decodes.
#[derive(Clone, Copy, Debug)]
struct Records {
    cov: usize,
    opacity: usize,
    view: usize,
    semantic: usize,
}

struct CameraDecode {
    attrs: CameraAttributes,
    covs: Vec<CovarianceDecode>,
    geometry: Vec<([f64; 3], f64)>,
    records: Vec<Records>,
}

fn decode_camera(
    scene: &GaussianScene,
    bank: &DecoderBank,
    center: &[f64; 3],
    semantic: bool,
    mut tapes: Option<&mut Tapes>,
) -> Result<CameraDecode> {
    let n = scene.len();
    let mut out = CameraDecode {
        attrs: CameraAttributes::default(),
        covs: Vec::with_capacity(n),
        geometry: Vec::with_capacity(n),
        records: Vec::with_capacity(n),
    };
    for (pos, emb) in scene.positions().iter().zip(scene.embeddings()) {
        let (cov_out, cov) = run(bank, NetId::Covariance, emb, &mut tapes)?;
        let c = CovarianceDecode::from_output(&cov_out);
        let (alpha, opacity) = run(bank, NetId::Alpha, &opacity_input(emb, pos), &mut tapes)?;
        let (dir, dist) = view_geometry(pos, center);
        let pe = positional_encode(&dir, bank.pe_rank)?;
        let (color, view) = run(bank, NetId::Color, &color_input(emb, &pe, dist), &mut tapes)?;
        let (sem, sem_rec) = if semantic {
            run(bank, NetId::Semantic, emb, &mut tapes)?
        } else {
            (vec![0.0; 3], usize::MAX)
        };
        out.attrs.positions.push(*pos);
        out.attrs.covariances.push(c.covariance);
        out.attrs.alphas.push(alpha[0]);
        out.attrs.colors.push([color[0], color[1], color[2]]);
        out.attrs.semantics.push([sem[0], sem[1], sem[2]]);
        out.covs.push(c);
        out.geometry.push((dir, dist));
        out.records.push(Records {
            cov,
            opacity,
            view,
            semantic: sem_rec,
        });
    }
    Ok(out)
}

struct LidarDecode {
    attrs: LidarAttributes,
    covs: Vec<CovarianceDecode>,
    geometry: Vec<([f64; 3], f64)>,
    /// `view` indexes both the intensity and the raydrop tape.
    records: Vec<Records>,
}

fn check_env(env: &[f64]) -> Result<()> {
    if env.len() != ENV_DIM {
        return Err(Error::DimensionMismatch {
            context: "environment descriptor",
            expected: ENV_DIM,
            got: env.len(),
        });
    }
    Ok(())
}

fn decode_lidar(
    scene: &GaussianScene,
    bank: &DecoderBank,
    center: &[f64; 3],
    mut tapes: Option<&mut Tapes>,
) -> Result<LidarDecode> {
    check_env(&scene.env)?;
    let n = scene.len();
    let mut out = LidarDecode {
        attrs: LidarAttributes::default(),
        covs: Vec::with_capacity(n),
        geometry: Vec::with_capacity(n),
        records: Vec::with_capacity(n),
    };
    for (pos, emb) in scene.positions().iter().zip(scene.embeddings()) {
        let (cov_out, cov) = run(bank, NetId::Covariance, emb, &mut tapes)?;
        let c = CovarianceDecode::from_output(&cov_out);
        let (beta, opacity) = run(bank, NetId::Beta, &opacity_input(emb, pos), &mut tapes)?;
        let (dir, dist) = view_geometry(pos, center);
        let pe = positional_encode(&dir, bank.pe_rank)?;
        let x = lidar_input(emb, &pe, dist, &scene.env);
        let (int, view) = run(bank, NetId::Intensity, &x, &mut tapes)?;
        let (drop, view2) = run(bank, NetId::Raydrop, &x, &mut tapes)?;
        debug_assert_eq!(view, view2);
        out.attrs.positions.push(*pos);
        out.attrs.covariances.push(c.covariance);
        out.attrs.betas.push(beta[0]);
        out.attrs.intensities.push(int[0]);
        out.attrs.raydrops.push(drop[0]);
        out.covs.push(c);
        out.geometry.push((dir, dist));
        out.records.push(Records {
            cov,
            opacity,
            view,
            semantic: usize::MAX,
        });
    }
    Ok(out)
}

/// Renders a camera view of the scene.
pub fn render_camera(
    scene: &GaussianScene,
    bank: &DecoderBank,
    view: &CameraView,
    mode: CameraMode,
    settings: &BlendSettings,
) -> Result<RenderedFrame> {
    bank.validate()?;
    let d = decode_camera(scene, bank, &view.center(), mode != CameraMode::Rgb, None)?;
    render_camera_attributes(&d.attrs, view, mode, settings, false)
}

/// Renders the range view of a sensor at `pose`.
pub fn render_lidar(
    scene: &GaussianScene,
    bank: &DecoderBank,
    pose: &Pose,
    spec: &LidarSpec,
    settings: &BlendSettings,
) -> Result<LidarFrame> {
    bank.validate()?;
    let d = decode_lidar(scene, bank, &pose.position, None)?;
    render_lidar_attributes(&d.attrs, pose, spec, settings, false)
}

/// Decoded camera attributes (covariance, α, view-dependent color, semantic).
pub fn camera_attributes(scene: &GaussianScene, bank: &DecoderBank, center: &[f64; 3]) -> Result<CameraAttributes> {
    Ok(decode_camera(scene, bank, center, true, None)?.attrs)
}

/// Decoded LiDAR attributes (covariance, β, intensity, raydrop).
pub fn lidar_attributes(scene: &GaussianScene, bank: &DecoderBank, center: &[f64; 3]) -> Result<LidarAttributes> {
    Ok(decode_lidar(scene, bank, center, None)?.attrs)
}

/// Camera supervision for one view. `sky` is true on sky pixels.
#[derive(Clone, Copy, Debug)]
pub struct CameraSample<'a> {
    pub view: &'a CameraView,
    pub rgb: &'a Image,
    pub sky: &'a Mask,
    pub semantic: Option<&'a Image>,
}

#[derive(Clone, Copy, Debug)]
pub struct LidarSample<'a> {
    pub pose: &'a Pose,
    pub spec: &'a LidarSpec,
    pub target: &'a RangeImageSet,
}

/// What one training step sees.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sample<'a> {
    pub camera: Option<CameraSample<'a>>,
    pub lidar: Option<LidarSample<'a>>,
}

/// Gradients of the total loss with respect to every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub positions: Vec<[f64; 3]>,
    pub embeddings: Vec<Embedding>,
    pub env: [f64; ENV_DIM],
    /// Indexed by [`NetId::index`], laid out like [`crate::nn::Mlp::params`].
    pub nets: [Vec<f64>; 7],
}

impl ModelGrads {
    pub fn zeros(scene: &GaussianScene, bank: &DecoderBank) -> Self {
        Self {
            positions: vec![[0.0; 3]; scene.len()],
            embeddings: vec![[0.0; EMBED_DIM]; scene.len()],
            env: [0.0; ENV_DIM],
            nets: std::array::from_fn(|i| vec![0.0; bank.net(NetId::ALL[i]).param_count()]),
        }
    }

    pub fn get(&self, p: ParamRef) -> f64 {
        match p {
            ParamRef::Position(i, c) => self.positions[i][c],
            ParamRef::Embedding(i, k) => self.embeddings[i][k],
            ParamRef::Env(k) => self.env[k],
            ParamRef::Net(id, j) => self.nets[id.index()][j],
        }
    }

    fn add_input(&mut self, i: usize, d_input: &[f64], with_position: bool) {
        for k in 0..EMBED_DIM {
            self.embeddings[i][k] += d_input[k];
        }
        if with_position {
            for c in 0..3 {
                self.positions[i][c] += d_input[EMBED_DIM + c];
            }
        }
    }

    fn add_position(&mut self, i: usize, d: &[f64; 3]) {
        for c in 0..3 {
            self.positions[i][c] += d[c];
        }
    }
}

/// Address of one scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRef {
    Position(usize, usize),
    Embedding(usize, usize),
    Env(usize),
    Net(NetId, usize),
}

impl ParamRef {
    pub fn group(&self) -> &'static str {
        match self {
            ParamRef::Position(..) => "position",
            ParamRef::Embedding(..) => "embedding",
            ParamRef::Env(_) => "env",
            ParamRef::Net(..) => "decoder",
        }
    }
}

/// Every trainable scalar, in a fixed order.
pub fn all_params(scene: &GaussianScene, bank: &DecoderBank) -> Vec<ParamRef> {
    let mut out = Vec::new();
    for i in 0..scene.len() {
        out.extend((0..3).map(|c| ParamRef::Position(i, c)));
        out.extend((0..EMBED_DIM).map(|k| ParamRef::Embedding(i, k)));
    }
    out.extend((0..ENV_DIM).map(ParamRef::Env));
    for id in NetId::ALL {
        out.extend((0..bank.net(id).param_count()).map(|j| ParamRef::Net(id, j)));
    }
    out
}

pub fn get_param(scene: &GaussianScene, bank: &DecoderBank, p: ParamRef) -> f64 {
    match p {
        ParamRef::Position(i, c) => scene.positions()[i][c],
        ParamRef::Embedding(i, k) => scene.embeddings()[i][k],
        ParamRef::Env(k) => scene.env[k],
        ParamRef::Net(id, j) => bank.net(id).params()[j],
    }
}

pub fn set_param(scene: &mut GaussianScene, bank: &mut DecoderBank, p: ParamRef, value: f64) {
    match p {
        ParamRef::Position(i, c) => scene.positions_mut()[i][c] = value,
        ParamRef::Embedding(i, k) => scene.embeddings_mut()[i][k] = value,
        ParamRef::Env(k) => scene.env[k] = value,
        ParamRef::Net(id, j) => bank.net_mut(id).params_mut()[j] = value,
    }
}

/// Result of one forward (and optionally backward) evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: LossReport,
    pub grads: Option<ModelGrads>,
    pub camera: Option<RenderedFrame>,
    pub lidar: Option<LidarFrame>,
}

fn backprop_covariance(
    grads: &mut ModelGrads,
    bank: &DecoderBank,
    tapes: &mut Tapes,
    i: usize,
    rec: usize,
    c: &CovarianceDecode,
    d_cov: &Matrix3<f64>,
) -> Result<()> {
    if d_cov.iter().all(|&v| v == 0.0) {
        return Ok(());
    }
    let (d_scale, d_rot) = covariance_backward(&c.scale, &c.rotation, d_cov);
    let mut out_grad = [0.0; 7];
    out_grad[..3].copy_from_slice(&d_scale);
    out_grad[3..].copy_from_slice(&d_rot);
    let d_in = bank.cov_net.backward(tapes.get(NetId::Covariance), rec, &out_grad)?;
    grads.add_input(i, &d_in, false);
    Ok(())
}

/// Gradient on the position from the positional-encoding and distance slots of a view-dependent input.
fn backprop_view_inputs(bank: &DecoderBank, d_in: &[f64], geometry: &([f64; 3], f64)) -> [f64; 3] {
    let pe_len = 6 * bank.pe_rank;
    let (dir, dist) = geometry;
    let d_pe = &d_in[EMBED_DIM..EMBED_DIM + pe_len];
    let d_dist = d_in[EMBED_DIM + pe_len];
    let d_dir = positional_encode_backward(dir, bank.pe_rank, d_pe);
    view_geometry_backward(dir, *dist, &d_dir, d_dist)
}

/// Renders every supervised modality of `sample`, scores it, and when
/// `with_grad` is set backpropagates the total loss to all parameters.
pub fn evaluate(
    scene: &GaussianScene,
    bank: &DecoderBank,
    sample: &Sample,
    weights: &LossWeights,
    settings: &BlendSettings,
    with_grad: bool,
) -> Result<Evaluation> {
    bank.validate()?;
    weights.validate()?;
    let mut tapes = Tapes::new();
    let mut terms = LossTerms::default();
    let mut pixels = PixelCounts::default();
    let mut grads = with_grad.then(|| ModelGrads::zeros(scene, bank));
    let mut camera_frame = None;
    let mut lidar_frame = None;

    if let Some(cam) = sample.camera {
        let want_sem = cam.semantic.is_some();
        let mode = if want_sem { CameraMode::Both } else { CameraMode::Rgb };
        let dec = decode_camera(scene, bank, &cam.view.center(), want_sem, with_grad.then_some(&mut tapes))?;
        let frame = render_camera_attributes(&dec.attrs, cam.view, mode, settings, with_grad)?;
        let rgb = rgb_loss(&frame.rgb, cam.rgb, cam.sky, weights)?;
        let sky = sky_loss(&frame.accum_alpha, cam.sky, weights)?;
        let sem = cam.semantic.map(|gt| semantic_loss(&frame.semantic, gt, cam.sky, weights)).transpose()?;
        terms.rgb = rgb.value;
        terms.sky = sky.value;
        pixels.rgb = rgb.pixels;
        pixels.sky = sky.pixels;
        if let Some(s) = &sem {
            terms.semantic = s.value;
            pixels.semantic = s.pixels;
        }
        if let Some(g) = grads.as_mut() {
            let scale = |img: &Image, w: f64| Image {
                data: img.data.iter().map(|v| v * w).collect(),
                ..img.clone()
            };
            let d_rgb = scale(&rgb.grad, weights.lambda_rgb);
            let d_acc = scale(&sky.grad, weights.lambda_sky);
            let d_sem = sem.as_ref().map(|s| scale(&s.grad, weights.lambda_semantic));
            let cg = render_camera_backward(&frame, cam.view, &dec.attrs, Some(&d_rgb), d_sem.as_ref(), Some(&d_acc))?;
            for i in 0..scene.len() {
                let r = dec.records[i];
                g.add_position(i, &cg.positions[i]);
                backprop_covariance(g, bank, &mut tapes, i, r.cov, &dec.covs[i], &cg.covariances[i])?;
                if cg.alphas[i] != 0.0 {
                    let d_in = bank.alpha_net.backward(tapes.get(NetId::Alpha), r.opacity, &[cg.alphas[i]])?;
                    g.add_input(i, &d_in, true);
                }
                if cg.colors[i].iter().any(|&v| v != 0.0) {
                    let d_in = bank.color_net.backward(tapes.get(NetId::Color), r.view, &cg.colors[i])?;
                    g.add_input(i, &d_in, false);
                    g.add_position(i, &backprop_view_inputs(bank, &d_in, &dec.geometry[i]));
                }
                if want_sem && cg.semantics[i].iter().any(|&v| v != 0.0) {
                    let d_in = bank.semantic_net.backward(tapes.get(NetId::Semantic), r.semantic, &cg.semantics[i])?;
                    g.add_input(i, &d_in, false);
                }
            }
        }
        camera_frame = Some(frame);
    }

    if let Some(ls) = sample.lidar {
        let dec = decode_lidar(scene, bank, &ls.pose.position, with_grad.then_some(&mut tapes))?;
        let frame = render_lidar_attributes(&dec.attrs, ls.pose, ls.spec, settings, with_grad)?;
        let drop_target = ls.target.raydrop_target();
        let l = lidar_losses(
            &LidarPrediction {
                depth: &frame.depth,
                intensity: &frame.intensity,
                raydrop: &frame.raydrop,
            },
            &LidarTarget {
                range: &ls.target.range,
                intensity: &ls.target.intensity,
                raydrop: &drop_target,
                ray_mask: &ls.target.ray_mask,
            },
            weights,
        )?;
        terms.depth = l.depth.value;
        terms.intensity = l.intensity.value;
        terms.raydrop = l.raydrop.value;
        pixels.depth = l.depth.pixels;
        pixels.intensity = l.intensity.pixels;
        pixels.raydrop = l.raydrop.pixels;
        if let Some(g) = grads.as_mut() {
            let w = weights.lambda_lidar;
            let scale = |img: &Image| Image {
                data: img.data.iter().map(|v| v * w).collect(),
                ..img.clone()
            };
            let (dd, di, dr) = (scale(&l.depth.grad), scale(&l.intensity.grad), scale(&l.raydrop.grad));
            let up = LidarUpstream {
                depth: Some(&dd),
                intensity: Some(&di),
                raydrop: Some(&dr),
                accum: None,
            };
            let lg = render_lidar_backward(&frame, ls.pose, ls.spec, &dec.attrs, &up)?;
            let pe_len = 6 * bank.pe_rank;
            let env_off = EMBED_DIM + pe_len + 1;
            for i in 0..scene.len() {
                let r = dec.records[i];
                g.add_position(i, &lg.positions[i]);
                backprop_covariance(g, bank, &mut tapes, i, r.cov, &dec.covs[i], &lg.covariances[i])?;
                if lg.betas[i] != 0.0 {
                    let d_in = bank.beta_net.backward(tapes.get(NetId::Beta), r.opacity, &[lg.betas[i]])?;
                    g.add_input(i, &d_in, true);
                }
                for (id, d) in [(NetId::Intensity, lg.intensities[i]), (NetId::Raydrop, lg.raydrops[i])] {
                    if d == 0.0 {
                        continue;
                    }
                    let d_in = bank.net(id).backward(tapes.get(id), r.view, &[d])?;
                    g.add_input(i, &d_in, false);
                    g.add_position(i, &backprop_view_inputs(bank, &d_in, &dec.geometry[i]));
                    for k in 0..ENV_DIM {
                        g.env[k] += d_in[env_off + k];
                    }
                }
            }
        }
        lidar_frame = Some(frame);
    }

    let report = total_loss(&terms, pixels, weights)?;
    if let Some(g) = grads.as_mut() {
        for (k, t) in tapes.0.into_iter().enumerate() {
            if !t.is_empty() {
                g.nets[k] = t.into_param_grad();
            }
        }
    }
    Ok(Evaluation {
        report,
        grads,
        camera: camera_frame,
        lidar: lidar_frame,
    })
}
