//! Attribute decoders. Every render-time attribute of a Gaussian is recovered
//! from its embedding (plus position, view direction, distance and the
//! environment descriptor where the attribute depends on them).
//!
//! Input layouts are fixed; checkpoints depend on them:
//!
//! | net        | input                                  | output            | head           |
//! |------------|----------------------------------------|-------------------|----------------|
//! | covariance | embedding                              | 3 log-scales + 4q | scale/rotation |
//! | alpha/beta | embedding, position                    | 1                 | sigmoid        |
//! | color      | embedding, PE(dir), distance           | 3                 | sigmoid        |
//! | intensity  | embedding, PE(dir), distance, env      | 1                 | sigmoid        |
//! | raydrop    | embedding, PE(dir), distance, env      | 1                 | sigmoid        |
//! | semantic   | embedding                              | 3                 | identity       |

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{covariance_from_scale_rotation, Quat};
use crate::nn::{adam_step, positional_encode, AdamConfig, GradTape, Head, Mlp, Moments, DEFAULT_PE_RANK};
use crate::scene::{Embedding, EMBED_DIM, ENV_DIM};

/// Which semantic hierarchy level a run supervises.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticLevel {
    Small,
    Medium,
    #[default]
    Large,
}

impl SemanticLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            SemanticLevel::Small => "small",
            SemanticLevel::Medium => "medium",
            SemanticLevel::Large => "large",
        }
    }
}

/// Identifies one decoder network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NetId {
    Covariance,
    Alpha,
    Beta,
    Color,
    Intensity,
    Raydrop,
    Semantic,
}

impl NetId {
    pub const ALL: [NetId; 7] = [
        NetId::Covariance,
        NetId::Alpha,
        NetId::Beta,
        NetId::Color,
        NetId::Intensity,
        NetId::Raydrop,
        NetId::Semantic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetId::Covariance => "covariance",
            NetId::Alpha => "alpha",
            NetId::Beta => "beta",
            NetId::Color => "color",
            NetId::Intensity => "intensity",
            NetId::Raydrop => "raydrop",
            NetId::Semantic => "semantic",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Biases applied to freshly initialized networks so that early outputs sit
/// at sensible values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderInit {
    pub pe_rank: usize,
    /// Initial decoded Gaussian scale in meters.
    pub initial_scale: f64,
    /// Initial decoded alpha and beta.
    pub initial_opacity: f64,
}

impl Default for DecoderInit {
    fn default() -> Self {
        Self {
            pe_rank: DEFAULT_PE_RANK,
            initial_scale: 0.1,
            initial_opacity: 0.1,
        }
    }
}

/// The seven attribute decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBank {
    pub cov_net: Mlp,
    pub alpha_net: Mlp,
    pub beta_net: Mlp,
    pub color_net: Mlp,
    pub intensity_net: Mlp,
    pub raydrop_net: Mlp,
    pub semantic_net: Mlp,
    pub pe_rank: usize,
}

pub fn opacity_input_dim() -> usize {
    EMBED_DIM + 3
}

pub fn color_input_dim(pe_rank: usize) -> usize {
    EMBED_DIM + 6 * pe_rank + 1
}

pub fn lidar_input_dim(pe_rank: usize) -> usize {
    EMBED_DIM + 6 * pe_rank + 1 + ENV_DIM
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl DecoderBank {
    /// Randomly initialized bank with default biases.
    pub fn new<R: Rng + ?Sized>(pe_rank: usize, rng: &mut R) -> Self {
        Self::with_init(
            &DecoderInit {
                pe_rank,
                ..DecoderInit::default()
            },
            rng,
        )
    }

    pub fn seeded(init: &DecoderInit, seed: u64) -> Self {
        Self::with_init(init, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_init<R: Rng + ?Sized>(init: &DecoderInit, rng: &mut R) -> Self {
        let l = init.pe_rank;
        let mut bank = Self {
            cov_net: Mlp::standard(EMBED_DIM, 7, Head::ScaleRotation, rng),
            alpha_net: Mlp::standard(opacity_input_dim(), 1, Head::Sigmoid, rng),
            beta_net: Mlp::standard(opacity_input_dim(), 1, Head::Sigmoid, rng),
            color_net: Mlp::standard(color_input_dim(l), 3, Head::Sigmoid, rng),
            intensity_net: Mlp::standard(lidar_input_dim(l), 1, Head::Sigmoid, rng),
            raydrop_net: Mlp::standard(lidar_input_dim(l), 1, Head::Sigmoid, rng),
            semantic_net: Mlp::standard(EMBED_DIM, 3, Head::Identity, rng),
            pe_rank: l,
        };
        let log_s = init.initial_scale.ln();
        let b = bank.cov_net.output_bias_mut();
        b[..3].fill(log_s);
        b[3..].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        let o = logit(init.initial_opacity.clamp(1e-4, 1.0 - 1e-4));
        bank.alpha_net.output_bias_mut()[0] = o;
        bank.beta_net.output_bias_mut()[0] = o;
        bank
    }

    /// All-zero weights: sigmoid heads give 0.5, scales 1, identity rotation.
    pub fn zeros(pe_rank: usize) -> Self {
        let h = crate::nn::DEFAULT_HIDDEN;
        Self {
            cov_net: Mlp::zeros(vec![EMBED_DIM, h, 7], Head::ScaleRotation),
            alpha_net: Mlp::zeros(vec![opacity_input_dim(), h, 1], Head::Sigmoid),
            beta_net: Mlp::zeros(vec![opacity_input_dim(), h, 1], Head::Sigmoid),
            color_net: Mlp::zeros(vec![color_input_dim(pe_rank), h, 3], Head::Sigmoid),
            intensity_net: Mlp::zeros(vec![lidar_input_dim(pe_rank), h, 1], Head::Sigmoid),
            raydrop_net: Mlp::zeros(vec![lidar_input_dim(pe_rank), h, 1], Head::Sigmoid),
            semantic_net: Mlp::zeros(vec![EMBED_DIM, h, 3], Head::Identity),
            pe_rank,
        }
    }

    pub fn net(&self, id: NetId) -> &Mlp {
        match id {
            NetId::Covariance => &self.cov_net,
            NetId::Alpha => &self.alpha_net,
            NetId::Beta => &self.beta_net,
            NetId::Color => &self.color_net,
            NetId::Intensity => &self.intensity_net,
            NetId::Raydrop => &self.raydrop_net,
            NetId::Semantic => &self.semantic_net,
        }
    }

    pub fn net_mut(&mut self, id: NetId) -> &mut Mlp {
        match id {
            NetId::Covariance => &mut self.cov_net,
            NetId::Alpha => &mut self.alpha_net,
            NetId::Beta => &mut self.beta_net,
            NetId::Color => &mut self.color_net,
            NetId::Intensity => &mut self.intensity_net,
            NetId::Raydrop => &mut self.raydrop_net,
            NetId::Semantic => &mut self.semantic_net,
        }
    }

    pub fn param_count(&self) -> usize {
        NetId::ALL.iter().map(|&id| self.net(id).param_count()).sum()
    }

    /// Checks the input/output shapes every decoder must have.
    pub fn validate(&self) -> Result<()> {
        let l = self.pe_rank;
        let expect = [
            (NetId::Covariance, EMBED_DIM, 7),
            (NetId::Alpha, opacity_input_dim(), 1),
            (NetId::Beta, opacity_input_dim(), 1),
            (NetId::Color, color_input_dim(l), 3),
            (NetId::Intensity, lidar_input_dim(l), 1),
            (NetId::Raydrop, lidar_input_dim(l), 1),
            (NetId::Semantic, EMBED_DIM, 3),
        ];
        for (id, i, o) in expect {
            let net = self.net(id);
            if net.in_dim() != i || net.out_dim() != o {
                return Err(Error::ShapeMismatch(format!(
                    "{} net is {}->{}, expected {}->{}",
                    id.name(),
                    net.in_dim(),
                    net.out_dim(),
                    i,
                    o
                )));
            }
        }
        Ok(())
    }

    pub fn quantize_f32(&mut self) {
        for id in NetId::ALL {
            for p in self.net_mut(id).params_mut() {
                *p = *p as f32 as f64;
            }
        }
    }
}

/// `[embedding, position]`.
pub fn opacity_input(embedding: &Embedding, position: &[f64; 3]) -> Vec<f64> {
    let mut v = Vec::with_capacity(opacity_input_dim());
    v.extend_from_slice(embedding);
    v.extend_from_slice(position);
    v
}

/// `[embedding, pe, distance]`.
pub fn color_input(embedding: &Embedding, pe: &[f64], distance: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(EMBED_DIM + pe.len() + 1);
    v.extend_from_slice(embedding);
    v.extend_from_slice(pe);
    v.push(distance);
    v
}

/// `[embedding, pe, distance, env]`.
pub fn lidar_input(embedding: &Embedding, pe: &[f64], distance: f64, env: &[f64; ENV_DIM]) -> Vec<f64> {
    let mut v = color_input(embedding, pe, distance);
    v.extend_from_slice(env);
    v
}

/// Unit direction and distance from `origin` to `position`.
pub fn view_geometry(position: &[f64; 3], origin: &[f64; 3]) -> ([f64; 3], f64) {
    let d = Vector3::from(*position) - Vector3::from(*origin);
    let dist = d.norm();
    if dist == 0.0 {
        return ([0.0, 0.0, 1.0], 0.0);
    }
    let v = d / dist;
    ([v.x, v.y, v.z], dist)
}

/// Gradient on `position` from gradients on the direction and distance of
/// [`view_geometry`].
pub fn view_geometry_backward(dir: &[f64; 3], dist: f64, d_dir: &[f64; 3], d_dist: f64) -> [f64; 3] {
    if dist == 0.0 {
        return [0.0; 3];
    }
    let v = Vector3::from(*dir);
    let g = Vector3::from(*d_dir);
    let out = (g - v * v.dot(&g)) / dist + v * d_dist;
    [out.x, out.y, out.z]
}

/// Decoded covariance together with its factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovarianceDecode {
    pub covariance: Matrix3<f64>,
    pub scale: [f64; 3],
    pub rotation: Quat,
}

impl CovarianceDecode {
    /// Interprets the (already activated) output of the covariance network.
    pub fn from_output(out: &[f64]) -> Self {
        let scale = [out[0], out[1], out[2]];
        let rotation = [out[3], out[4], out[5], out[6]];
        Self {
            covariance: covariance_from_scale_rotation(&scale, &rotation),
            scale,
            rotation,
        }
    }
}

fn check_env(env: &[f64]) -> Result<&[f64; ENV_DIM]> {
    env.try_into().map_err(|_| Error::DimensionMismatch {
        context: "environment descriptor",
        expected: ENV_DIM,
        got: env.len(),
    })
}

pub fn decode_covariance(bank: &DecoderBank, embedding: &Embedding) -> CovarianceDecode {
    let out = bank.cov_net.forward(embedding).expect("covariance net input is the embedding");
    CovarianceDecode::from_output(&out)
}

/// `(alpha, beta)`: camera and LiDAR opacity.
pub fn decode_opacities(bank: &DecoderBank, embedding: &Embedding, position: &[f64; 3]) -> (f64, f64) {
    let x = opacity_input(embedding, position);
    let a = bank.alpha_net.forward(&x).expect("opacity input layout")[0];
    let b = bank.beta_net.forward(&x).expect("opacity input layout")[0];
    (a, b)
}

pub fn decode_color(bank: &DecoderBank, embedding: &Embedding, view_dir: &[f64; 3], distance: f64) -> Result<[f64; 3]> {
    let pe = positional_encode(view_dir, bank.pe_rank)?;
    let c = bank.color_net.forward(&color_input(embedding, &pe, distance))?;
    Ok([c[0], c[1], c[2]])
}

/// `(intensity, raydrop)`.
pub fn decode_lidar(
    bank: &DecoderBank,
    embedding: &Embedding,
    view_dir: &[f64; 3],
    distance: f64,
    env: &[f64],
) -> Result<(f64, f64)> {
    let env = check_env(env)?;
    let pe = positional_encode(view_dir, bank.pe_rank)?;
    let x = lidar_input(embedding, &pe, distance, env);
    Ok((bank.intensity_net.forward(&x)?[0], bank.raydrop_net.forward(&x)?[0]))
}

/// View-invariant semantic feature: the view direction is not an input.
pub fn decode_semantic(bank: &DecoderBank, embedding: &Embedding) -> [f64; 3] {
    let s = bank.semantic_net.forward(embedding).expect("semantic net input is the embedding");
    [s[0], s[1], s[2]]
}

/// Every attribute of one Gaussian as seen from `origin`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedGaussian {
    pub covariance: Matrix3<f64>,
    pub scale: [f64; 3],
    pub rotation: Quat,
    pub alpha: f64,
    pub beta: f64,
    pub color: [f64; 3],
    pub intensity: f64,
    pub raydrop: f64,
    pub semantic: [f64; 3],
}

pub fn decode_gaussian(
    bank: &DecoderBank,
    embedding: &Embedding,
    position: &[f64; 3],
    origin: &[f64; 3],
    env: &[f64; ENV_DIM],
) -> Result<DecodedGaussian> {
    let cov = decode_covariance(bank, embedding);
    let (alpha, beta) = decode_opacities(bank, embedding, position);
    let (dir, dist) = view_geometry(position, origin);
    let color = decode_color(bank, embedding, &dir, dist)?;
    let (intensity, raydrop) = decode_lidar(bank, embedding, &dir, dist, env)?;
    Ok(DecodedGaussian {
        covariance: cov.covariance,
        scale: cov.scale,
        rotation: cov.rotation,
        alpha,
        beta,
        color,
        intensity,
        raydrop,
        semantic: decode_semantic(bank, embedding),
    })
}

/// Compresses high-dimensional per-pixel features to the 3 channels the
/// semantic decoder predicts.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureAutoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub source_dim: usize,
    /// Mean squared reconstruction error after training.
    pub final_error: f64,
}

pub const SEMANTIC_DIM: usize = 3;

impl FeatureAutoencoder {
    pub fn encode(&self, feature: &[f64]) -> Result<[f64; SEMANTIC_DIM]> {
        let z = self.encoder.forward(feature)?;
        Ok([z[0], z[1], z[2]])
    }

    pub fn decode(&self, code: &[f64; SEMANTIC_DIM]) -> Result<Vec<f64>> {
        self.decoder.forward(code)
    }

    pub fn reconstruction_error(&self, features: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for f in features {
            let r = self.decode(&self.encode(f)?)?;
            total += r.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total / (features.len() * self.source_dim) as f64)
    }
}

/// Full-batch Adam training of a `D -> 3 -> D` autoencoder on mean squared error.
pub fn train_autoencoder(features: &[Vec<f64>], epochs: usize, lr: f64, seed: u64) -> Result<FeatureAutoencoder> {
    const MIN_SAMPLES: usize = 16;
    let d = features.first().map(Vec::len).unwrap_or(0);
    if d <= SEMANTIC_DIM {
        return Err(Error::CompressionTarget(d));
    }
    if features.len() < MIN_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_SAMPLES,
            got: features.len(),
        });
    }
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(Error::DimensionMismatch {
            context: "autoencoder feature",
            expected: d,
            got: bad.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut encoder = Mlp::standard(d, SEMANTIC_DIM, Head::Identity, &mut rng);
    let mut decoder = Mlp::standard(SEMANTIC_DIM, d, Head::Identity, &mut rng);
    let mut enc_m = Moments::zeros(encoder.param_count());
    let mut dec_m = Moments::zeros(decoder.param_count());
    let adam = AdamConfig::default();
    let scale = 2.0 / (features.len() * d) as f64;
    for _ in 0..epochs {
        let mut enc_tape = GradTape::new();
        let mut dec_tape = GradTape::new();
        for f in features {
            let (z, ei) = encoder.forward_taped(f, &mut enc_tape)?;
            let (r, di) = decoder.forward_taped(&z, &mut dec_tape)?;
            let dr: Vec<f64> = r.iter().zip(f).map(|(a, b)| scale * (a - b)).collect();
            let dz = decoder.backward(&mut dec_tape, di, &dr)?;
            encoder.backward(&mut enc_tape, ei, &dz)?;
        }
        let eg = enc_tape.into_param_grad();
        let dg = dec_tape.into_param_grad();
        adam_step(&mut enc_m, encoder.params_mut(), &eg, lr, &adam, "autoencoder.encoder")?;
        adam_step(&mut dec_m, decoder.params_mut(), &dg, lr, &adam, "autoencoder.decoder")?;
    }
    let mut ae = FeatureAutoencoder {
        encoder,
        decoder,
        source_dim: d,
        final_error: 0.0,
    };
    ae.final_error = ae.reconstruction_error(features)?;
    Ok(ae)
}
