//! Scene state: Gaussian positions, unified embeddings and the shared
//! environment descriptor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 32;
pub const ENV_DIM: usize = 4;
/// Default standard deviation of freshly sampled embeddings.
pub const DEFAULT_EMBED_STD: f64 = 0.1;

pub type Embedding = [f64; EMBED_DIM];

/// Positions and embeddings of `N` Gaussians plus the scene-wide environment
/// descriptor. Rows of `positions` and `embeddings` always correspond.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    positions: Vec<[f64; 3]>,
    embeddings: Vec<Embedding>,
    pub env: [f64; ENV_DIM],
}

impl GaussianScene {
    pub fn new(positions: Vec<[f64; 3]>, embeddings: Vec<Embedding>, env: [f64; ENV_DIM]) -> Result<Self> {
        if positions.len() != embeddings.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} positions but {} embeddings",
                positions.len(),
                embeddings.len()
            )));
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinitePoint(i));
        }
        Ok(Self {
            positions,
            embeddings,
            env,
        })
    }

    pub fn empty() -> Self {
        Self {
            positions: Vec::new(),
            embeddings: Vec::new(),
            env: [0.0; ENV_DIM],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn positions_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.positions
    }

    pub fn embeddings_mut(&mut self) -> &mut [Embedding] {
        &mut self.embeddings
    }

    pub fn push(&mut self, position: [f64; 3], embedding: Embedding) {
        self.positions.push(position);
        self.embeddings.push(embedding);
    }

    /// Keeps the Gaussians whose flag is set.
    pub fn retain(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let mut k = keep.iter();
        self.positions.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.embeddings.retain(|_| *k.next().unwrap());
    }

    /// Rounds every stored value to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        let q = |v: &mut f64| *v = *v as f32 as f64;
        self.positions.iter_mut().flatten().for_each(q);
        self.embeddings.iter_mut().flatten().for_each(q);
        self.env.iter_mut().for_each(q);
    }
}

/// Builds a scene with one Gaussian per input point and i.i.d. normal embeddings.
pub fn init_scene_from_points(points: &[[f64; 3]], seed: u64, embed_std: f64) -> Result<GaussianScene> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(Error::NonFinitePoint(i));
    }
    if !(embed_std >= 0.0) || !embed_std.is_finite() {
        return Err(Error::Config(format!("embedding std must be non-negative, got {embed_std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embeddings = if embed_std == 0.0 {
        vec![[0.0; EMBED_DIM]; points.len()]
    } else {
        let normal = Normal::new(0.0, embed_std).expect("valid std");
        points
            .iter()
            .map(|_| std::array::from_fn(|_| normal.sample(&mut rng)))
            .collect()
    };
    GaussianScene::new(points.to_vec(), embeddings, [0.0; ENV_DIM])
}

/// Per-Gaussian parameter counts of the embedding layout versus a layout that
/// stores every modality attribute explicitly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterBudget {
    pub per_gaussian_ours: usize,
    pub per_gaussian_explicit: usize,
    pub sh_order_h: usize,
    pub semantic_dim_d: usize,
    pub reduction_fraction: f64,
}

/// Explicit layout: position 3, covariance 6, color 3, opacity 1, color SH 3h,
/// LiDAR opacity 1, intensity 1, intensity SH h, raydrop 1, semantic d.
pub fn explicit_parameter_count(h: usize, d: usize) -> usize {
    3 + 6 + 3 + 1 + 3 * h + 1 + 1 + h + 1 + d
}

pub fn parameter_budget(h: usize, d: usize) -> ParameterBudget {
    let ours = 3 + EMBED_DIM;
    let explicit = explicit_parameter_count(h, d);
    ParameterBudget {
        per_gaussian_ours: ours,
        per_gaussian_explicit: explicit,
        sh_order_h: h,
        semantic_dim_d: d,
        reduction_fraction: 1.0 - ours as f64 / explicit as f64,
    }
}
