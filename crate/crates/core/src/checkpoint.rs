//! Versioned binary checkpoints and storage accounting.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8   b"EMBSPLAT"
//! version      u32 (1)
//! flags        u32 bit 0: optimizer state follows the model
//! iteration    u64
//! config_len   u64, then config_len bytes of UTF-8 JSON (training config snapshot)
//! n            u64 Gaussians
//! pe_rank      u32
//! positions    n·3 f32
//! embeddings   n·32 f32
//! env          4 f32
//! 7 networks in decoder order (covariance, alpha, beta, color, intensity,
//! raydrop, semantic), each:
//!   head u8, layer count u32, dims u32 × count, param count u64, params f32
//! optimizer (if flagged), for positions, embeddings, env and the 7 networks:
//!   step u64, len u64, m f64 × len, v f64 × len
//! ```
//!
//! Model parameters are stored as f32. The trainer keeps parameters at f32
//! precision, so its checkpoints reload bit-exactly.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::decoders::{decode_gaussian, DecoderBank, DecoderInit, NetId};
use crate::error::{Error, Result};
use crate::nn::{Head, Mlp, Moments};
use crate::scene::{init_scene_from_points, parameter_budget, GaussianScene, DEFAULT_EMBED_STD, EMBED_DIM, ENV_DIM};
use crate::trainer::OptimizerState;

pub const MAGIC: [u8; 8] = *b"EMBSPLAT";
pub const VERSION: u32 = 1;
const FLAG_OPTIMIZER: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub scene: GaussianScene,
    pub bank: DecoderBank,
    pub optimizer: Option<OptimizerState>,
    pub iteration: u64,
    /// JSON snapshot of the training config.
    pub config: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.0.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, what: &str, elem: usize) -> Result<usize> {
        let n = self.u64(what)?;
        // reject lengths the remaining bytes cannot possibly hold
        let n = usize::try_from(n).map_err(|_| Error::Truncated(format!("{what}: length {n}")))?;
        if n.checked_mul(elem).is_none_or(|b| b > self.bytes.len() - self.pos) {
            return Err(Error::Truncated(format!("{what}: length {n} exceeds the file")));
        }
        Ok(n)
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::Truncated(what.into()))?, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| Error::Truncated(what.into()))?, what)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn write_moments(w: &mut Writer, m: &Moments) {
    w.u64(m.step);
    w.u64(m.len() as u64);
    w.f64s(&m.m);
    w.f64s(&m.v);
}

fn read_moments(r: &mut Reader, what: &str) -> Result<Moments> {
    let step = r.u64(what)?;
    let n = r.len(what, 16)?;
    Ok(Moments {
        m: r.f64s(n, what)?,
        v: r.f64s(n, what)?,
        step,
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.scene.len();
        let mut w = Writer(Vec::with_capacity(64 + self.config.len() + n * 4 * (3 + EMBED_DIM) + self.bank.param_count() * 4));
        w.0.extend_from_slice(&MAGIC);
        w.u32(VERSION);
        w.u32(if self.optimizer.is_some() { FLAG_OPTIMIZER } else { 0 });
        w.u64(self.iteration);
        w.u64(self.config.len() as u64);
        w.0.extend_from_slice(self.config.as_bytes());
        w.u64(n as u64);
        w.u32(self.bank.pe_rank as u32);
        w.f32s(self.scene.positions().iter().flatten());
        w.f32s(self.scene.embeddings().iter().flatten());
        w.f32s(&self.scene.env);
        for id in NetId::ALL {
            let net = self.bank.net(id);
            w.u8(net.head().code());
            w.u32(net.dims().len() as u32);
            for &d in net.dims() {
                w.u32(d as u32);
            }
            w.u64(net.params().len() as u64);
            w.f32s(net.params());
        }
        if let Some(o) = &self.optimizer {
            for m in o.groups() {
                write_moments(&mut w, m);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic").map_err(|_| Error::BadMagic)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let flags = r.u32("flags")?;
        let iteration = r.u64("iteration")?;
        let clen = r.len("config", 1)?;
        let config = String::from_utf8(r.take(clen, "config")?.to_vec())
            .map_err(|_| Error::Config("checkpoint config is not utf-8".into()))?;
        let n = r.len("gaussian count", 4 * (3 + EMBED_DIM))?;
        let pe_rank = r.u32("pe rank")? as usize;
        let pos = r.f32s(3 * n, "positions")?;
        let emb = r.f32s(EMBED_DIM * n, "embeddings")?;
        let env = r.f32s(ENV_DIM, "environment")?;
        let positions = pos.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let embeddings = emb.chunks_exact(EMBED_DIM).map(|c| c.try_into().expect("embedding row")).collect();
        let scene = GaussianScene::new(positions, embeddings, env.try_into().expect("env row"))?;

        let mut bank = DecoderBank::zeros(pe_rank);
        for id in NetId::ALL {
            let what = id.name();
            let code = r.u8(what)?;
            let head = Head::from_code(code).ok_or_else(|| Error::Config(format!("{what} net: unknown head code {code}")))?;
            let layers = r.u32(what)? as usize;
            if !(2..=64).contains(&layers) {
                return Err(Error::Config(format!("{what} net: bad layer count {layers}")));
            }
            let dims = (0..layers).map(|_| r.u32(what).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = r.len(what, 4)?;
            let params = r.f32s(count, what)?;
            *bank.net_mut(id) = Mlp::from_parts(dims, head, params)?;
        }
        bank.validate()?;

        let optimizer = if flags & FLAG_OPTIMIZER != 0 {
            let mut groups = Vec::with_capacity(10);
            for name in OptimizerState::GROUP_NAMES {
                groups.push(read_moments(&mut r, name)?);
            }
            let state = OptimizerState::from_groups(groups);
            state.check(&scene, &bank)?;
            Some(state)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Config(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self {
            scene,
            bank,
            optimizer,
            iteration,
            config,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    Checkpoint::from_bytes(&bytes)
}

/// Checkpoint file size divided by the Gaussian count.
pub fn per_point_storage(path: &Path, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyPointSet);
    }
    Ok(fs::metadata(path)?.len() as f64 / n as f64)
}

/// A freshly initialized model with `n` Gaussians spread uniformly over a
/// 100 m cube, default decoders, and no optimizer state. Used for storage
/// accounting at sizes no toy dataset reaches.
pub fn random_checkpoint(n: usize, seed: u64) -> Result<Checkpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-50.0..50.0))).collect();
    let mut scene = init_scene_from_points(&points, seed, DEFAULT_EMBED_STD)?;
    let mut bank = DecoderBank::seeded(&DecoderInit::default(), seed);
    scene.quantize_f32();
    bank.quantize_f32();
    Ok(Checkpoint {
        scene,
        bank,
        optimizer: None,
        iteration: 0,
        config: String::new(),
    })
}

pub const EXPLICIT_MAGIC: [u8; 8] = *b"EMBSPLEX";

/// Serializes `scene` with every attribute stored per Gaussian, as a
/// conventional multimodal splatting checkpoint would.
///
/// Header: magic, then `n` u64, `h` u32, `d` u32, followed by the shared
/// environment descriptor (4 f32). Each Gaussian is
/// [`crate::scene::explicit_parameter_count`] f32 in this order: position 3,
/// covariance upper triangle 6, color 3, alpha 1, color SH 3h, beta 1,
/// intensity 1, intensity SH h, raydrop 1, semantic d. View-dependent
/// attributes are decoded once, as seen from the world origin; SH slots are
/// zero and the semantic vector is zero-padded (or truncated) to `d`.
pub fn encode_explicit(scene: &GaussianScene, bank: &DecoderBank, h: usize, d: usize) -> Result<Vec<u8>> {
    let per = crate::scene::explicit_parameter_count(h, d);
    let rows = scene
        .positions()
        .par_iter()
        .zip(scene.embeddings().par_iter())
        .map(|(p, e)| {
            let g = decode_gaussian(bank, e, p, &[0.0; 3], &scene.env)?;
            let c = &g.covariance;
            let mut row = Vec::with_capacity(per);
            row.extend_from_slice(p);
            row.extend_from_slice(&[c[(0, 0)], c[(0, 1)], c[(0, 2)], c[(1, 1)], c[(1, 2)], c[(2, 2)]]);
            row.extend_from_slice(&g.color);
            row.push(g.alpha);
            row.extend(std::iter::repeat_n(0.0, 3 * h));
            row.push(g.beta);
            row.push(g.intensity);
            row.extend(std::iter::repeat_n(0.0, h));
            row.push(g.raydrop);
            row.extend((0..d).map(|k| g.semantic.get(k).copied().unwrap_or(0.0)));
            debug_assert_eq!(row.len(), per);
            Ok(row)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mut w = Writer(Vec::with_capacity(24 + 16 + rows.len() * per * 4));
    w.0.extend_from_slice(&EXPLICIT_MAGIC);
    w.u64(scene.len() as u64);
    w.u32(h as u32);
    w.u32(d as u32);
    w.f32s(&scene.env);
    for row in &rows {
        w.f32s(row);
    }
    Ok(w.0)
}

/// Sizes of the same scene in the embedding layout and the explicit layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StorageComparison {
    pub gaussians: usize,
    pub ours_bytes: usize,
    pub explicit_bytes: usize,
    pub ours_per_point: f64,
    pub explicit_per_point: f64,
    /// `1 − ours / explicit` over whole serializations.
    pub reduction: f64,
    /// The same ratio over per-Gaussian payload only (35 vs explicit floats).
    pub payload_reduction: f64,
}

/// Serializes the scene both ways (model only, no optimizer state) and
/// compares their sizes.
pub fn compare_explicit(scene: &GaussianScene, bank: &DecoderBank, h: usize, d: usize) -> Result<StorageComparison> {
    if scene.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let ours = Checkpoint {
        scene: scene.clone(),
        bank: bank.clone(),
        optimizer: None,
        iteration: 0,
        config: String::new(),
    }
    .to_bytes()
    .len();
    let explicit = encode_explicit(scene, bank, h, d)?.len();
    let n = scene.len() as f64;
    Ok(StorageComparison {
        gaussians: scene.len(),
        ours_bytes: ours,
        explicit_bytes: explicit,
        ours_per_point: ours as f64 / n,
        explicit_per_point: explicit as f64 / n,
        reduction: 1.0 - ours as f64 / explicit as f64,
        payload_reduction: parameter_budget(h, d).reduction_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::random_scene;

    fn sample(n: usize, with_optimizer: bool) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let (mut scene, mut bank) = random_scene(&mut rng, n);
        scene.quantize_f32();
        bank.quantize_f32();
        let optimizer = with_optimizer.then(|| {
            let mut o = OptimizerState::new(&scene, &bank);
            o.positions.step = 7;
            for (i, m) in o.embeddings.m.iter_mut().enumerate() {
                *m = i as f64 * 1e-3 + 1.0 / 3.0;
            }
            o
        });
        Checkpoint {
            scene,
            bank,
            optimizer,
            iteration: 42,
            config: "{\"seed\":3}".into(),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for opt in [false, true] {
            let c = sample(37, opt);
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(back.scene, c.scene);
            assert_eq!(back.optimizer, c.optimizer);
            assert_eq!(back.iteration, 42);
            assert_eq!(back.config, c.config);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let c = sample(5, true);
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.to_bytes(), c.to_bytes());
        assert!(matches!(load_checkpoint(&dir.path().join("none")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = sample(4, false).to_bytes();
        let good = bytes.clone();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::BadMagic)));
        for cut in [3, 20, good.len() / 2, good.len() - 1] {
            assert!(Checkpoint::from_bytes(&good[..cut]).is_err(), "cut at {cut}");
        }
        let mut longer = good.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
        let mut version = good;
        version[8] = 99;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::UnsupportedVersion(_))));
    }

    #[test]
    fn size_is_affine_in_gaussian_count() {
        let size = |n| sample(n, false).to_bytes().len();
        let (a, b, c) = (size(10), size(20), size(30));
        assert_eq!(b - a, c - b);
        // 35 f32 per Gaussian
        assert_eq!(b - a, 10 * 140);
    }

    #[test]
    fn explicit_layout_is_68_floats_per_gaussian() {
        let c = sample(10, false);
        let a = encode_explicit(&c.scene, &c.bank, 9, 16).unwrap().len();
        let c2 = sample(20, false);
        let b = encode_explicit(&c2.scene, &c2.bank, 9, 16).unwrap().len();
        assert_eq!(b - a, 10 * 68 * 4);
    }

    #[test]
    fn reduction_at_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (scene, bank) = random_scene(&mut rng, 100_000);
        let cmp = compare_explicit(&scene, &bank, 9, 16).unwrap();
        assert!((cmp.payload_reduction - (1.0 - 35.0 / 68.0)).abs() < 1e-12);
        assert!(cmp.reduction > 0.40 && cmp.reduction < 0.50, "{cmp:?}");
    }
}
