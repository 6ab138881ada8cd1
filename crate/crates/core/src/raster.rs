//! Tile-based front-to-back alpha blending of 2D Gaussian footprints, shared by
//! the camera and range-view renderers, with its exact reverse pass.
//!
//! Pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)`. A footprint at
//! Mahalanobis distance `m` from a pixel center contributes the effective
//! opacity `o * exp(-m² / 2)`, or nothing when `m` exceeds the sigma cutoff.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{sym2_inverse, Sym2};

/// Knobs of the blending recurrence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendSettings {
    /// Footprints are truncated beyond this many standard deviations; `None`
    /// keeps the full Gaussian (every footprint covers the whole image).
    pub cutoff_sigma: Option<f64>,
    /// Blending for a pixel stops once transmittance falls below this value.
    pub min_transmittance: f64,
    pub tile_size: usize,
}

impl Default for BlendSettings {
    fn default() -> Self {
        Self {
            cutoff_sigma: Some(3.0),
            min_transmittance: 1e-4,
            tile_size: 16,
        }
    }
}

impl BlendSettings {
    /// No truncation of any kind, so the rendered image is a smooth function
    /// of every input. Used for gradient checks.
    pub fn smooth() -> Self {
        Self {
            cutoff_sigma: None,
            min_transmittance: 0.0,
            tile_size: 16,
        }
    }
}

/// A projected Gaussian ready for blending.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat {
    /// Index of the source Gaussian.
    pub index: usize,
    pub mean: [f64; 2],
    /// Pixel-space covariance (already dilated).
    pub cov: Sym2,
    pub conic: Sym2,
    /// Sort key: camera depth or sensor range.
    pub depth: f64,
    pub opacity: f64,
    /// Inclusive pixel bounds `[x0, x1, y0, y1]`; `x` may leave `[0, W)` when wrapping.
    pub bbox: [i64; 4],
}

impl Splat {
    /// Returns `None` for a singular covariance or a footprint that misses the image.
    pub fn new(
        index: usize,
        mean: [f64; 2],
        cov: Sym2,
        depth: f64,
        opacity: f64,
        cutoff_sigma: Option<f64>,
        width: usize,
        height: usize,
        wrap: bool,
    ) -> Option<Self> {
        let conic = sym2_inverse(&cov)?;
        if !mean.iter().all(|v| v.is_finite()) {
            return None;
        }
        let bbox = match cutoff_sigma {
            Some(k) => {
                let rx = k * cov[0].sqrt();
                let ry = k * cov[2].sqrt();
                let x0 = (mean[0] - rx - 0.5).floor();
                let x1 = (mean[0] + rx - 0.5).ceil();
                let y0 = (mean[1] - ry - 0.5).floor().max(-1.0);
                let y1 = (mean[1] + ry - 0.5).ceil().min(height as f64);
                let (x0, x1) = if wrap {
                    if x1 - x0 + 1.0 >= width as f64 {
                        (0.0, width as f64 - 1.0)
                    } else {
                        (x0, x1)
                    }
                } else {
                    (x0.max(-1.0), x1.min(width as f64))
                };
                [x0 as i64, x1 as i64, y0 as i64, y1 as i64]
            }
            None => [0, width as i64 - 1, 0, height as i64 - 1],
        };
        let visible_y = bbox[3] >= 0 && bbox[2] < height as i64;
        let visible_x = wrap || (bbox[1] >= 0 && bbox[0] < width as i64);
        if !(visible_y && visible_x) {
            return None;
        }
        Some(Self {
            index,
            mean,
            cov,
            conic,
            depth,
            opacity,
            bbox,
        })
    }

    /// Offset from the footprint center to the center of pixel `(x, y)`.
    #[inline]
    pub fn offset(&self, x: usize, y: usize, wrap_width: Option<usize>) -> (f64, f64) {
        let mut dx = x as f64 + 0.5 - self.mean[0];
        if let Some(w) = wrap_width {
            let w = w as f64;
            dx -= w * (dx / w).round();
        }
        (dx, y as f64 + 0.5 - self.mean[1])
    }

    #[inline]
    pub fn mahalanobis_sq(&self, dx: f64, dy: f64) -> f64 {
        self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy
    }

    /// Column intervals of `[0, width)` covered by the bounding box.
    fn column_ranges(&self, width: usize, wrap: bool) -> Vec<(usize, usize)> {
        let [x0, x1, ..] = self.bbox;
        let w = width as i64;
        if !wrap {
            let a = x0.max(0);
            let b = x1.min(w - 1);
            return if a <= b { vec![(a as usize, b as usize)] } else { vec![] };
        }
        if x1 - x0 + 1 >= w {
            return vec![(0, width - 1)];
        }
        let a = x0.rem_euclid(w);
        let b = x1.rem_euclid(w);
        if a <= b {
            vec![(a as usize, b as usize)]
        } else {
            vec![(0, b as usize), (a as usize, width - 1)]
        }
    }
}

/// One recorded blending step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    /// Position in the splat slice.
    pub splat: u32,
    pub alpha: f64,
    /// Transmittance in front of this contributor.
    pub transmittance: f64,
}

/// Per-pixel contributor lists, stored contiguously.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContributionLists {
    offsets: Vec<usize>,
    entries: Vec<Contribution>,
}

impl ContributionLists {
    pub fn pixel(&self, p: usize) -> &[Contribution] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn total(&self) -> usize {
        self.entries.len()
    }
}

/// Output of [`rasterize`]: blended feature channels and accumulated opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct Blended {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// `height * width * channels`, row-major, interleaved.
    pub features: Vec<f64>,
    /// `height * width`.
    pub accum: Vec<f64>,
    pub contributions: Option<ContributionLists>,
}

/// Gradient with respect to one splat's inputs. `cov` is the full-matrix
/// gradient `[G00, G01, G11]` of the symmetric covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrad {
    pub opacity: f64,
    pub mean: [f64; 2],
    pub cov: Sym2,
    pub features: Vec<f64>,
}

impl SplatGrad {
    fn zeros(k: usize) -> Self {
        Self {
            opacity: 0.0,
            mean: [0.0; 2],
            cov: [0.0; 3],
            features: vec![0.0; k],
        }
    }

    fn add(&mut self, other: &SplatGrad) {
        self.opacity += other.opacity;
        self.mean[0] += other.mean[0];
        self.mean[1] += other.mean[1];
        for i in 0..3 {
            self.cov[i] += other.cov[i];
        }
        for (a, b) in self.features.iter_mut().zip(&other.features) {
            *a += b;
        }
    }
}

/// Geometry of a raster target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    /// Columns wrap around (azimuth seam of a range image).
    pub wrap: bool,
}

impl Canvas {
    fn wrap_width(&self) -> Option<usize> {
        self.wrap.then_some(self.width)
    }
}

struct Tile {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

fn tiles(canvas: &Canvas, size: usize) -> Vec<Tile> {
    let mut out = Vec::new();
    for y0 in (0..canvas.height).step_by(size) {
        for x0 in (0..canvas.width).step_by(size) {
            out.push(Tile {
                x0,
                x1: (x0 + size).min(canvas.width),
                y0,
                y1: (y0 + size).min(canvas.height),
            });
        }
    }
    out
}

/// Splat positions per tile, each list sorted front to back with ties broken
/// by Gaussian index.
fn bin_splats(splats: &[Splat], canvas: &Canvas, tiles: &[Tile], size: usize) -> Vec<Vec<u32>> {
    let tiles_x = canvas.width.div_ceil(size);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles.len()];
    for (si, s) in splats.iter().enumerate() {
        let y0 = s.bbox[2].max(0) as usize;
        let y1 = s.bbox[3].min(canvas.height as i64 - 1);
        if y1 < 0 || y0 as i64 > y1 {
            continue;
        }
        let y1 = y1 as usize;
        for (cx0, cx1) in s.column_ranges(canvas.width, canvas.wrap) {
            for ty in y0 / size..=y1 / size {
                for tx in cx0 / size..=cx1 / size {
                    bins[ty * tiles_x + tx].push(si as u32);
                }
            }
        }
    }
    for bin in &mut bins {
        bin.sort_by(|&a, &b| {
            let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
            sa.depth.total_cmp(&sb.depth).then(sa.index.cmp(&sb.index))
        });
        bin.dedup();
    }
    bins
}

struct TileOutput {
    features: Vec<f64>,
    accum: Vec<f64>,
    lists: Vec<Vec<Contribution>>,
}

/// Blends `features` (`splats.len() * channels`) over the canvas.
pub fn rasterize(
    splats: &[Splat],
    features: &[f64],
    channels: usize,
    canvas: &Canvas,
    settings: &BlendSettings,
    record: bool,
) -> Blended {
    assert_eq!(features.len(), splats.len() * channels);
    let size = settings.tile_size.max(1);
    let tiles = tiles(canvas, size);
    let bins = bin_splats(splats, canvas, &tiles, size);
    let cutoff_sq = settings.cutoff_sigma.map(|k| k * k);
    let wrap_width = canvas.wrap_width();

    let outputs: Vec<TileOutput> = tiles
        .par_iter()
        .zip(bins.par_iter())
        .map(|(tile, bin)| {
            let npx = (tile.x1 - tile.x0) * (tile.y1 - tile.y0);
            let mut out = TileOutput {
                features: vec![0.0; npx * channels],
                accum: vec![0.0; npx],
                lists: if record { vec![Vec::new(); npx] } else { Vec::new() },
            };
            let mut p = 0;
            for y in tile.y0..tile.y1 {
                for x in tile.x0..tile.x1 {
                    let mut t = 1.0;
                    // summed directly: 1 - t loses all precision for tiny weights
                    let mut coverage = 0.0;
                    let acc = &mut out.features[p * channels..(p + 1) * channels];
                    for &si in bin {
                        let s = &splats[si as usize];
                        let (dx, dy) = s.offset(x, y, wrap_width);
                        let m = s.mahalanobis_sq(dx, dy);
                        if cutoff_sq.is_some_and(|c| m > c) {
                            continue;
                        }
                        let a = s.opacity * (-0.5 * m).exp();
                        let w = a * t;
                        coverage += w;
                        let f = &features[si as usize * channels..(si as usize + 1) * channels];
                        for (o, fv) in acc.iter_mut().zip(f) {
                            *o += w * fv;
                        }
                        if record {
                            out.lists[p].push(Contribution {
                                splat: si,
                                alpha: a,
                                transmittance: t,
                            });
                        }
                        t *= 1.0 - a;
                        if t < settings.min_transmittance {
                            break;
                        }
                    }
                    out.accum[p] = coverage;
                    p += 1;
                }
            }
            out
        })
        .collect();

    let npix = canvas.width * canvas.height;
    let mut feat = vec![0.0; npix * channels];
    let mut accum = vec![0.0; npix];
    let mut per_pixel: Vec<Vec<Contribution>> = if record { vec![Vec::new(); npix] } else { Vec::new() };
    for (tile, out) in tiles.iter().zip(outputs) {
        let mut p = 0;
        let mut lists = out.lists.into_iter();
        for y in tile.y0..tile.y1 {
            for x in tile.x0..tile.x1 {
                let g = y * canvas.width + x;
                feat[g * channels..(g + 1) * channels]
                    .copy_from_slice(&out.features[p * channels..(p + 1) * channels]);
                accum[g] = out.accum[p];
                if record {
                    per_pixel[g] = lists.next().unwrap();
                }
                p += 1;
            }
        }
    }
    let contributions = record.then(|| {
        let mut offsets = Vec::with_capacity(npix + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for l in per_pixel {
            entries.extend(l);
            offsets.push(entries.len());
        }
        ContributionLists { offsets, entries }
    });
    Blended {
        width: canvas.width,
        height: canvas.height,
        channels,
        features: feat,
        accum,
        contributions,
    }
}

/// Reverse pass of [`rasterize`]. `d_features` is `H * W * channels`,
/// `d_accum` is `H * W`. Returns one gradient per splat.
pub fn rasterize_backward(
    splats: &[Splat],
    features: &[f64],
    blended: &Blended,
    d_features: &[f64],
    d_accum: &[f64],
    canvas: &Canvas,
    settings: &BlendSettings,
) -> Result<Vec<SplatGrad>> {
    let lists = blended.contributions.as_ref().ok_or(Error::NotTrainingFrame)?;
    let k = blended.channels;
    let size = settings.tile_size.max(1);
    let wrap_width = canvas.wrap_width();
    let tiles = tiles(canvas, size);

    // Per-tile sparse buffers, merged in tile order so the sum is deterministic.
    let partials: Vec<Vec<(u32, SplatGrad)>> = tiles
        .par_iter()
        .map(|tile| {
            let mut local: std::collections::BTreeMap<u32, SplatGrad> = Default::default();
            let mut behind = vec![0.0; k];
            for y in tile.y0..tile.y1 {
                for x in tile.x0..tile.x1 {
                    let g = y * canvas.width + x;
                    let dfeat = &d_features[g * k..(g + 1) * k];
                    let dacc = d_accum[g];
                    if dacc == 0.0 && dfeat.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    behind.fill(0.0);
                    let mut behind_acc = 0.0;
                    for c in lists.pixel(g).iter().rev() {
                        let si = c.splat as usize;
                        let s = &splats[si];
                        let f = &features[si * k..(si + 1) * k];
                        let (a, t) = (c.alpha, c.transmittance);
                        let grad = local.entry(c.splat).or_insert_with(|| SplatGrad::zeros(k));
                        let w = a * t;
                        let mut da = 0.0;
                        for ch in 0..k {
                            grad.features[ch] += w * dfeat[ch];
                            da += dfeat[ch] * t * (f[ch] - behind[ch]);
                            behind[ch] = a * f[ch] + (1.0 - a) * behind[ch];
                        }
                        da += dacc * t * (1.0 - behind_acc);
                        behind_acc = a + (1.0 - a) * behind_acc;

                        let (dx, dy) = s.offset(x, y, wrap_width);
                        let m = s.mahalanobis_sq(dx, dy);
                        let gauss = (-0.5 * m).exp();
                        grad.opacity += gauss * da;
                        let dm = -0.5 * a * da;
                        let [qa, qb, qc] = s.conic;
                        grad.mean[0] -= dm * 2.0 * (qa * dx + qb * dy);
                        grad.mean[1] -= dm * 2.0 * (qb * dx + qc * dy);
                        // conic gradient, converted to covariance below
                        grad.cov[0] += dm * dx * dx;
                        grad.cov[1] += dm * dx * dy;
                        grad.cov[2] += dm * dy * dy;
                    }
                }
            }
            local.into_iter().collect()
        })
        .collect();

    let mut grads: Vec<SplatGrad> = (0..splats.len()).map(|_| SplatGrad::zeros(k)).collect();
    for part in partials {
        for (si, g) in part {
            grads[si as usize].add(&g);
        }
    }
    for (s, g) in splats.iter().zip(grads.iter_mut()) {
        g.cov = conic_grad_to_cov(&s.conic, &g.cov);
    }
    Ok(grads)
}

/// Full-matrix gradient through `Q = Σ⁻¹`: `dL/dΣ = -Q (dL/dQ) Q`.
pub fn conic_grad_to_cov(q: &Sym2, gq: &Sym2) -> Sym2 {
    // products of symmetric 2x2 matrices written out
    let (a, b, c) = (q[0], q[1], q[2]);
    let (ga, gb, gc) = (gq[0], gq[1], gq[2]);
    // M = Q * G
    let m00 = a * ga + b * gb;
    let m01 = a * gb + b * gc;
    let m10 = b * ga + c * gb;
    let m11 = b * gb + c * gc;
    // (Q G) Q
    let r00 = m00 * a + m01 * b;
    let r01 = m00 * b + m01 * c;
    let r11 = m10 * b + m11 * c;
    [-r00, -r01, -r11]
}
