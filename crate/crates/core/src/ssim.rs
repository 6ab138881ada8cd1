//! Per-pixel structural similarity with an 11x11 Gaussian window (σ = 1.5),
//! `C1 = 0.01²`, `C2 = 0.03²`, symmetric border reflection, and its gradient
//! with respect to the first image.

use crate::error::Result;
use crate::grid::Image;

pub const WINDOW_RADIUS: usize = 5;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 1e-4;
pub const C2: f64 = 9e-4;

fn kernel() -> [f64; 2 * WINDOW_RADIUS + 1] {
    let mut k = [0.0; 2 * WINDOW_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - WINDOW_RADIUS as f64;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection into `[0, n)`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let j = i.rem_euclid(2 * n);
    (if j >= n { 2 * n - 1 - j } else { j }) as usize
}

/// Separable blur of one `w x h` plane.
fn blur(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = kernel();
    let r = WINDOW_RADIUS as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * src[y * w + reflect(x as i64 + t as i64 - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * tmp[reflect(y as i64 + t as i64 - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Adjoint of [`blur`].
fn blur_adjoint(grad: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = kernel();
    let r = WINDOW_RADIUS as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = grad[y * w + x];
            for (t, kv) in k.iter().enumerate() {
                tmp[reflect(y as i64 + t as i64 - r, h) * w + x] += kv * g;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = tmp[y * w + x];
            for (t, kv) in k.iter().enumerate() {
                out[y * w + reflect(x as i64 + t as i64 - r, w)] += kv * g;
            }
        }
    }
    out
}

struct Stats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

fn stats(a: &[f64], b: &[f64], w: usize, h: usize) -> Stats {
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = blur(a, w, h);
    let mu_b = blur(b, w, h);
    let e_aa = blur(&sq(a, a), w, h);
    let e_bb = blur(&sq(b, b), w, h);
    let e_ab = blur(&sq(a, b), w, h);
    let n = w * h;
    Stats {
        var_a: (0..n).map(|i| e_aa[i] - mu_a[i] * mu_a[i]).collect(),
        var_b: (0..n).map(|i| e_bb[i] - mu_b[i] * mu_b[i]).collect(),
        cov: (0..n).map(|i| e_ab[i] - mu_a[i] * mu_b[i]).collect(),
        mu_a,
        mu_b,
    }
}

fn planes(img: &Image) -> Vec<Vec<f64>> {
    (0..img.channels).map(|c| img.channel(c).data).collect()
}

/// SSIM per pixel and channel; same shape as the inputs.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Image> {
    a.same_shape(b)?;
    let (w, h) = (a.width, a.height);
    let mut out = Image::zeros(w, h, a.channels);
    for (c, (pa, pb)) in planes(a).iter().zip(planes(b)).enumerate() {
        let s = stats(pa, &pb, w, h);
        for i in 0..w * h {
            let num = (2.0 * s.mu_a[i] * s.mu_b[i] + C1) * (2.0 * s.cov[i] + C2);
            let den = (s.mu_a[i] * s.mu_a[i] + s.mu_b[i] * s.mu_b[i] + C1) * (s.var_a[i] + s.var_b[i] + C2);
            out.data[i * a.channels + c] = num / den;
        }
    }
    Ok(out)
}

/// Gradient of `Σ d_map ⊙ ssim_map(a, b)` with respect to `a`.
pub fn ssim_backward(a: &Image, b: &Image, d_map: &Image) -> Result<Image> {
    a.same_shape(b)?;
    a.same_shape(d_map)?;
    let (w, h, ch) = (a.width, a.height, a.channels);
    let mut out = Image::zeros(w, h, ch);
    let gplanes = planes(d_map);
    for (c, (pa, pb)) in planes(a).iter().zip(planes(b)).enumerate() {
        let s = stats(pa, &pb, w, h);
        let n = w * h;
        let mut g_mu = vec![0.0; n];
        let mut g_eaa = vec![0.0; n];
        let mut g_eab = vec![0.0; n];
        for i in 0..n {
            let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
            let a1 = 2.0 * ma * mb + C1;
            let a2 = 2.0 * s.cov[i] + C2;
            let b1 = ma * ma + mb * mb + C1;
            let b2 = s.var_a[i] + s.var_b[i] + C2;
            let ssim = a1 * a2 / (b1 * b2);
            let g = gplanes[c][i];
            // partials with respect to mu_a, E[a²] and E[ab]
            let d_mu = (2.0 * mb * a2 - 2.0 * mb * a1) / (b1 * b2) - ssim * (2.0 * ma / b1 - 2.0 * ma / b2);
            g_mu[i] = g * d_mu;
            g_eaa[i] = -g * ssim / b2;
            g_eab[i] = g * 2.0 * a1 / (b1 * b2);
        }
        let t_mu = blur_adjoint(&g_mu, w, h);
        let t_aa = blur_adjoint(&g_eaa, w, h);
        let t_ab = blur_adjoint(&g_eab, w, h);
        for i in 0..n {
            out.data[i * ch + c] = t_mu[i] + 2.0 * pa[i] * t_aa[i] + pb[i] * t_ab[i];
        }
    }
    Ok(out)
}

/// Mean of the SSIM map.
pub fn ssim_mean(a: &Image, b: &Image) -> Result<f64> {
    let m = ssim_map(a, b)?;
    Ok(m.data.iter().sum::<f64>() / m.data.len().max(1) as f64)
}
