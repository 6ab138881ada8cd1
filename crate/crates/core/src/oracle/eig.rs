use std::f64::consts::PI;

use crate::error::{Error, Result};

fn check_symmetric<const N: usize>(m: &[[f64; N]; N]) -> Result<()> {
    for i in 0..N {
        for j in 0..i {
            let d = (m[i][j] - m[j][i]).abs();
            if d > 1e-9 {
                return Err(Error::Asymmetric(d));
            }
        }
    }
    Ok(())
}

/// Closed-form symmetric 2x2 eigensolve; eigenvalues descending, eigenvectors
/// as columns-by-index (`vecs[k]` belongs to `vals[k]`).
pub fn dense_eig_2x2(m: &[[f64; 2]; 2]) -> Result<([f64; 2], [[f64; 2]; 2])> {
    check_symmetric(m)?;
    let (a, b, c) = (m[0][0], 0.5 * (m[0][1] + m[1][0]), m[1][1]);
    let mean = 0.5 * (a + c);
    let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let vals = [mean + r, mean - r];
    let angle = 0.5 * (2.0 * b).atan2(a - c);
    let v0 = [angle.cos(), angle.sin()];
    Ok((vals, [v0, [-v0[1], v0[0]]]))
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Null vector of `m - λI` from the best-conditioned cross product of its rows.
fn eigvec(m: &[[f64; 3]; 3], lambda: f64) -> Option<[f64; 3]> {
    let rows: Vec<[f64; 3]> = (0..3)
        .map(|i| {
            let mut r = m[i];
            r[i] -= lambda;
            r
        })
        .collect();
    let cands = [cross(rows[0], rows[1]), cross(rows[0], rows[2]), cross(rows[1], rows[2])];
    let best = cands.into_iter().max_by(|a, b| norm(*a).total_cmp(&norm(*b)))?;
    let n = norm(best);
    let scale_ref = m.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    (n > 1e-10 * scale_ref * scale_ref).then(|| scale(best, 1.0 / n))
}

/// Any unit vector orthogonal to unit `a`.
fn orthogonal(a: [f64; 3]) -> [f64; 3] {
    let h = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let c = cross(a, h);
    scale(c, 1.0 / norm(c))
}

/// Analytic (trigonometric) symmetric 3x3 eigensolve; eigenvalues descending.
pub fn dense_eig_3x3(m: &[[f64; 3]; 3]) -> Result<([f64; 3], [[f64; 3]; 3])> {
    check_symmetric(m)?;
    let mut a = *m;
    for i in 0..3 {
        for j in 0..i {
            let s = 0.5 * (a[i][j] + a[j][i]);
            a[i][j] = s;
            a[j][i] = s;
        }
    }
    let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    if p == 0.0 {
        return Ok(([q; 3], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]));
    }
    let mut b = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            b[i][j] = (a[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let l0 = q + 2.0 * p * phi.cos();
    let l2 = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    let l1 = 3.0 * q - l0 - l2;
    let vals = [l0, l1, l2];

    // Take the eigenvector of the better-separated extreme eigenvalue first;
    // the rest follow by orthogonality when gaps vanish.
    let (v0, v1, v2);
    if l0 - l1 >= l1 - l2 {
        v0 = eigvec(&a, l0).unwrap_or([1.0, 0.0, 0.0]);
        v2 = match eigvec(&a, l2) {
            Some(v) => {
                // re-orthogonalize against v0
                let d = v[0] * v0[0] + v[1] * v0[1] + v[2] * v0[2];
                let w = [v[0] - d * v0[0], v[1] - d * v0[1], v[2] - d * v0[2]];
                scale(w, 1.0 / norm(w))
            }
            None => orthogonal(v0),
        };
        v1 = cross(v2, v0);
    } else {
        v2 = eigvec(&a, l2).unwrap_or([0.0, 0.0, 1.0]);
        v0 = match eigvec(&a, l0) {
            Some(v) => {
                let d = v[0] * v2[0] + v[1] * v2[1] + v[2] * v2[2];
                let w = [v[0] - d * v2[0], v[1] - d * v2[1], v[2] - d * v2[2]];
                scale(w, 1.0 / norm(w))
            }
            None => orthogonal(v2),
        };
        v1 = cross(v2, v0);
    }
    let vecs = [v0, v1, v2];
    // Rayleigh quotients: the arccos step above loses about half the digits
    // when two eigenvalues nearly coincide.
    let mut refined = vals;
    for (k, v) in vecs.iter().enumerate() {
        refined[k] = (0..3).map(|i| v[i] * (0..3).map(|j| a[i][j] * v[j]).sum::<f64>()).sum();
    }
    Ok((refined, vecs))
}
