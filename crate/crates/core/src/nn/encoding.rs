use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Number of frequency bands used when none is configured.
pub const DEFAULT_PE_RANK: usize = 4;

const UNIT_TOLERANCE: f64 = 1e-6;

/// Sinusoidal encoding of a unit direction.
///
/// Band `k` contributes `sin(2^k π v)` (three entries) followed by
/// `cos(2^k π v)` (three entries), giving `6 * rank` values.
pub fn positional_encode(v: &[f64; 3], rank: usize) -> Result<Vec<f64>> {
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if (norm - 1.0).abs() > UNIT_TOLERANCE || !norm.is_finite() {
        return Err(Error::DirectionNotNormalized(norm));
    }
    let mut out = Vec::with_capacity(6 * rank);
    for k in 0..rank {
        let f = (1u64 << k) as f64 * PI;
        out.extend(v.iter().map(|c| (f * c).sin()));
        out.extend(v.iter().map(|c| (f * c).cos()));
    }
    Ok(out)
}

/// Gradient of the encoding with respect to `v`, given the gradient on its output.
pub fn positional_encode_backward(v: &[f64; 3], rank: usize, d_out: &[f64]) -> [f64; 3] {
    debug_assert_eq!(d_out.len(), 6 * rank);
    let mut g = [0.0; 3];
    for k in 0..rank {
        let f = (1u64 << k) as f64 * PI;
        let base = 6 * k;
        for c in 0..3 {
            let x = f * v[c];
            g[c] += d_out[base + c] * f * x.cos() - d_out[base + 3 + c] * f * x.sin();
        }
    }
    g
}
