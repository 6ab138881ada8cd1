use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First/second moment accumulators for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Keeps rows (of width `row`) whose flag is set.
    pub fn retain_rows(&mut self, row: usize, keep: &[bool]) {
        for buf in [&mut self.m, &mut self.v] {
            let mut out = Vec::with_capacity(buf.len());
            for (chunk, &k) in buf.chunks(row).zip(keep) {
                if k {
                    out.extend_from_slice(chunk);
                }
            }
            *buf = out;
        }
    }

    /// Appends zero-initialized rows.
    pub fn push_zero_rows(&mut self, row: usize, count: usize) {
        self.m.resize(self.m.len() + row * count, 0.0);
        self.v.resize(self.v.len() + row * count, 0.0);
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// `name` identifies the tensor in the error raised for non-finite gradients.
pub fn adam_step(
    state: &mut Moments,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    config: &AdamConfig,
    name: &str,
) -> Result<()> {
    if params.len() != grads.len() || state.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam `{name}`: params {}, grads {}, moments {}",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = Moments::zeros(3);
        adam_step(&mut s, &mut p, &[0.0; 3], 0.1, &AdamConfig::default(), "p").unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        // m̂ = g, v̂ = g², so the update is -lr * g / (|g| + eps)
        let g = [0.3, -2.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut s = Moments::zeros(3);
        adam_step(&mut s, &mut p, &g, 0.01, &AdamConfig::default(), "p").unwrap();
        for (pi, gi) in p.iter().zip(g) {
            assert!((pi + 0.01 * gi.signum()).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_gradient_limit() {
        let mut p = vec![0.0];
        let mut s = Moments::zeros(1);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0];
            adam_step(&mut s, &mut p, &[4.0], 1e-3, &AdamConfig::default(), "p").unwrap();
            last = p[0] - before;
        }
        assert!((last + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = vec![0.0; 2];
        let mut s = Moments::zeros(2);
        let err = adam_step(&mut s, &mut p, &[f64::NAN, 0.0], 0.1, &AdamConfig::default(), "embeddings")
            .unwrap_err();
        assert!(err.to_string().contains("embeddings"));
    }

    #[test]
    fn row_edits() {
        let mut s = Moments::zeros(6);
        s.m = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        s.retain_rows(2, &[true, false, true]);
        assert_eq!(s.m, vec![1.0, 2.0, 5.0, 6.0]);
        s.push_zero_rows(2, 1);
        assert_eq!(s.len(), 6);
        assert_eq!(s.v.len(), 6);
    }
}
