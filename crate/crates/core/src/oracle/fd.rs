use crate::decoders::DecoderBank;
use crate::error::{Error, Result};
use crate::pipeline::{get_param, set_param, ParamRef};
use crate::scene::GaussianScene;

pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Central differences; the step for element `i` is `step * max(1, |θᵢ|)`.
pub fn finite_diff_gradient<F>(mut loss: F, theta: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = step * theta[i].abs().max(1.0);
        x[i] = theta[i] + h;
        let up = loss(&x)?;
        x[i] = theta[i] - h;
        let down = loss(&x)?;
        x[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteLoss("finite difference probe"));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Central differences over selected scene/decoder parameters.
pub fn finite_diff_params<F>(
    scene: &GaussianScene,
    bank: &DecoderBank,
    params: &[ParamRef],
    step: impl Fn(ParamRef) -> f64,
    mut loss: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&GaussianScene, &DecoderBank) -> Result<f64>,
{
    let mut s = scene.clone();
    let mut b = bank.clone();
    let mut out = Vec::with_capacity(params.len());
    for &p in params {
        let v = get_param(scene, bank, p);
        let h = step(p) * v.abs().max(1.0);
        set_param(&mut s, &mut b, p, v + h);
        let up = loss(&s, &b)?;
        set_param(&mut s, &mut b, p, v - h);
        let down = loss(&s, &b)?;
        set_param(&mut s, &mut b, p, v);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteLoss("finite difference probe"));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_constant() {
        let theta = [0.5, -2.0, 3.0, 1e-3];
        let g = finite_diff_gradient(|x| Ok(0.5 * x.iter().map(|v| v * v).sum::<f64>()), &theta, DEFAULT_FD_STEP).unwrap();
        for (a, b) in g.iter().zip(theta) {
            assert!((a - b).abs() < 1e-8);
        }
        let g = finite_diff_gradient(|_| Ok(4.0), &theta, DEFAULT_FD_STEP).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(finite_diff_gradient(|_| Ok(f64::NAN), &theta, DEFAULT_FD_STEP).is_err());
    }
}
