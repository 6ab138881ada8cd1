use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{normalize_quat, normalize_quat_backward};

/// Hidden width of every decoder network.
pub const DEFAULT_HIDDEN: usize = 32;

/// Output activation applied after the last affine layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Identity,
    Sigmoid,
    Exp,
    QuatNormalize,
    /// `exp` on the first three outputs, quaternion normalization on the last four.
    ScaleRotation,
}

impl Head {
    pub fn code(self) -> u8 {
        match self {
            Head::Identity => 0,
            Head::Sigmoid => 1,
            Head::Exp => 2,
            Head::QuatNormalize => 3,
            Head::ScaleRotation => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Head::Identity,
            1 => Head::Sigmoid,
            2 => Head::Exp,
            3 => Head::QuatNormalize,
            4 => Head::ScaleRotation,
            _ => return None,
        })
    }

    fn apply(self, z: &[f64]) -> Vec<f64> {
        match self {
            Head::Identity => z.to_vec(),
            Head::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
            Head::Exp => z.iter().map(|v| v.exp()).collect(),
            Head::QuatNormalize => normalize_quat(&[z[0], z[1], z[2], z[3]]).to_vec(),
            Head::ScaleRotation => {
                let q = normalize_quat(&[z[3], z[4], z[5], z[6]]);
                vec![z[0].exp(), z[1].exp(), z[2].exp(), q[0], q[1], q[2], q[3]]
            }
        }
    }

    fn backward(self, z: &[f64], y: &[f64], dy: &[f64]) -> Vec<f64> {
        match self {
            Head::Identity => dy.to_vec(),
            Head::Sigmoid => y.iter().zip(dy).map(|(y, d)| d * y * (1.0 - y)).collect(),
            Head::Exp => y.iter().zip(dy).map(|(y, d)| d * y).collect(),
            Head::QuatNormalize => {
                normalize_quat_backward(&[z[0], z[1], z[2], z[3]], &[dy[0], dy[1], dy[2], dy[3]])
                    .to_vec()
            }
            Head::ScaleRotation => {
                let dq = normalize_quat_backward(
                    &[z[3], z[4], z[5], z[6]],
                    &[dy[3], dy[4], dy[5], dy[6]],
                );
                vec![dy[0] * y[0], dy[1] * y[1], dy[2] * y[2], dq[0], dq[1], dq[2], dq[3]]
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Fully connected network: affine layers with a rectifier between them and a
/// named head activation after the last one.
///
/// Parameters live in one flat vector, layer by layer: the row-major weight
/// matrix (`out x in`) followed by the bias.
#[derive(Clone, Debug)]
pub struct Mlp {
    dims: Vec<usize>,
    head: Head,
    params: Vec<f64>,
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.head == other.head && self.params == other.params
    }
}

impl Mlp {
    /// Network with the default `LINEAR -> RELU -> LINEAR` shape.
    pub fn standard<R: Rng + ?Sized>(input: usize, output: usize, head: Head, rng: &mut R) -> Self {
        Self::new(vec![input, DEFAULT_HIDDEN, output], head, rng)
    }

    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn new<R: Rng + ?Sized>(dims: Vec<usize>, head: Head, rng: &mut R) -> Self {
        let mut net = Self::zeros(dims, head);
        let layers: Vec<_> = net.layer_shapes().collect();
        for (offset, fan_in, fan_out) in layers {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_out * (fan_in + 1)] {
                *p = rng.random_range(-bound..bound);
            }
        }
        net
    }

    pub fn zeros(dims: Vec<usize>, head: Head) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least an input and an output layer");
        if head == Head::ScaleRotation {
            assert_eq!(*dims.last().unwrap(), 7);
        }
        if head == Head::QuatNormalize {
            assert_eq!(*dims.last().unwrap(), 4);
        }
        let count = dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
        Self {
            dims,
            head,
            params: vec![0.0; count],
            version: 0,
        }
    }

    /// Rebuilds a network from serialized parts.
    pub fn from_parts(dims: Vec<usize>, head: Head, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(dims, head);
        if params.len() != net.params.len() {
            return Err(Error::DimensionMismatch {
                context: "mlp parameters",
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Bias slice of the last layer.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let out = self.out_dim();
        let len = self.params.len();
        self.version += 1;
        &mut self.params[len - out..]
    }

    fn layer_shapes(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.dims.windows(2).map(move |w| {
            let start = offset;
            offset += w[1] * (w[0] + 1);
            (start, w[0], w[1])
        })
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                context: "mlp input",
                expected: self.in_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    fn run(&self, input: &[f64], mut record: Option<&mut Record>) -> Vec<f64> {
        let n_layers = self.dims.len() - 1;
        let mut x = input.to_vec();
        for (l, (offset, fan_in, fan_out)) in self.layer_shapes().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_out * (fan_in + 1)];
            let mut z = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                *zo += row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            }
            if let Some(rec) = record.as_deref_mut() {
                rec.acts.push(std::mem::take(&mut x));
            }
            if l + 1 < n_layers {
                for v in &mut z {
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            x = z;
        }
        let y = self.head.apply(&x);
        if let Some(rec) = record {
            rec.pre_head = x;
            rec.output = y.clone();
        }
        y
    }

    /// Forward pass without recording.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        Ok(self.run(input, None))
    }

    /// Forward pass recording activations; returns the output and the record index.
    pub fn forward_taped(&self, input: &[f64], tape: &mut GradTape) -> Result<(Vec<f64>, usize)> {
        self.check_input(input)?;
        tape.bind(self)?;
        let mut rec = Record::default();
        let y = self.run(input, Some(&mut rec));
        tape.records.push(rec);
        Ok((y, tape.records.len() - 1))
    }

    /// Backpropagates `out_grad` through the recorded forward pass `record`.
    ///
    /// Parameter gradients accumulate into the tape; the input gradient is returned.
    pub fn backward(&self, tape: &mut GradTape, record: usize, out_grad: &[f64]) -> Result<Vec<f64>> {
        if tape.version != Some(self.version) || tape.dims != self.dims {
            return Err(Error::StaleTape("tape was recorded against different parameters"));
        }
        let rec = tape
            .records
            .get(record)
            .ok_or(Error::StaleTape("no such record"))?;
        if out_grad.len() != self.out_dim() {
            return Err(Error::DimensionMismatch {
                context: "mlp output gradient",
                expected: self.out_dim(),
                got: out_grad.len(),
            });
        }
        let mut delta = self.head.backward(&rec.pre_head, &rec.output, out_grad);
        let layers: Vec<_> = self.layer_shapes().collect();
        let grad = &mut tape.grad;
        for (l, &(offset, fan_in, fan_out)) in layers.iter().enumerate().rev() {
            let x = &rec.acts[l];
            let w = &self.params[offset..offset + fan_in * fan_out];
            let bias_off = offset + fan_in * fan_out;
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[bias_off + o] += d;
                let g_row = &mut grad[offset + o * fan_in..offset + (o + 1) * fan_in];
                for (g, xi) in g_row.iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
            let mut dx = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (dxi, wi) in dx.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *dxi += d * wi;
                }
            }
            if l > 0 {
                // rectifier; x is the post-activation of the previous layer
                for (dxi, xi) in dx.iter_mut().zip(x) {
                    if *xi <= 0.0 {
                        *dxi = 0.0;
                    }
                }
            }
            delta = dx;
        }
        Ok(delta)
    }
}

#[derive(Clone, Debug, Default)]
struct Record {
    acts: Vec<Vec<f64>>,
    pre_head: Vec<f64>,
    output: Vec<f64>,
}

/// Activation cache plus accumulated parameter gradients for one network.
#[derive(Clone, Debug, Default)]
pub struct GradTape {
    version: Option<u64>,
    dims: Vec<usize>,
    records: Vec<Record>,
    grad: Vec<f64>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    fn bind(&mut self, net: &Mlp) -> Result<()> {
        match self.version {
            None => {
                self.version = Some(net.version);
                self.dims = net.dims.clone();
                self.grad = vec![0.0; net.param_count()];
                Ok(())
            }
            Some(v) if v == net.version && self.dims == net.dims => Ok(()),
            Some(_) => Err(Error::StaleTape("tape already bound to other parameters")),
        }
    }

    /// Accumulated parameter gradient, laid out like [`Mlp::params`].
    pub fn param_grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn into_param_grad(self) -> Vec<f64> {
        self.grad
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends another tape's records and gradients (same network).
    pub fn merge(&mut self, other: GradTape) -> Result<usize> {
        let offset = self.records.len();
        if other.version.is_none() {
            return Ok(offset);
        }
        if self.version.is_none() {
            *self = other;
            return Ok(0);
        }
        if self.version != other.version || self.dims != other.dims {
            return Err(Error::StaleTape("merging tapes of different networks"));
        }
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += b;
        }
        self.records.extend(other.records);
        Ok(offset)
    }
}

/// Forward pass, optionally recording into `tape`.
pub fn mlp_forward(net: &Mlp, input: &[f64], tape: Option<&mut GradTape>) -> Result<Vec<f64>> {
    match tape {
        Some(t) => net.forward_taped(input, t).map(|(y, _)| y),
        None => net.forward(input),
    }
}

/// Backward pass for the most recent forward call recorded in `tape`.
pub fn mlp_backward(net: &Mlp, tape: &mut GradTape, out_grad: &[f64]) -> Result<Vec<f64>> {
    let last = tape
        .records
        .len()
        .checked_sub(1)
        .ok_or(Error::StaleTape("tape has no recorded forward pass"))?;
    net.backward(tape, last, out_grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_net_heads() {
        let net = Mlp::zeros(vec![5, 32, 3], Head::Sigmoid);
        assert_eq!(net.forward(&[1.0; 5]).unwrap(), vec![0.5; 3]);
        let net = Mlp::zeros(vec![5, 32, 3], Head::Exp);
        assert_eq!(net.forward(&[1.0; 5]).unwrap(), vec![1.0; 3]);
        let net = Mlp::zeros(vec![5, 32, 4], Head::QuatNormalize);
        assert_eq!(net.forward(&[1.0; 5]).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_reports_both() {
        let net = Mlp::zeros(vec![5, 32, 3], Head::Identity);
        let err = net.forward(&[0.0; 4]).unwrap_err().to_string();
        assert!(err.contains('5') && err.contains('4'), "{err}");
    }

    #[test]
    fn tape_is_passive() {
        let mut r = rng();
        let net = Mlp::standard(6, 3, Head::Sigmoid, &mut r);
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut tape = GradTape::new();
        let a = mlp_forward(&net, &x, None).unwrap();
        let b = mlp_forward(&net, &x, Some(&mut tape)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_out_grad_changes_nothing() {
        let mut r = rng();
        let net = Mlp::standard(6, 3, Head::Sigmoid, &mut r);
        let mut tape = GradTape::new();
        mlp_forward(&net, &[0.3; 6], Some(&mut tape)).unwrap();
        let dx = mlp_backward(&net, &mut tape, &[0.0; 3]).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        assert!(tape.param_grad().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_affine_identity_backward_is_transpose() {
        let mut r = rng();
        let net = Mlp::new(vec![4, 3], Head::Identity, &mut r);
        let mut tape = GradTape::new();
        mlp_forward(&net, &[0.1, 0.2, 0.3, 0.4], Some(&mut tape)).unwrap();
        let g = [1.0, -2.0, 0.5];
        let dx = mlp_backward(&net, &mut tape, &g).unwrap();
        let w = &net.params()[..12];
        for i in 0..4 {
            let expect: f64 = (0..3).map(|o| w[o * 4 + i] * g[o]).sum();
            assert!((dx[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn stale_tape_detected() {
        let mut r = rng();
        let mut net = Mlp::standard(3, 2, Head::Identity, &mut r);
        let mut tape = GradTape::new();
        mlp_forward(&net, &[0.1, 0.2, 0.3], Some(&mut tape)).unwrap();
        net.params_mut()[0] += 1.0;
        assert!(matches!(
            mlp_backward(&net, &mut tape, &[1.0, 1.0]),
            Err(Error::StaleTape(_))
        ));
        let mut empty = GradTape::new();
        assert!(mlp_backward(&net, &mut empty, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn head_ranges() {
        let mut r = rng();
        for head in [Head::Sigmoid, Head::Exp, Head::QuatNormalize] {
            let out = if head == Head::QuatNormalize { 4 } else { 3 };
            let net = Mlp::new(vec![5, 8, out], head, &mut r);
            for _ in 0..200 {
                let x: Vec<f64> = (0..5).map(|_| r.random_range(-30.0..30.0)).collect();
                let y = net.forward(&x).unwrap();
                match head {
                    Head::Sigmoid => assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v))),
                    Head::Exp => assert!(y.iter().all(|&v| v >= 0.0)),
                    _ => {
                        let n: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                        assert!((n - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
