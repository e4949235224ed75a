//! Minimal dense feed-forward network with reverse-mode differentiation for
//! both parameters and inputs.
//!
//! Networks train with ReLU hidden layers and are swapped to the smooth
//! replacement `(x + sqrt(x^2 + eps)) / 2` at deployment so the terminal
//! cost stays continuously differentiable for the NLP solver.

use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::all_finite;

pub const NET_FORMAT_VERSION: u32 = 1;

/// Default smoothing parameter for the deployed activation; the induced
/// perturbation sqrt(eps)/2 = 5e-4 is far below lap-time scales.
pub const DEFAULT_SMOOTH_EPS: f64 = 1e-6;

pub fn smooth_relu(x: f64, eps: f64) -> f64 {
    0.5 * (x + (x * x + eps).sqrt())
}

pub fn smooth_relu_deriv(x: f64, eps: f64) -> f64 {
    0.5 * (1.0 + x / (x * x + eps).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    SmoothRelu { epsilon: f64 },
    Tanh,
    Identity,
}

impl ActivationKind {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::SmoothRelu { epsilon } => smooth_relu(x, epsilon),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Identity => x,
        }
    }

    /// Derivative at x. For ReLU the subgradient at the kink is taken as 0.
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::SmoothRelu { epsilon } => smooth_relu_deriv(x, epsilon),
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Identity => 1.0,
        }
    }
}

/// One dense layer: out x in weights (row-major), bias, activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: ActivationKind,
}

impl Layer {
    fn affine(&self, input: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for (w, x) in row.iter().zip(input) {
                *zo += w * x;
            }
        }
        z
    }
}

/// Layered dense-network parameters, together with the optional min-max
/// input normalization to [-1, 1] applied before the first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub version: u32,
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<Layer>,
    /// Per-input (lo, hi) ranges; None means inputs are fed through raw.
    pub normalization: Option<(Vec<f64>, Vec<f64>)>,
}

/// Gradients of a scalar loss with respect to every parameter, plus the
/// pullback to the (raw) input.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub d_weights: Vec<Vec<f64>>,
    pub d_bias: Vec<Vec<f64>>,
    pub d_input: Vec<f64>,
}

impl NetGrads {
    pub fn zeros_like(net: &NetParams) -> Self {
        NetGrads {
            d_weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            d_bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            d_input: vec![0.0; net.input_dim],
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.d_weights {
            for v in w {
                *v *= s;
            }
        }
        for b in &mut self.d_bias {
            for v in b {
                *v *= s;
            }
        }
        for v in &mut self.d_input {
            *v *= s;
        }
    }

    pub fn add(&mut self, other: &NetGrads) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.d_bias.iter_mut().zip(&other.d_bias) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (x, y) in self.d_input.iter_mut().zip(&other.d_input) {
            *x += y;
        }
    }
}

struct ForwardCache {
    /// Post-activation of every layer boundary; index 0 is the normalized input.
    activations: Vec<Vec<f64>>,
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
}

impl NetParams {
    /// Seeded uniform fan-in initialization: W, b ~ U(-1/sqrt(in), 1/sqrt(in)).
    pub fn seeded<R: Rng>(
        dims: &[usize],
        hidden: ActivationKind,
        output: ActivationKind,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            let scale = 1.0 / (in_dim as f64).sqrt();
            let weights = (0..in_dim * out_dim)
                .map(|_| rng.random_range(-scale..scale))
                .collect();
            let bias = (0..out_dim).map(|_| rng.random_range(-scale..scale)).collect();
            layers.push(Layer {
                in_dim,
                out_dim,
                weights,
                bias,
                activation: hidden,
            });
        }
        layers.last_mut().unwrap().activation = output;
        NetParams {
            version: NET_FORMAT_VERSION,
            input_dim: dims[0],
            output_dim: *dims.last().unwrap(),
            layers,
            normalization: None,
        }
    }

    pub fn with_normalization(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), self.input_dim);
        assert_eq!(hi.len(), self.input_dim);
        self.normalization = Some((lo, hi));
        self
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn normalize(&self, input: &[f64]) -> Vec<f64> {
        match &self.normalization {
            None => input.to_vec(),
            Some((lo, hi)) => input
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(&x, (&l, &h))| {
                    if h > l {
                        2.0 * (x - l) / (h - l) - 1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: input.len(),
                context: "network input".into(),
            });
        }
        if !all_finite(input) {
            return Err(Error::NonFinite {
                context: "network input".into(),
            });
        }
        Ok(())
    }

    fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(self.normalize(input));
        for layer in &self.layers {
            let z = layer.affine(activations.last().unwrap());
            let a = z.iter().map(|&v| layer.activation.eval(v)).collect();
            pre.push(z);
            activations.push(a);
        }
        Ok(ForwardCache { activations, pre })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(input)?;
        let out = cache.activations.last().unwrap().clone();
        if !all_finite(&out) {
            return Err(Error::NonFinite {
                context: "network output".into(),
            });
        }
        Ok(out)
    }

    /// Reverse-mode sweep from an output cotangent: gradients of
    /// `sum_i cotangent_i * output_i` with respect to every weight, bias and
    /// the raw input.
    pub fn backward(&self, input: &[f64], cotangent: &[f64]) -> Result<NetGrads> {
        if cotangent.len() != self.output_dim {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim,
                got: cotangent.len(),
                context: "output cotangent".into(),
            });
        }
        let cache = self.forward_cached(input)?;
        let mut grads = NetGrads::zeros_like(self);
        let mut v = cotangent.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre[l];
            let a_in = &cache.activations[l];
            // dz = v ⊙ σ'(z)
            let dz: Vec<f64> = v
                .iter()
                .zip(z)
                .map(|(&vi, &zi)| vi * layer.activation.derivative(zi))
                .collect();
            for (o, &dzo) in dz.iter().enumerate() {
                grads.d_bias[l][o] = dzo;
                let row = &mut grads.d_weights[l][o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, &x) in row.iter_mut().zip(a_in) {
                    *g = dzo * x;
                }
            }
            // v = W^T dz
            let mut next_v = vec![0.0; layer.in_dim];
            for (o, &dzo) in dz.iter().enumerate() {
                if dzo == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (nv, &w) in next_v.iter_mut().zip(row) {
                    *nv += dzo * w;
                }
            }
            v = next_v;
        }
        // chain through min-max normalization back to the raw input
        grads.d_input = match &self.normalization {
            None => v,
            Some((lo, hi)) => v
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(&g, (&l, &h))| if h > l { g * 2.0 / (h - l) } else { 0.0 })
                .collect(),
        };
        Ok(grads)
    }

    /// Gradient of one selected output with respect to the raw input.
    pub fn input_gradient(&self, input: &[f64], output_index: usize) -> Result<Vec<f64>> {
        if output_index >= self.output_dim {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim,
                got: output_index,
                context: "output index".into(),
            });
        }
        let mut cot = vec![0.0; self.output_dim];
        cot[output_index] = 1.0;
        Ok(self.backward(input, &cot)?.d_input)
    }

    /// Replace every hidden activation of kind `from` with `to`; parameters
    /// are untouched. Errors if no layer carries the `from` activation.
    pub fn swap_activation(&self, from: ActivationKind, to: ActivationKind) -> Result<NetParams> {
        let tag = |a: &ActivationKind| std::mem::discriminant(a);
        let mut swapped = self.clone();
        let mut n = 0;
        for layer in &mut swapped.layers {
            if tag(&layer.activation) == tag(&from) {
                layer.activation = to;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::NoSwappableLayer {
                expected: match from {
                    ActivationKind::Relu => "relu",
                    ActivationKind::SmoothRelu { .. } => "smooth_relu",
                    ActivationKind::Tanh => "tanh",
                    ActivationKind::Identity => "identity",
                },
            });
        }
        Ok(swapped)
    }

    /// Versioned JSON checkpoint; f64 values survive the round trip bit-exactly.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("net serialization")
    }

    pub fn from_json(text: &str) -> Result<NetParams> {
        let net: NetParams =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if net.version != NET_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported net format version {} (expected {})",
                net.version, NET_FORMAT_VERSION
            )));
        }
        Ok(net)
    }
}

/// In-place Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(net: &NetParams, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m_w: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            v_w: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            m_b: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            v_b: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut NetParams, grads: &NetGrads) {
        if self.lr == 0.0 {
            return;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            Self::update(
                &mut layer.weights,
                &grads.d_weights[l],
                &mut self.m_w[l],
                &mut self.v_w[l],
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                bc1,
                bc2,
            );
            Self::update(
                &mut layer.bias,
                &grads.d_bias[l],
                &mut self.m_b[l],
                &mut self.v_b[l],
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                bc1,
                bc2,
            );
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn update(
        params: &mut [f64],
        grads: &[f64],
        m: &mut [f64],
        v: &mut [f64],
        lr: f64,
        b1: f64,
        b2: f64,
        eps: f64,
        bc1: f64,
        bc2: f64,
    ) {
        for i in 0..params.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grads[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grads[i] * grads[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Polyak averaging: target <- tau * online + (1 - tau) * target.
pub fn soft_update(target: &mut NetParams, online: &NetParams, tau: f64) {
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        for (tw, ow) in t.weights.iter_mut().zip(&o.weights) {
            *tw = tau * ow + (1.0 - tau) * *tw;
        }
        for (tb, ob) in t.bias.iter_mut().zip(&o.bias) {
            *tb = tau * ob + (1.0 - tau) * *tb;
        }
    }
}
