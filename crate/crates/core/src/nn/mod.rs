//! Dense feed-forward networks with exact analytic gradients.
//!
//! Weights of layer `l` are stored row-major with shape
//! `(dims[l + 1], dims[l])`. Hidden layers apply the configured activation;
//! the output layer is linear. Two loss heads are provided: a weighted
//! softmax cross-entropy for categorical policies and a scalar head that
//! backpropagates an externally supplied upstream derivative.

mod adam;
mod checkpoint;
mod gradcheck;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{gradient_check, GradCheckReport};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y` and input `z`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

/// Gradients shape-matched to an [`MlpNet`], plus the loss they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub loss: f64,
}

/// Intermediate values of one forward pass.
struct Trace {
    /// `acts[0]` is the input; `acts[l]` the output of hidden layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of every layer, the last one being the network output.
    pre: Vec<Vec<f64>>,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument(
            "a network needs at least an input and an output layer".into(),
        ));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer sizes must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

impl MlpNet {
    /// All-zero network.
    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        check_dims(dims)?;
        let weights = dims.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect();
        let biases = dims[1..].iter().map(|&d| vec![0.0; d]).collect();
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims, activation)?;
        for (l, w) in net.weights.iter_mut().enumerate() {
            let (fan_in, fan_out) = (dims[l] as f64, dims[l + 1] as f64);
            let s = (6.0 / (fan_in + fan_out)).sqrt();
            for x in w.iter_mut() {
                *x = rng.random_range(-s..=s);
            }
        }
        Ok(net)
    }

    /// Builds a network from explicit parameters.
    pub fn from_parts(
        dims: &[usize],
        activation: Activation,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_dims(dims)?;
        if weights.len() != dims.len() - 1 || biases.len() != dims.len() - 1 {
            return Err(Error::InvalidArgument("layer count mismatch".into()));
        }
        for l in 0..weights.len() {
            if weights[l].len() != dims[l] * dims[l + 1] {
                return Err(Error::Shape {
                    expected: dims[l] * dims[l + 1],
                    got: weights[l].len(),
                });
            }
            if biases[l].len() != dims[l + 1] {
                return Err(Error::Shape {
                    expected: dims[l + 1],
                    got: biases[l].len(),
                });
            }
        }
        let net = Self {
            dims: dims.to_vec(),
            weights,
            biases,
            activation,
        };
        if let Some(layer) = net.first_non_finite_layer() {
            return Err(Error::NonFinite {
                layer,
                context: "parameters".into(),
            });
        }
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.weights[layer]
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Every parameter, layer by layer: weights then biases.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    /// Mutable counterpart of [`MlpNet::params`], same order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    /// Parameter at flat index `i` in [`MlpNet::params`] order.
    pub fn param_mut(&mut self, mut i: usize) -> Option<&mut f64> {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            if i < w.len() {
                return Some(&mut w[i]);
            }
            i -= w.len();
            if i < b.len() {
                return Some(&mut b[i]);
            }
            i -= b.len();
        }
        None
    }

    fn first_non_finite_layer(&self) -> Option<usize> {
        (0..self.weights.len()).find(|&l| {
            self.weights[l].iter().any(|x| !x.is_finite())
                || self.biases[l].iter().any(|x| !x.is_finite())
        })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims[0] {
            return Err(Error::Shape {
                expected: self.dims[0],
                got: x.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let n = self.weights.len();
        let mut acts = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        acts.push(x.to_vec());
        for l in 0..n {
            let input = acts.last().unwrap();
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let w = &self.weights[l];
            let mut z = self.biases[l].clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * din..(o + 1) * din];
                *zo += dot(row, input);
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: l,
                    context: "forward pre-activation".into(),
                });
            }
            debug_assert_eq!(z.len(), dout);
            if l + 1 < n {
                acts.push(z.iter().map(|&v| self.activation.apply(v)).collect());
            }
            pre.push(z);
        }
        Ok(Trace { acts, pre })
    }

    /// Output-layer pre-activations.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.pre.pop().unwrap())
    }

    /// Accumulates `d(output)` backwards into `grads`.
    fn backward(&self, trace: &Trace, mut delta: Vec<f64>, grads: &mut GradBundle) -> Result<()> {
        for l in (0..self.weights.len()).rev() {
            let din = self.dims[l];
            let input = &trace.acts[l];
            let gw = &mut grads.weights[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (g, &a) in gw[o * din..(o + 1) * din].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            for (g, &d) in grads.biases[l].iter_mut().zip(&delta) {
                *g += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.weights[l];
            let mut prev = vec![0.0; din];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &wv) in prev.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                    *p += d * wv;
                }
            }
            for (i, p) in prev.iter_mut().enumerate() {
                *p *= self
                    .activation
                    .derivative(trace.pre[l - 1][i], trace.acts[l][i]);
            }
            if prev.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: l - 1,
                    context: "backward delta".into(),
                });
            }
            delta = prev;
        }
        Ok(())
    }

    /// Adds the gradient of `weight * -log softmax(forward(x))[target]` into
    /// `grads` and returns that loss.
    pub fn accumulate_ce(
        &self,
        x: &[f64],
        target: usize,
        weight: f64,
        grads: &mut GradBundle,
    ) -> Result<f64> {
        let out = self.output_dim();
        if target >= out {
            return Err(Error::InvalidArgument(format!(
                "target class {target} out of range for {out} outputs"
            )));
        }
        if !weight.is_finite() {
            return Err(Error::NonFinite {
                layer: self.num_layers() - 1,
                context: "loss weight".into(),
            });
        }
        let trace = self.trace(x)?;
        let logits = trace.pre.last().unwrap();
        if weight == 0.0 {
            return Ok(0.0);
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut delta: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = delta.iter().sum();
        let nll = m + s.ln() - logits[target];
        let scale = weight / s;
        delta.iter_mut().for_each(|v| *v *= scale);
        delta[target] -= weight;
        self.backward(&trace, delta, grads)?;
        let loss = weight * nll;
        grads.loss += loss;
        Ok(loss)
    }

    /// Weighted cross-entropy loss and its exact gradient for one sample.
    pub fn loss_and_grad_ce(&self, x: &[f64], target_class: usize, weight: f64) -> Result<GradBundle> {
        let mut g = GradBundle::zeros_like(self);
        self.accumulate_ce(x, target_class, weight, &mut g)?;
        Ok(g)
    }

    /// Adds `upstream * dT(x)/dparams` into `grads`, returning `T(x)`.
    pub fn accumulate_scalar(&self, x: &[f64], upstream: f64, grads: &mut GradBundle) -> Result<f64> {
        if self.output_dim() != 1 {
            return Err(Error::Shape {
                expected: 1,
                got: self.output_dim(),
            });
        }
        if !upstream.is_finite() {
            return Err(Error::NonFinite {
                layer: self.num_layers() - 1,
                context: "upstream derivative".into(),
            });
        }
        let trace = self.trace(x)?;
        let t = trace.pre.last().unwrap()[0];
        if upstream != 0.0 {
            self.backward(&trace, vec![upstream], grads)?;
        }
        grads.loss += upstream * t;
        Ok(t)
    }

    /// Gradient of a scalar-output network scaled by `upstream`.
    ///
    /// The bundle's `loss` is `upstream * T(x)`, whose gradient this is.
    pub fn loss_and_grad_scalar(&self, x: &[f64], upstream: f64) -> Result<GradBundle> {
        let mut g = GradBundle::zeros_like(self);
        self.accumulate_scalar(x, upstream, &mut g)?;
        Ok(g)
    }

    pub(crate) fn ensure_finite(&self) -> Result<()> {
        match self.first_non_finite_layer() {
            Some(layer) => Err(Error::NonFinite {
                layer,
                context: "parameters".into(),
            }),
            None => Ok(()),
        }
    }
}

impl GradBundle {
    pub fn zeros_like(net: &MlpNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            loss: 0.0,
        }
    }

    pub fn reset(&mut self) {
        self.values_mut().for_each(|g| *g = 0.0);
        self.loss = 0.0;
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|g| *g *= s);
        self.loss *= s;
    }

    pub fn add_assign(&mut self, other: &GradBundle) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
        self.loss += other.loss;
    }

    pub fn is_conformant(&self, net: &MlpNet) -> bool {
        self.weights.len() == net.weights.len()
            && self.biases.len() == net.biases.len()
            && self.weights.iter().zip(&net.weights).all(|(a, b)| a.len() == b.len())
            && self.biases.iter().zip(&net.biases).all(|(a, b)| a.len() == b.len())
    }

    pub fn first_non_finite_layer(&self) -> Option<usize> {
        (0..self.weights.len()).find(|&l| {
            self.weights[l].iter().any(|x| !x.is_finite())
                || self.biases[l].iter().any(|x| !x.is_finite())
        })
    }
}

/// Numerically stable `log Σ exp(x)`.
/// Dot product with four independent accumulators, summed in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log((1/n) Σ exp(x))`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}
