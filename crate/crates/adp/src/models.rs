//! Dense networks with exact reverse-mode gradients.
//!
//! One `MlpModel` type serves both roles in the defended pipeline: the score
//! network maps `D -> D` and the classifier maps `D -> K`. Hidden layers use
//! a smooth activation (tanh by default) so input gradients, parameter
//! gradients, and finite-difference probes of the score field are
//! well-defined everywhere; the output layer is linear. All arithmetic is
//! 64-bit.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::numerics::RngStream;
use crate::{Error, Result};

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            // max(z,0) + ln(1+exp(-|z|)) avoids overflow on both tails
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

/// Layer widths plus the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape(format!(
                "spec needs at least input and output widths, got {dims:?}"
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-width layer in {dims:?}")));
        }
        Ok(MlpSpec { dims, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.dims
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }
}

/// Per-layer weight and bias gradients, shaped like the model parameters.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(model: &MlpModel) -> Self {
        MlpGrads {
            weights: model
                .weights
                .iter()
                .map(|w| Array2::zeros(w.raw_dim()))
                .collect(),
            biases: model
                .biases
                .iter()
                .map(|b| Array1::zeros(b.raw_dim()))
                .collect(),
        }
    }

    /// `self += scale * other`, layer by layer.
    pub fn scaled_add(&mut self, scale: f64, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.scaled_add(scale, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.scaled_add(scale, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * s);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * s);
        }
    }
}

/// A dense network: immutable after construction, safe to share read-only
/// across tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    spec: MlpSpec,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

impl MlpModel {
    /// Seeded Glorot-uniform initialization, zero biases.
    pub fn init(spec: MlpSpec, rng: &mut RngStream) -> Self {
        let mut weights = Vec::with_capacity(spec.layer_count());
        let mut biases = Vec::with_capacity(spec.layer_count());
        for w in spec.dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                rng.next_range(-bound, bound)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        MlpModel {
            spec,
            weights,
            biases,
        }
    }

    pub fn from_parts(
        spec: MlpSpec,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        if weights.len() != spec.layer_count() || biases.len() != spec.layer_count() {
            return Err(Error::Shape(format!(
                "expected {} layers, got {} weight / {} bias arrays",
                spec.layer_count(),
                weights.len(),
                biases.len()
            )));
        }
        for (i, w) in spec.dims.windows(2).enumerate() {
            if weights[i].dim() != (w[1], w[0]) || biases[i].len() != w[1] {
                return Err(Error::Shape(format!(
                    "layer {i}: expected {}x{} weights and {} biases, got {:?} and {}",
                    w[1],
                    w[0],
                    w[1],
                    weights[i].dim(),
                    biases[i].len()
                )));
            }
        }
        let finite = weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && biases.iter().all(|b| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Domain("non-finite model parameter".into()));
        }
        Ok(MlpModel {
            spec,
            weights,
            biases,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    fn check_input(&self, x: &Array1<f64>) -> Result<()> {
        if x.len() != self.spec.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} entries, model expects {}",
                x.len(),
                self.spec.input_dim()
            )));
        }
        Ok(())
    }

    fn check_upstream(&self, u: &Array1<f64>) -> Result<()> {
        if u.len() != self.spec.output_dim() {
            return Err(Error::Shape(format!(
                "upstream has {} entries, model outputs {}",
                u.len(),
                self.spec.output_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass.
    pub fn forward(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        self.check_input(x)?;
        let mut a = x.clone();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.dot(&a) + b;
            if i < last {
                z.mapv_inplace(|v| self.spec.activation.apply(v));
            }
            a = z;
        }
        Ok(a)
    }

    /// Forward pass keeping layer inputs and pre-activations for backprop.
    fn forward_trace(&self, x: &Array1<f64>) -> (Vec<Array1<f64>>, Vec<Array1<f64>>) {
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut a = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            inputs.push(a.clone());
            let z = w.dot(&a) + b;
            pre.push(z.clone());
            a = if i < last {
                z.mapv(|v| self.spec.activation.apply(v))
            } else {
                z
            };
        }
        (inputs, pre)
    }

    /// Reverse-mode pass: gradients of `upstream . f(x)` with respect to all
    /// parameters, plus the input gradient `J^T upstream`.
    pub fn backward(&self, x: &Array1<f64>, upstream: &Array1<f64>) -> Result<(MlpGrads, Array1<f64>)> {
        self.check_input(x)?;
        self.check_upstream(upstream)?;
        let (inputs, pre) = self.forward_trace(x);
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta = upstream.clone();
        for i in (0..self.weights.len()).rev() {
            // delta is d(loss)/d(pre-activation of layer i)
            grads.weights[i] = delta
                .view()
                .insert_axis(Axis(1))
                .dot(&inputs[i].view().insert_axis(Axis(0)));
            grads.biases[i] = delta.clone();
            let mut back = self.weights[i].t().dot(&delta);
            if i > 0 {
                back.zip_mut_with(&pre[i - 1], |d, &z| {
                    *d *= self.spec.activation.derivative(z)
                });
            }
            delta = back;
        }
        Ok((grads, delta))
    }

    /// `J^T upstream` where `J` is the Jacobian of the forward map at `x`.
    pub fn input_grad(&self, x: &Array1<f64>, upstream: &Array1<f64>) -> Result<Array1<f64>> {
        self.check_input(x)?;
        self.check_upstream(upstream)?;
        let last = self.weights.len() - 1;
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut a = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = w.dot(&a) + b;
            pre.push(z.clone());
            a = if i < last {
                z.mapv(|v| self.spec.activation.apply(v))
            } else {
                z
            };
        }
        let mut delta = upstream.clone();
        for i in (0..self.weights.len()).rev() {
            let mut back = self.weights[i].t().dot(&delta);
            if i > 0 {
                back.zip_mut_with(&pre[i - 1], |d, &z| {
                    *d *= self.spec.activation.derivative(z)
                });
            }
            delta = back;
        }
        Ok(delta)
    }

    /// Parameter gradients of `upstream . f(x)`.
    pub fn param_grad(&self, x: &Array1<f64>, upstream: &Array1<f64>) -> Result<MlpGrads> {
        Ok(self.backward(x, upstream)?.0)
    }

    /// Flattened parameters, layer-major: weights then bias per layer,
    /// weights in row-major order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.spec.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    /// Inverse of [`flatten_params`](Self::flatten_params).
    pub fn from_flat(spec: MlpSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                spec.param_count(),
                flat.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut pos = 0;
        for w in spec.dims.windows(2) {
            let (rows, cols) = (w[1], w[0]);
            let wslice = &flat[pos..pos + rows * cols];
            weights.push(Array2::from_shape_vec((rows, cols), wslice.to_vec()).expect("shape"));
            pos += rows * cols;
            biases.push(Array1::from(flat[pos..pos + rows].to_vec()));
            pos += rows;
        }
        Self::from_parts(spec, weights, biases)
    }

    /// In-place parameter update; used by the optimizer.
    pub(crate) fn apply_update(&mut self, f: impl Fn(usize, bool, usize, f64) -> f64) {
        for (li, w) in self.weights.iter_mut().enumerate() {
            for (pi, v) in w.iter_mut().enumerate() {
                *v = f(li, true, pi, *v);
            }
        }
        for (li, b) in self.biases.iter_mut().enumerate() {
            for (pi, v) in b.iter_mut().enumerate() {
                *v = f(li, false, pi, *v);
            }
        }
    }
}

/// Noise-conditioned score: the raw network output scaled by `1/sigma`.
/// Trained score networks have output norm roughly proportional to the
/// reciprocal noise level, so a single unconditional network serves every
/// level through this scaling.
pub fn score(model: &MlpModel, x: &Array1<f64>, sigma: f64) -> Result<Array1<f64>> {
    if sigma <= 0.0 {
        return Err(Error::Domain(format!(
            "score noise level must be positive, got {sigma}"
        )));
    }
    Ok(model.forward(x)? / sigma)
}

/// Closure form of [`score`] with the level validated once; panics inside
/// the closure only on input-dimension misuse.
pub fn conditioned_score(
    model: &MlpModel,
    sigma: f64,
) -> Result<impl Fn(&Array1<f64>) -> Array1<f64> + '_> {
    if sigma <= 0.0 {
        return Err(Error::Domain(format!(
            "score noise level must be positive, got {sigma}"
        )));
    }
    Ok(move |x: &Array1<f64>| model.forward(x).expect("score input dimension") / sigma)
}

/// Numerically stable softmax.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Index of the largest entry; ties break to the lowest index.
pub fn argmax(values: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy loss and its logit gradient `softmax(z) - onehot(label)`.
pub fn softmax_cross_entropy(logits: &Array1<f64>, label: usize) -> Result<(f64, Array1<f64>)> {
    if label >= logits.len() {
        return Err(Error::Index(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted = logits.mapv(|v| v - max);
    let log_sum = shifted.mapv(f64::exp).sum().ln();
    let loss = log_sum - shifted[label];
    let mut dlogits = shifted.mapv(|v| (v - log_sum).exp());
    dlogits[label] -= 1.0;
    Ok((loss, dlogits))
}
