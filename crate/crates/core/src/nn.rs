//! Fully connected tanh networks with a hand-written backward pass.
//!
//! Parameters flatten layer by layer as `weight (row-major, out x in)` then
//! `bias`; every gradient buffer uses the same layout.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::num::{fingerprint, RealMat, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    weight: RealMat,
    bias: Vec<f64>,
}

impl Dense {
    pub fn new(weight: RealMat, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::dim("dense bias", weight.rows(), bias.len()));
        }
        Ok(Dense { weight, bias })
    }

    /// Weights `N(0, gain^2 / fan_in)`, biases `N(0, bias_std^2)`.
    pub fn random(input: usize, output: usize, gain: f64, bias_std: f64, rng: &mut SeededRng) -> Self {
        let weight = RealMat::random_normal(output, input, gain / libm::sqrt(input as f64), rng);
        let bias = rng.normal_vec(output, bias_std);
        Dense { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &RealMat {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.bias.len());
        self.forward_into(x, &mut out);
        out
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let cols = self.weight.cols();
        out.extend(
            self.weight
                .as_slice()
                .chunks_exact(cols)
                .zip(&self.bias)
                .map(|(row, b)| crate::num::dot(row, x) + b),
        );
    }
}

/// Activations recorded by [`Mlp::forward_trace`].
#[derive(Debug, Clone)]
pub struct MlpTrace {
    // inputs[l] is the input to layer l; inputs[len] is the network output.
    inputs: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("trace holds at least the input")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

/// Affine layers with an activation between them and another after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    hidden: Activation,
    output: Activation,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>, hidden: Activation, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("an MLP needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::dim("mlp layer chaining", w[0].output_dim(), w[1].input_dim()));
            }
        }
        Ok(Mlp {
            layers,
            hidden,
            output,
        })
    }

    /// Tanh between layers; `widths = [in, h1, ..., out]`.
    pub fn random(widths: &[usize], gain: f64, bias_std: f64, output: Activation, rng: &mut SeededRng) -> Self {
        assert!(widths.len() >= 2, "need input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| Dense::random(w[0], w[1], gain, bias_std, rng))
            .collect();
        Mlp {
            layers,
            hidden: Activation::Tanh,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    fn activated(&self, layer: usize) -> bool {
        let act = if layer + 1 < self.layers.len() {
            self.hidden
        } else {
            self.output
        };
        act == Activation::Tanh
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut next = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.forward_into(&h, &mut next);
            if self.activated(l) {
                next.iter_mut().for_each(|v| *v = libm::tanh(*v));
            }
            core::mem::swap(&mut h, &mut next);
        }
        h
    }

    pub fn forward_checked(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("mlp input", self.input_dim(), x.len()));
        }
        Ok(self.forward(x))
    }

    pub fn forward_trace(&self, x: &[f64]) -> MlpTrace {
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        inputs.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut h = layer.forward(&inputs[l]);
            if self.activated(l) {
                h.iter_mut().for_each(|v| *v = libm::tanh(*v));
            }
            inputs.push(h);
        }
        MlpTrace { inputs }
    }

    /// Backpropagates `d_out` through a recorded pass. Parameter gradients
    /// are accumulated into `param_grad` when given. Returns the input gradient.
    pub fn backward(&self, trace: &MlpTrace, d_out: &[f64], mut param_grad: Option<&mut [f64]>) -> Vec<f64> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.param_count();
        }
        let mut d = d_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if self.activated(l) {
                let y = &trace.inputs[l + 1];
                d.iter_mut().zip(y).for_each(|(g, y)| *g *= 1.0 - y * y);
            }
            if let Some(pg) = param_grad.as_deref_mut() {
                let input = &trace.inputs[l];
                let (rows, cols) = (layer.output_dim(), layer.input_dim());
                let base = offsets[l];
                for r in 0..rows {
                    let dr = d[r];
                    if dr == 0.0 {
                        continue;
                    }
                    let row = &mut pg[base + r * cols..base + (r + 1) * cols];
                    row.iter_mut().zip(input).for_each(|(g, x)| *g += dr * x);
                }
                let bias = &mut pg[base + rows * cols..base + rows * cols + rows];
                bias.iter_mut().zip(&d).for_each(|(g, v)| *g += v);
            }
            d = layer.weight.matvec_t(&d);
        }
        d
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim("mlp parameters", self.param_count(), flat.len()));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mlp parameters".into()));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let n = layer.weight.rows() * layer.weight.cols();
            layer.weight.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&flat[off..off + b]);
            off += b;
        }
        Ok(())
    }

    /// Overwrites the parameter at flat index `idx`.
    pub(crate) fn set_param(&mut self, mut idx: usize, value: f64) {
        for layer in &mut self.layers {
            let n = layer.weight.rows() * layer.weight.cols();
            if idx < n {
                layer.weight.as_mut_slice()[idx] = value;
                return;
            }
            idx -= n;
            if idx < layer.bias.len() {
                layer.bias[idx] = value;
                return;
            }
            idx -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Plain SGD: `params -= lr * grad`.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) {
        debug_assert_eq!(grad.len(), self.param_count());
        if lr == 0.0 {
            return;
        }
        let mut off = 0;
        for layer in &mut self.layers {
            for w in layer.weight.as_mut_slice() {
                *w -= lr * grad[off];
                off += 1;
            }
            for b in &mut layer.bias {
                *b -= lr * grad[off];
                off += 1;
            }
        }
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint(&self.params())
    }
}
