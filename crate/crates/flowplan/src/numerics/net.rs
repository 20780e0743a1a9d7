//! Dense feed-forward networks with hand-rolled reverse-mode gradients.
//!
//! The only activations are `tanh` and identity, which keeps the backward
//! pass short and exactly checkable against central finite differences.
//! `backprop` differentiates the scalar `<upstream, net(input)>`, returning
//! both parameter gradients and the input gradient; losses are expressed by
//! choosing `upstream` appropriately.

use super::vec::all_finite;
use crate::error::{FlowError, Result};
use crate::numerics::rng::SeededRng;
use serde::{Deserialize, Serialize};

/// Layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y = act(x)`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer. Weights are row-major `(out_dim, in_dim)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn forward(&self, input: &[f64], pre: &mut Vec<f64>, out: &mut Vec<f64>) {
        pre.clear();
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            pre.push(acc);
            out.push(self.activation.apply(acc));
        }
    }
}

/// Fully connected network: a stack of `Layer`s.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

impl DenseNet {
    /// Network with the given layer sizes and activations, all parameters zero.
    ///
    /// `dims` has one more entry than `activations`.
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(FlowError::Config(format!(
                "layer spec mismatch: {} dims, {} activations",
                dims.len(),
                activations.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(FlowError::Config("zero-width layer".into()));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| Layer {
                in_dim: w[0],
                out_dim: w[1],
                weights: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
                activation,
            })
            .collect();
        Ok(DenseNet { layers })
    }

    /// Random init: weights ~ N(0, (scale / sqrt(in_dim))^2), biases zero.
    pub fn random(
        dims: &[usize],
        activations: &[Activation],
        scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut net = DenseNet::zeros(dims, activations)?;
        for layer in &mut net.layers {
            let sd = scale / (layer.in_dim as f64).sqrt();
            for w in &mut layer.weights {
                *w = sd * rng.normal();
            }
        }
        Ok(net)
    }

    /// Single identity-activation layer initialized to the identity matrix.
    pub fn identity_linear(d: usize) -> Result<Self> {
        let mut net = DenseNet::zeros(&[d, d], &[Activation::Identity])?;
        for i in 0..d {
            net.layers[0].weights[i * d + i] = 1.0;
        }
        Ok(net)
    }

    /// Standard two-hidden-layer tanh body with a linear head.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let mut acts = vec![Activation::Tanh; hidden.len()];
        acts.push(Activation::Identity);
        DenseNet::random(&dims, &acts, scale, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }


    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(FlowError::shape(format!(
                "net expects input width {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }

    /// Forward pass.
    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        let mut pre = Vec::new();
        let mut out = Vec::new();
        for layer in &self.layers {
            layer.forward(&cur, &mut pre, &mut out);
            std::mem::swap(&mut cur, &mut out);
        }
        Ok(cur)
    }

    /// Gradients of `<upstream, net(input)>` w.r.t. parameters and input.
    pub fn backprop(&self, input: &[f64], upstream: &[f64]) -> Result<(GradientTape, Vec<f64>)> {
        let mut tape = GradientTape::zeros_like(self);
        let input_grad = self.backprop_acc(input, upstream, &mut tape, 1.0)?;
        Ok((tape, input_grad))
    }

    /// Like `backprop` but accumulates `scale *` gradients into `tape`.
    ///
    /// Returns the (scaled) input gradient. This is the workhorse used by
    /// the training loop so one tape can aggregate a whole batch.
    pub fn backprop_acc(
        &self,
        input: &[f64],
        upstream: &[f64],
        tape: &mut GradientTape,
        scale: f64,
    ) -> Result<Vec<f64>> {
        self.check_input(input)?;
        if upstream.len() != self.output_dim() {
            return Err(FlowError::shape(format!(
                "upstream width {} != output width {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if tape.layers.len() != self.layers.len() {
            return Err(FlowError::shape("tape does not match net"));
        }

        // Forward, keeping every layer's input and activated output.
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut cur = input.to_vec();
        let mut pre = Vec::new();
        let mut out = Vec::new();
        for layer in &self.layers {
            inputs.push(cur.clone());
            layer.forward(&cur, &mut pre, &mut out);
            std::mem::swap(&mut cur, &mut out);
        }

        // Backward: delta starts as upstream composed with the last activation.
        let mut delta = upstream.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let layer_in = &inputs[li];
            // Outputs of this layer: recompute activation outputs from input.
            // For the last layer `cur` holds them; for inner layers the next
            // layer's stored input does.
            let layer_out: &[f64] = if li + 1 < self.layers.len() {
                &inputs[li + 1]
            } else {
                &cur
            };
            for o in 0..layer.out_dim {
                delta[o] *= layer.activation.derivative_from_output(layer_out[o]);
            }
            let grads = &mut tape.layers[li];
            let mut next_delta = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let d = delta[o];
                grads.bias[o] += scale * d;
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                let grow = &mut grads.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for i in 0..layer.in_dim {
                    grow[i] += scale * d * layer_in[i];
                    next_delta[i] += d * row[i];
                }
            }
            delta = next_delta;
        }
        if scale != 1.0 {
            for g in &mut delta {
                *g *= scale;
            }
        }
        Ok(delta)
    }

    /// Flat view of all parameters, layer by layer (weights then bias).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Overwrites all parameters from a flat slice (inverse of `flatten_params`).
    pub fn load_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(FlowError::shape(format!(
                "expected {} params, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let wn = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + wn]);
            at += wn;
            let bn = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + bn]);
            at += bn;
        }
        Ok(())
    }
}

/// Per-parameter gradient accumulator, shape-congruent with one `DenseNet`.
#[derive(Debug, Clone)]
pub struct GradientTape {
    pub layers: Vec<LayerGrads>,
}

/// Gradients for one layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl GradientTape {
    pub fn zeros_like(net: &DenseNet) -> Self {
        GradientTape {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|g| *g = 0.0);
            l.bias.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &GradientTape, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += s * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += s * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| all_finite(&l.weights) && all_finite(&l.bias))
    }

    /// Flat view matching `DenseNet::flatten_params` order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.weights.iter().map(|g| g * g).sum::<f64>()
                    + l.bias.iter().map(|g| g * g).sum::<f64>()
            })
            .sum()
    }
}

/// Central finite-difference check of an analytic gradient.
///
/// `loss` must be a deterministic function of the network parameters.
/// Returns the maximum over parameters of
/// `|analytic - central_difference| / (|central_difference| + 1e-12)`.
pub fn finite_diff_check(
    mut loss: impl FnMut(&DenseNet) -> Result<f64>,
    analytic: &GradientTape,
    net: &DenseNet,
    step: f64,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(FlowError::input("finite-difference step must be positive"));
    }
    let flat_analytic = analytic.flatten();
    let base = net.flatten_params();
    if flat_analytic.len() != base.len() {
        return Err(FlowError::shape("tape/net parameter count mismatch"));
    }
    let mut probe = net.clone();
    let mut worst = 0.0_f64;
    for (idx, analytic_g) in flat_analytic.iter().enumerate() {
        let mut params = base.clone();
        params[idx] = base[idx] + step;
        probe.load_params(&params)?;
        let up = loss(&probe)?;
        params[idx] = base[idx] - step;
        probe.load_params(&params)?;
        let down = loss(&probe)?;
        let fd = (up - down) / (2.0 * step);
        let rel = (analytic_g - fd).abs() / (fd.abs() + 1e-12);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
