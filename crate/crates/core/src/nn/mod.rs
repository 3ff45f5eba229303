//! Small fully connected networks trained with Adam.
//!
//! Hidden layers use rectified-linear activations; the output layer is
//! linear. Two losses are supported: softmax cross-entropy over the outputs
//! (expert action classification) and squared error on a single selected
//! output slot (Q-value regression).

mod adam;
mod checkpoint;
mod train;

use std::borrow::Borrow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::ActionId;
use crate::{Error, Result};

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, MLP_FORMAT};
pub use train::{fit, mean_loss, FitReport, TrainConfig};

/// One affine layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { inputs, outputs, weights: vec![0.0; inputs * outputs], biases: vec![0.0; outputs] }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.biases)
                .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b),
        );
    }
}

/// Network parameters (θ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::invalid("layer_dims", "need at least an input and an output dimension"));
    }
    if dims.contains(&0) {
        return Err(Error::invalid("layer_dims", "every dimension must be positive"));
    }
    Ok(())
}

/// Weights uniform in ±1/√fan_in, biases zero.
pub fn init_mlp(layer_dims: &[usize], seed: u64) -> Result<MlpParams> {
    check_dims(layer_dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_dims
        .windows(2)
        .map(|w| {
            let mut layer = Dense::zeros(w[0], w[1]);
            let bound = 1.0 / (w[0] as f64).sqrt();
            for v in &mut layer.weights {
                *v = rng.random_range(-bound..bound);
            }
            layer
        })
        .collect();
    Ok(MlpParams { layers })
}

impl MlpParams {
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        check_dims(layer_dims)?;
        Ok(MlpParams { layers: layer_dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() })
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams { layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect() }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layer_dims() == other.layer_dims()
    }

    /// All parameters in a fixed order (per layer: weights, then biases).
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Pre-activations per layer; index 0 holds the input itself.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(x.to_vec());
        let mut act = x.to_vec();
        for layer in &self.layers {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.apply(&act, &mut z);
            act = z.iter().map(|v| v.max(0.0)).collect();
            trace.push(z);
        }
        trace
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    SoftmaxCrossEntropy,
    SquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Target {
    /// Class label for the cross-entropy head.
    Class(ActionId),
    /// Regression target for one output slot under the squared-error head.
    Value { action: ActionId, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub target: Target,
}

impl Example {
    pub fn class(x: Vec<f64>, class: ActionId) -> Self {
        Example { x, target: Target::Class(class) }
    }

    pub fn value(x: Vec<f64>, action: ActionId, value: f64) -> Self {
        Example { x, target: Target::Value { action, value } }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Loss and d(loss)/d(output) for a single example.
fn output_loss(out: &[f64], target: Target, head: Head) -> Result<(f64, Vec<f64>)> {
    let k = out.len();
    match (head, target) {
        (Head::SoftmaxCrossEntropy, Target::Class(c)) => {
            if c >= k {
                return Err(Error::invalid("target", format!("class {c} outside {k} outputs")));
            }
            let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + out.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let mut d = softmax(out);
            d[c] -= 1.0;
            Ok((lse - out[c], d))
        }
        (Head::SquaredError, Target::Value { action, value }) => {
            if action >= k {
                return Err(Error::invalid("target", format!("action {action} outside {k} outputs")));
            }
            if !value.is_finite() {
                return Err(Error::invalid("target", "regression target must be finite"));
            }
            let err = out[action] - value;
            let mut d = vec![0.0; k];
            d[action] = 2.0 * err;
            Ok((err * err, d))
        }
        (head, target) => Err(Error::invalid("target", format!("{target:?} does not fit head {head:?}"))),
    }
}

/// Batch-mean loss and its exact gradient with respect to every parameter.
pub fn loss_and_grad<B: Borrow<Example>>(params: &MlpParams, batch: &[B], head: Head) -> Result<(f64, MlpParams)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut grad = params.zeros_like();
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        let ex = ex.borrow();
        params.check_input(&ex.x)?;
        let trace = params.forward_trace(&ex.x);
        let (loss, mut delta) = output_loss(trace.last().expect("output layer"), ex.target, head)?;
        total += loss;
        for (l, layer) in params.layers.iter().enumerate().rev() {
            let z_in = &trace[l];
            let g = &mut grad.layers[l];
            // Input activations of layer l: raw input for l = 0, else relu(z).
            let act: Vec<f64> = if l == 0 { z_in.clone() } else { z_in.iter().map(|v| v.max(0.0)).collect() };
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let ds = d * scale;
                g.biases[o] += ds;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, a) in row.iter_mut().zip(&act) {
                    *w += ds * a;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += w * d;
                    }
                }
                for (p, z) in prev.iter_mut().zip(z_in) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }
    Ok((total * scale, grad))
}
