//! A small dense network engine: tanh hidden layers, identity output,
//! exact backpropagation and Adam. Batches are stored column-wise
//! (`features × samples`).

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One affine layer, `weights` is `out × in`. Also used as the gradient
/// container of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weights: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
        }
    }

    fn zeros_like(other: &Dense) -> Self {
        Dense::zeros(other.weights.ncols(), other.weights.nrows())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    /// Bumped on every parameter change; ties forward caches to the
    /// parameters they were computed with.
    version: u64,
}

/// Intermediate activations of one forward pass, needed by
/// [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<DMatrix<f64>>,
    version: u64,
}

impl ForwardCache {
    /// Network outputs, one column per sample.
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("at least the input")
    }
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            layers: net.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.norm_squared() + l.bias.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }

    /// Flattened in the same order as [`Mlp::parameters`].
    pub fn to_vec(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        for r in 0..l.weights.nrows() {
            out.extend(l.weights.row(r).iter());
        }
        out.extend(l.bias.iter());
    }
    out
}

impl Mlp {
    /// Network with all parameters zero.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer dimensions must have at least an input and an output, all positive: {layer_dims:?}"
            )));
        }
        Ok(Mlp {
            layers: layer_dims
                .windows(2)
                .map(|w| Dense::zeros(w[0], w[1]))
                .collect(),
            version: 0,
        })
    }

    /// Orthogonal weight initialization with zero biases. Hidden layers are
    /// scaled by `hidden_gain`, the output layer by `output_gain`.
    pub fn orthogonal<R: Rng + ?Sized>(
        layer_dims: &[usize],
        hidden_gain: f64,
        output_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Mlp::zeros(layer_dims)?;
        let last = net.layers.len() - 1;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let gain = if i == last { output_gain } else { hidden_gain };
            layer.weights = orthogonal_matrix(layer.weights.nrows(), layer.weights.ncols(), rng) * gain;
        }
        Ok(net)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].weights.nrows() != w[1].weights.ncols() {
                return Err(Error::DimensionMismatch {
                    expected: w[0].weights.nrows(),
                    got: w[1].weights.ncols(),
                });
            }
        }
        if layers.iter().any(|l| l.bias.len() != l.weights.nrows()) {
            return Err(Error::Config("bias length must equal layer output size".into()));
        }
        Ok(Mlp { layers, version: 0 })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weights.ncols()];
        dims.extend(self.layers.iter().map(|l| l.weights.nrows()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weights.nrows()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// All parameters, layer by layer: weights row-major, then biases.
    pub fn parameters(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::DimensionMismatch {
                expected: self.num_parameters(),
                got: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for r in 0..l.weights.nrows() {
                for c in 0..l.weights.ncols() {
                    l.weights[(r, c)] = it.next().expect("length checked");
                }
            }
            for b in l.bias.iter_mut() {
                *b = it.next().expect("length checked");
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Forward pass over a batch (`input_dim × samples`).
    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> Result<ForwardCache> {
        if inputs.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: inputs.nrows(),
            });
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weights * activations.last().expect("non-empty");
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            if i != last {
                z.apply(|v| *v = v.tanh());
            }
            activations.push(z);
        }
        Ok(ForwardCache {
            activations,
            version: self.version,
        })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        Ok(self.forward_batch(&x)?.output().column(0).iter().copied().collect())
    }

    /// Gradients of `Σ_samples ⟨output_grad, output⟩`, i.e. of the scalar
    /// loss whose derivative with respect to the outputs is `output_grad`.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &DMatrix<f64>) -> Result<Gradients> {
        if cache.version != self.version {
            return Err(Error::StaleCache);
        }
        let out = cache.output();
        if output_grad.shape() != out.shape() {
            return Err(Error::DimensionMismatch {
                expected: out.len(),
                got: output_grad.len(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = output_grad.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[i];
            let weights = &delta * input.transpose();
            let bias = delta.column_sum();
            if i > 0 {
                let mut back = layer.weights.tr_mul(&delta);
                back.zip_apply(input, |d, a| *d *= 1.0 - a * a);
                delta = back;
            }
            grads.push(Dense { weights, bias });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }
}

fn orthogonal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for (k, mut col) in q.column_iter_mut().enumerate() {
        if r[(k, k)] < 0.0 {
            col.neg_mut();
        }
    }
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip applied before the update.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_grad_norm: Some(0.5),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Gradients,
    second: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `net` from `grads`. Returns the
    /// gradient norm before clipping.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<f64> {
        if grads.layers.len() != net.layers.len()
            || grads
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(g, l)| g.weights.shape() != l.weights.shape())
        {
            return Err(Error::Config("gradient shapes do not match the network".into()));
        }
        let norm = grads.norm();
        let clip = match self.config.max_grad_norm {
            Some(max) if norm > max => max / (norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            let g = g * clip;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + epsilon);
        };
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first.layers)
            .zip(&mut self.second.layers)
        {
            for i in 0..layer.weights.len() {
                update(&mut layer.weights[i], g.weights[i], &mut m.weights[i], &mut v.weights[i]);
            }
            for i in 0..layer.bias.len() {
                update(&mut layer.bias[i], g.bias[i], &mut m.bias[i], &mut v.bias[i]);
            }
        }
        net.version += 1;
        Ok(norm)
    }
}

/// Categorical distribution over actions given logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub entropy: f64,
}

impl ActionDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> = logits.iter().map(|l| l - lse).collect();
        let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
        let entropy = -probs
            .iter()
            .zip(&log_probs)
            .map(|(p, lp)| if *p > 0.0 { p * lp } else { 0.0 })
            .sum::<f64>();
        ActionDistribution {
            probs,
            log_probs,
            entropy,
        }
    }

    /// `∂ log π(action) / ∂ logits`.
    pub fn log_prob_grad(&self, action: usize) -> Vec<f64> {
        self.probs
            .iter()
            .enumerate()
            .map(|(k, p)| f64::from(u8::from(k == action)) - p)
            .collect()
    }

    /// `∂ H / ∂ logits`.
    pub fn entropy_grad(&self) -> Vec<f64> {
        self.probs
            .iter()
            .zip(&self.log_probs)
            .map(|(p, lp)| -p * (lp + self.entropy))
            .collect()
    }
}

/// Probabilities, log-probability of `action` and entropy of the softmax of
/// `logits` (max-subtracted for stability).
pub fn softmax_logprob_entropy(logits: &[f64], action: usize) -> (Vec<f64>, f64, f64) {
    let d = ActionDistribution::from_logits(logits);
    let lp = d.log_probs[action];
    (d.probs, lp, d.entropy)
}

/// Result of comparing backprop gradients with central finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: usize,
    pub parameters: usize,
}

/// Check every parameter gradient of the loss `Σ ⟨projection, net(inputs)⟩`
/// against central differences with step `h`.
///
/// Relative error is `|a − n| / max(|a| + |n|, 1e-6)`. The floor keeps central-difference
/// roundoff (about `ε·|loss| / h`) from dominating near-zero gradients.
pub fn gradient_check(
    net: &Mlp,
    inputs: &DMatrix<f64>,
    projection: &DMatrix<f64>,
    h: f64,
) -> Result<GradCheckReport> {
    let loss = |n: &Mlp| -> Result<f64> {
        let out = n.forward_batch(inputs)?;
        Ok(out.output().component_mul(projection).sum())
    };
    let cache = net.forward_batch(inputs)?;
    let analytic = net.backward(&cache, projection)?.to_vec();
    let base = net.parameters();
    let mut probe = net.clone();
    let mut worst = (0.0f64, 0usize);
    let mut params = base.clone();
    for i in 0..base.len() {
        params[i] = base[i] + h;
        probe.set_parameters(&params)?;
        let up = loss(&probe)?;
        params[i] = base[i] - h;
        probe.set_parameters(&params)?;
        let down = loss(&probe)?;
        params[i] = base[i];
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-6);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_parameter: worst.1,
        parameters: base.len(),
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RTNN";
const CHECKPOINT_VERSION: u32 = 1;

impl Mlp {
    /// Binary checkpoint, all integers and floats little-endian:
    /// magic `RTNN`, `u32` format version, `u32` number of layer dims, the
    /// dims as `u32`, then every parameter as `f64` in
    /// [`parameters`](Self::parameters) order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let dims = self.layer_dims();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in &dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for p in self.parameters() {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Mlp> {
        let bad = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(bad)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        r.read_exact(&mut word).map_err(bad)?;
        let count = u32::from_le_bytes(word) as usize;
        if !(2..=64).contains(&count) {
            return Err(Error::Checkpoint(format!("implausible layer count {count}")));
        }
        let mut dims = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut word).map_err(bad)?;
            dims.push(u32::from_le_bytes(word) as usize);
        }
        let mut net = Mlp::zeros(&dims).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = vec![0.0; net.num_parameters()];
        let mut buf = [0u8; 8];
        for p in params.iter_mut() {
            r.read_exact(&mut buf).map_err(bad)?;
            *p = f64::from_le_bytes(buf);
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        net.set_parameters(&params)?;
        net.version = 0;
        Ok(net)
    }
}
