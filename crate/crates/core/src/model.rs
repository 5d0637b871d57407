//! Masked multilayer perceptron with hard-attention task gates.
//!
//! The encoder is a stack of fully connected layers (the last one produces the
//! penultimate features); every encoder unit carries a per-task gate. A linear
//! projection maps features to the embedding, which is L2-normalized.
//!
//! The projection is not gated in the forward pass. Its gradients are gated
//! with the output side treated as always claimed, so a weight is frozen as soon
//! as the feature it reads from belongs to an earlier task. Together with the
//! encoder gating this keeps every earlier task's embedding function fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, norm, Mat, RngStream};

/// Gate logits are clamped to this range after every update.
pub const GATE_LOGIT_CLAMP: f64 = 6.0;
/// Limit on `|s·e|` inside the cosh used by the gate-gradient compensation.
const COSH_CLAMP: f64 = 50.0;
/// Floor on the raw embedding norm before normalization.
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `a` and output `y`.
    fn derivative(self, a: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub activation: Activation,
    /// Biases on encoder layers. The projection never has one.
    pub use_bias: bool,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.input_dim >= 1
            && self.feature_dim >= 1
            && self.embed_dim >= 1
            && self.hidden_widths.iter().all(|&w| w >= 1);
        if dims_ok {
            Ok(())
        } else {
            Err(Error::Config("network dimensions must all be at least 1".into()))
        }
    }

    /// Widths of the gated encoder layers: hidden layers then the feature layer.
    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = self.hidden_widths.clone();
        w.push(self.feature_dim);
        w
    }

    /// Total number of gated units.
    pub fn gated_units(&self) -> usize {
        self.encoder_widths().iter().sum()
    }
}

/// Weights (`out × in`) and bias of one layer; `bias` is empty when the layer
/// has none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub layer_id: usize,
    pub weights: Mat,
    pub bias: Vec<f64>,
}

/// Per-layer gate values, one vector per encoder layer.
pub type Gates = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedNetwork {
    spec: NetworkSpec,
    /// Encoder layers followed by the projection.
    layers: Vec<ParamTensor>,
}

/// Activations kept for backpropagation.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Input to every layer, the projection included.
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
    /// Activation output before gating.
    post: Vec<Mat>,
    raw_norms: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub features: Mat,
    pub embeddings: Mat,
    pub trace: Trace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
    /// Gradient with respect to gate values (not logits).
    pub gates: Vec<Vec<f64>>,
}

impl MaskedNetwork {
    /// Uniform fan-in initialization: entries drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn new(spec: NetworkSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut fan_in = spec.input_dim;
        let widths = spec.encoder_widths();
        for (id, &out) in widths.iter().enumerate() {
            layers.push(init_layer(id, out, fan_in, spec.use_bias, rng));
            fan_in = out;
        }
        layers.push(init_layer(widths.len(), spec.embed_dim, fan_in, false, rng));
        Ok(MaskedNetwork { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[ParamTensor] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.layers
    }

    pub fn encoder_depth(&self) -> usize {
        self.layers.len() - 1
    }

    /// All-ones gates, i.e. the ungated network.
    pub fn open_gates(&self) -> Gates {
        self.spec.encoder_widths().iter().map(|&w| vec![1.0; w]).collect()
    }

    fn check_gates(&self, gates: &[Vec<f64>]) -> Result<()> {
        let widths = self.spec.encoder_widths();
        if gates.len() != widths.len() || gates.iter().zip(&widths).any(|(g, &w)| g.len() != w) {
            return Err(Error::Config("gate shapes do not match the network".into()));
        }
        Ok(())
    }

    /// Batched forward pass; `x` holds one sample per row.
    pub fn forward(&self, x: &Mat, gates: &[Vec<f64>]) -> Result<Forward> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::Config(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.spec.input_dim
            )));
        }
        self.check_gates(gates)?;
        let act = self.spec.activation;
        let depth = self.encoder_depth();
        let mut inputs = Vec::with_capacity(depth + 1);
        let mut pre = Vec::with_capacity(depth);
        let mut post = Vec::with_capacity(depth);
        let mut h = x.clone();
        for (layer, gate) in self.layers[..depth].iter().zip(gates) {
            let a = affine(&h, layer);
            let mut r = a.clone();
            r.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            let mut gated = r.clone();
            for b in 0..gated.rows() {
                for (v, g) in gated.row_mut(b).iter_mut().zip(gate) {
                    *v *= g;
                }
            }
            inputs.push(h);
            pre.push(a);
            post.push(r);
            h = gated;
        }
        let features = h.clone();
        let raw = affine(&h, &self.layers[depth]);
        inputs.push(h);
        let mut embeddings = raw;
        let mut raw_norms = Vec::with_capacity(x.rows());
        for b in 0..embeddings.rows() {
            let row = embeddings.row_mut(b);
            let n = norm(row);
            if !n.is_finite() {
                return Err(Error::DegenerateInput(format!("embedding of sample {b} is not finite")));
            }
            // a sample whose features are all gated off maps to the zero vector
            let n = n.max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= n);
            raw_norms.push(n);
        }
        Ok(Forward {
            features,
            embeddings,
            trace: Trace {
                inputs,
                pre,
                post,
                raw_norms,
            },
        })
    }

    /// Single-sample convenience wrapper returning `(features, embedding)`.
    pub fn forward_one(&self, x: &[f64], gates: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let f = self.forward(&Mat::from_vec(1, x.len(), x.to_vec())?, gates)?;
        Ok((f.features.row(0).to_vec(), f.embeddings.row(0).to_vec()))
    }

    /// Penultimate features only, skipping the projection.
    pub fn features(&self, x: &Mat, gates: &[Vec<f64>]) -> Result<Mat> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::Config("input width does not match the network".into()));
        }
        self.check_gates(gates)?;
        let act = self.spec.activation;
        let mut h = x.clone();
        for (layer, gate) in self.layers[..self.encoder_depth()].iter().zip(gates) {
            let mut a = affine(&h, layer);
            for b in 0..a.rows() {
                for (v, g) in a.row_mut(b).iter_mut().zip(gate) {
                    *v = act.apply(*v) * g;
                }
            }
            h = a;
        }
        Ok(h)
    }

    /// Backpropagates `d_embed` (gradient with respect to the normalized
    /// embeddings) and an optional gradient with respect to the features.
    pub fn backward(&self, fwd: &Forward, gates: &[Vec<f64>], d_embed: &Mat, d_features: Option<&Mat>) -> Gradients {
        let depth = self.encoder_depth();
        let act = self.spec.activation;
        let n = d_embed.rows();
        let mut weights: Vec<Mat> = self
            .layers
            .iter()
            .map(|l| Mat::zeros(l.weights.rows(), l.weights.cols()))
            .collect();
        let mut biases: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect();
        let mut gate_grads: Vec<Vec<f64>> = gates.iter().map(|g| vec![0.0; g.len()]).collect();

        // through the normalization: dẑ = (dz - z (z·dz)) / ‖ẑ‖
        let mut d_raw = Mat::zeros(n, d_embed.cols());
        for b in 0..n {
            let z = fwd.embeddings.row(b);
            let dz = d_embed.row(b);
            let raw_norm = fwd.trace.raw_norms[b];
            let c = if raw_norm > NORM_EPS { dot(z, dz) } else { 0.0 };
            let inv = 1.0 / raw_norm;
            for ((o, &zi), &dzi) in d_raw.row_mut(b).iter_mut().zip(z).zip(dz) {
                *o = (dzi - zi * c) * inv;
            }
        }
        let mut d_h = back_affine(
            &d_raw,
            &fwd.trace.inputs[depth],
            &self.layers[depth],
            &mut weights[depth],
            &mut biases[depth],
        );
        if let Some(df) = d_features {
            for (a, b) in d_h.as_mut_slice().iter_mut().zip(df.as_slice()) {
                *a += b;
            }
        }

        for l in (0..depth).rev() {
            let gate = &gates[l];
            let post = &fwd.trace.post[l];
            let pre = &fwd.trace.pre[l];
            let mut d_a = Mat::zeros(n, gate.len());
            for b in 0..n {
                let dh = d_h.row(b);
                for i in 0..gate.len() {
                    gate_grads[l][i] += dh[i] * post[(b, i)];
                    d_a[(b, i)] = dh[i] * gate[i] * act.derivative(pre[(b, i)], post[(b, i)]);
                }
            }
            d_h = back_affine(
                &d_a,
                &fwd.trace.inputs[l],
                &self.layers[l],
                &mut weights[l],
                &mut biases[l],
            );
        }
        Gradients {
            weights,
            biases,
            gates: gate_grads,
        }
    }

    /// Number of parameters that a gradient gate under `accumulated` freezes
    /// but that differ between `self` and `before`.
    pub fn frozen_violations(&self, before: &MaskedNetwork, accumulated: &[Vec<f64>]) -> usize {
        let mut count = 0;
        for (l, (now, old)) in self.layers.iter().zip(&before.layers).enumerate() {
            for i in 0..now.weights.rows() {
                for j in 0..now.weights.cols() {
                    if weight_gate(accumulated, l, i, j) == 0.0
                        && now.weights[(i, j)].to_bits() != old.weights[(i, j)].to_bits()
                    {
                        count += 1;
                    }
                }
                if !now.bias.is_empty()
                    && bias_gate(accumulated, l, i) == 0.0
                    && now.bias[i].to_bits() != old.bias[i].to_bits()
                {
                    count += 1;
                }
            }
        }
        count
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

fn init_layer(id: usize, out: usize, fan_in: usize, bias: bool, rng: &mut RngStream) -> ParamTensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..out * fan_in).map(|_| rng.uniform(-bound, bound)).collect();
    let bias = if bias {
        (0..out).map(|_| rng.uniform(-bound, bound)).collect()
    } else {
        Vec::new()
    };
    ParamTensor {
        layer_id: id,
        weights: Mat::from_vec(out, fan_in, data).expect("shape is consistent"),
        bias,
    }
}

/// `x · Wᵀ + b`, one sample per row.
fn affine(x: &Mat, layer: &ParamTensor) -> Mat {
    let w = &layer.weights;
    let mut out = Mat::zeros(x.rows(), w.rows());
    for b in 0..x.rows() {
        let xb = x.row(b);
        for (i, o) in out.row_mut(b).iter_mut().enumerate() {
            *o = dot(w.row(i), xb);
            if !layer.bias.is_empty() {
                *o += layer.bias[i];
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients and returns the gradient for the
/// layer input.
fn back_affine(d_out: &Mat, input: &Mat, layer: &ParamTensor, dw: &mut Mat, db: &mut [f64]) -> Mat {
    let w = &layer.weights;
    let mut d_in = Mat::zeros(input.rows(), w.cols());
    for b in 0..d_out.rows() {
        let xb = input.row(b);
        for i in 0..w.rows() {
            let g = d_out[(b, i)];
            if g == 0.0 {
                continue;
            }
            axpy(g, xb, dw.row_mut(i));
            if !db.is_empty() {
                db[i] += g;
            }
            axpy(g, w.row(i), d_in.row_mut(b));
        }
    }
    d_in
}

/// Accumulated mask value of unit `j` feeding layer `l`; network inputs count
/// as always claimed.
fn input_side(accumulated: &[Vec<f64>], l: usize, j: usize) -> f64 {
    if l == 0 {
        1.0
    } else {
        accumulated[l - 1][j]
    }
}

/// Accumulated mask value of output unit `i` of layer `l`; the projection's
/// outputs count as always claimed.
fn output_side(accumulated: &[Vec<f64>], l: usize, i: usize) -> f64 {
    if l < accumulated.len() {
        accumulated[l][i]
    } else {
        1.0
    }
}

/// `1 - min(α_{i,l}, α_{j,l-1})` for weight `(i, j)` of layer `l`.
pub fn weight_gate(accumulated: &[Vec<f64>], l: usize, i: usize, j: usize) -> f64 {
    1.0 - output_side(accumulated, l, i).min(input_side(accumulated, l, j))
}

/// Biases read from a constant input, so only the output side matters.
pub fn bias_gate(accumulated: &[Vec<f64>], l: usize, i: usize) -> f64 {
    1.0 - output_side(accumulated, l, i)
}

/// Multiplies every parameter gradient by its gate under the accumulated
/// masks of earlier tasks. Gate gradients are returned unchanged.
pub fn gate_gradients(grads: &Gradients, accumulated: &[Vec<f64>]) -> Gradients {
    let mut out = grads.clone();
    for (l, (w, b)) in out.weights.iter_mut().zip(out.biases.iter_mut()).enumerate() {
        for i in 0..w.rows() {
            let oi = output_side(accumulated, l, i);
            for (j, g) in w.row_mut(i).iter_mut().enumerate() {
                *g *= 1.0 - oi.min(input_side(accumulated, l, j));
            }
            if !b.is_empty() {
                b[i] *= 1.0 - oi;
            }
        }
    }
    out
}

/// Elementwise maximum of two binary masks.
pub fn accumulate(prev: &[Vec<f64>], task: &[Vec<f64>]) -> Gates {
    prev.iter()
        .zip(task)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| a.max(*b)).collect())
        .collect()
}

/// Gate scale schedule within an epoch:
/// `s(p) = 1/s_max + (s_max - 1/s_max)·p` for progress `p ∈ [0, 1]`.
pub fn anneal_scale(progress: f64, s_max: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    1.0 / s_max + (s_max - 1.0 / s_max) * p
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gate state: trainable logits for the current task plus the accumulated
/// binary masks of all completed tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    pub scale: f64,
    pub logits: Vec<Vec<f64>>,
    pub accumulated: Vec<Vec<f64>>,
}

impl MaskState {
    pub fn new(spec: &NetworkSpec) -> Self {
        let widths = spec.encoder_widths();
        MaskState {
            scale: 1.0,
            logits: widths.iter().map(|&w| vec![0.0; w]).collect(),
            accumulated: widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }

    /// Fresh standard-normal logits for a new task.
    pub fn begin_task(&mut self, rng: &mut RngStream) {
        for layer in &mut self.logits {
            for e in layer.iter_mut() {
                *e = rng.normal();
            }
        }
    }

    /// `σ(s·e)` per unit.
    pub fn gates(&self, scale: f64) -> Gates {
        self.logits
            .iter()
            .map(|l| l.iter().map(|&e| sigmoid(scale * e)).collect())
            .collect()
    }

    /// Binary mask of the current task: 1 where `σ(s·e) > 0.5`, i.e. `e > 0`.
    pub fn binarize(&self) -> Gates {
        self.logits
            .iter()
            .map(|l| l.iter().map(|&e| if e > 0.0 { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    pub fn absorb(&mut self, task_mask: &[Vec<f64>]) {
        self.accumulated = accumulate(&self.accumulated, task_mask);
    }

    /// Share of units claimed by some completed task.
    pub fn saturation(&self) -> f64 {
        saturation(&self.accumulated)
    }

    /// Chain rule from gate values to logits at scale `s`, followed by the
    /// compensation that keeps logit updates comparable across the anneal.
    pub fn logit_gradients(&self, gate_grads: &[Vec<f64>], scale: f64, s_max: f64) -> Vec<Vec<f64>> {
        self.logits
            .iter()
            .zip(gate_grads)
            .map(|(layer, grads)| {
                layer
                    .iter()
                    .zip(grads)
                    .map(|(&e, &g)| {
                        let sg = sigmoid(scale * e);
                        let raw = g * scale * sg * (1.0 - sg);
                        let num = (scale * e).clamp(-COSH_CLAMP, COSH_CLAMP).cosh() + 1.0;
                        let den = e.cosh() + 1.0;
                        raw * s_max / scale * num / den
                    })
                    .collect()
            })
            .collect()
    }

    pub fn clamp_logits(&mut self) {
        for layer in &mut self.logits {
            for e in layer.iter_mut() {
                *e = e.clamp(-GATE_LOGIT_CLAMP, GATE_LOGIT_CLAMP);
            }
        }
    }
}

pub fn saturation(mask: &[Vec<f64>]) -> f64 {
    let total: usize = mask.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let ones: f64 = mask.iter().flatten().sum();
    ones / total as f64
}

/// Stochastic gradient descent with momentum. Velocities start at zero and
/// are reset per task, so a parameter whose gated gradient stays zero is never
/// touched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    velocity_w: Vec<Mat>,
    velocity_b: Vec<Vec<f64>>,
    velocity_e: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(net: &MaskedNetwork, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity_w: net
                .layers
                .iter()
                .map(|l| Mat::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
            velocity_b: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            velocity_e: net.spec.encoder_widths().iter().map(|&w| vec![0.0; w]).collect(),
        }
    }

    /// Applies gated parameter gradients to `net` and logit gradients to `mask`.
    pub fn step(
        &mut self,
        net: &mut MaskedNetwork,
        grads: &Gradients,
        mask: Option<(&mut MaskState, &[Vec<f64>])>,
        lr: f64,
    ) {
        let m = self.momentum;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            update(
                layer.weights.as_mut_slice(),
                self.velocity_w[l].as_mut_slice(),
                grads.weights[l].as_slice(),
                m,
                lr,
            );
            update(&mut layer.bias, &mut self.velocity_b[l], &grads.biases[l], m, lr);
        }
        if let Some((state, logit_grads)) = mask {
            for ((e, v), g) in state.logits.iter_mut().zip(&mut self.velocity_e).zip(logit_grads) {
                update(e, v, g, m, lr);
            }
            state.clamp_logits();
        }
    }
}

fn update(params: &mut [f64], velocity: &mut [f64], grads: &[f64], momentum: f64, lr: f64) {
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Adds `weight_decay · w` to every weight gradient (biases excluded).
pub fn add_weight_decay(grads: &mut Gradients, net: &MaskedNetwork, weight_decay: f64) {
    if weight_decay == 0.0 {
        return;
    }
    for (g, layer) in grads.weights.iter_mut().zip(&net.layers) {
        axpy(weight_decay, layer.weights.as_slice(), g.as_mut_slice());
    }
}
