//! Training losses: the basis-anchored softmax (IOE), the adaptive supervised
//! contrastive loss (DAC), the gate sparsity penalty, and the aggregation
//! degree that drives the DAC temperature.
//!
//! Loss gradients are taken with respect to the embedding coordinates as
//! free variables; the network's normalization layer handles the projection
//! onto the sphere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, Mat};

pub const DEFAULT_TAU_IOE: f64 = 0.05;
pub const DEFAULT_TAU0: f64 = 0.2;
pub const DEFAULT_TAU_MIN: f64 = 0.05;
pub const DEFAULT_TAU_MAX: f64 = 1.0;

/// Embeddings of one mini-batch with task-local labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    embeddings: Mat,
    labels: Vec<usize>,
    positives: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(embeddings: Mat, labels: Vec<usize>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::Config(format!(
                "{} embeddings but {} labels",
                embeddings.rows(),
                labels.len()
            )));
        }
        let positives = (0..labels.len())
            .map(|i| {
                (0..labels.len())
                    .filter(|&j| j != i && labels[j] == labels[i])
                    .collect()
            })
            .collect();
        Ok(Batch {
            embeddings,
            labels,
            positives,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embeddings(&self) -> &Mat {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Same-label indices of sample `i`, excluding `i`.
    pub fn positives(&self, i: usize) -> &[usize] {
        &self.positives[i]
    }
}

/// `-(1/N) Σ log softmax_c(z·μ_j / τ)` over the anchor vectors `anchors`,
/// with labels indexing into `anchors`. Returns the loss and `∂L/∂z`.
pub fn loss_ioe(batch: &Batch, anchors: &[Vec<f64>], tau: f64) -> Result<(f64, Mat)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&c| c >= anchors.len()) {
        return Err(Error::Config(format!(
            "label {bad} has no basis vector ({} available)",
            anchors.len()
        )));
    }
    let n = batch.len();
    if n == 0 {
        return Err(Error::DegenerateInput("empty batch".into()));
    }
    let dim = batch.embeddings.cols();
    let mut grad = Mat::zeros(n, dim);
    let mut loss = 0.0;
    for i in 0..n {
        let z = batch.embeddings.row(i);
        let logits: Vec<f64> = anchors.iter().map(|m| dot(z, m) / tau).collect();
        let lse = log_sum_exp(&logits);
        let c = batch.labels[i];
        loss += lse - logits[c];
        let g = grad.row_mut(i);
        for (j, m) in anchors.iter().enumerate() {
            let p = (logits[j] - lse).exp() - if j == c { 1.0 } else { 0.0 };
            for (gk, mk) in g.iter_mut().zip(m) {
                *gk += p * mk / (tau * n as f64);
            }
        }
    }
    Ok((loss / n as f64, grad))
}

/// Supervised contrastive loss at temperature `tau`: for every anchor with
/// at least one positive,
/// `-(1/|P(i)|) Σ_{p∈P(i)} log( exp(zᵢ·z_p/τ) / Σ_{a≠i} exp(zᵢ·z_a/τ) )`,
/// averaged over those anchors. Returns the loss and `∂L/∂z`.
pub fn loss_dac(batch: &Batch, tau: f64) -> Result<(f64, Mat)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let n = batch.len();
    let anchors: Vec<usize> = (0..n).filter(|&i| !batch.positives[i].is_empty()).collect();
    if anchors.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    let z = &batch.embeddings;
    let dim = z.cols();
    let scale = 1.0 / anchors.len() as f64;
    let mut grad = Mat::zeros(n, dim);
    let mut loss = 0.0;
    let mut coef = vec![0.0; n];
    for &i in &anchors {
        let zi = z.row(i);
        let sims: Vec<f64> = (0..n).map(|a| dot(zi, z.row(a)) / tau).collect();
        let others: Vec<f64> = (0..n).filter(|&a| a != i).map(|a| sims[a]).collect();
        let lse = log_sum_exp(&others);
        let pos = &batch.positives[i];
        let inv_p = 1.0 / pos.len() as f64;
        loss += lse - inv_p * pos.iter().map(|&p| sims[p]).sum::<f64>();

        // ∂/∂s_ia = q_ia - [a ∈ P(i)]/|P(i)|
        coef.iter_mut().for_each(|c| *c = 0.0);
        for a in (0..n).filter(|&a| a != i) {
            coef[a] = (sims[a] - lse).exp();
        }
        for &p in pos {
            coef[p] -= inv_p;
        }
        for a in (0..n).filter(|&a| a != i) {
            let c = coef[a] * scale / tau;
            if c == 0.0 {
                continue;
            }
            // s_ia = zᵢ·z_a/τ feeds both endpoints
            let (za, zi) = (z.row(a).to_vec(), zi.to_vec());
            for (g, v) in grad.row_mut(i).iter_mut().zip(&za) {
                *g += c * v;
            }
            for (g, v) in grad.row_mut(a).iter_mut().zip(&zi) {
                *g += c * v;
            }
        }
    }
    Ok((loss * scale, grad))
}

/// Mean cosine between each embedding and the anchor of its class:
/// `ω = (1/N) Σ zᵢ·μ_{c(i)}`.
pub fn aggregation_degree(embeddings: &Mat, labels: &[usize], anchors: &[Vec<f64>]) -> Result<f64> {
    if embeddings.rows() == 0 {
        return Err(Error::DegenerateInput("aggregation over no samples".into()));
    }
    if embeddings.rows() != labels.len() {
        return Err(Error::Config("embedding and label counts differ".into()));
    }
    let mut total = 0.0;
    for (i, &c) in labels.iter().enumerate() {
        let mu = anchors
            .get(c)
            .ok_or_else(|| Error::Config(format!("label {c} has no basis vector")))?;
        total += dot(embeddings.row(i), mu);
    }
    Ok(total / labels.len() as f64)
}

/// Aggregation degrees per task and the temperature they imply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationState {
    pub omega_current: f64,
    pub omega_history: Vec<f64>,
    pub omega_avg: f64,
    pub tau_ioe: f64,
    pub tau0: f64,
    pub tau_current: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    /// Average over the current task's value as well as the earlier ones.
    pub include_current_in_avg: bool,
    pub warnings: Vec<String>,
}

impl Default for AggregationState {
    fn default() -> Self {
        AggregationState::new(DEFAULT_TAU_IOE, DEFAULT_TAU0, DEFAULT_TAU_MIN, DEFAULT_TAU_MAX)
    }
}

impl AggregationState {
    pub fn new(tau_ioe: f64, tau0: f64, tau_min: f64, tau_max: f64) -> Self {
        AggregationState {
            omega_current: 0.0,
            omega_history: Vec::new(),
            omega_avg: 0.0,
            tau_ioe,
            tau0,
            tau_current: tau0,
            tau_min,
            tau_max,
            include_current_in_avg: false,
            warnings: Vec::new(),
        }
    }

    /// Records `ω_t` and sets `τ = clamp(τ0 · ω_t / ω_avg, τ_min, τ_max)`.
    /// `ω_avg` is the mean over earlier tasks (or over all tasks including
    /// this one when `include_current_in_avg` is set); it is refreshed here.
    /// Without a positive average the temperature falls back to `τ0`.
    pub fn update_temperature(&mut self, omega_t: f64) {
        self.omega_current = omega_t;
        if self.include_current_in_avg {
            self.omega_history.push(omega_t);
            self.omega_avg = mean(&self.omega_history);
            self.tau_current = self.ratio_temperature(omega_t);
        } else {
            self.tau_current = self.ratio_temperature(omega_t);
            self.omega_history.push(omega_t);
            self.omega_avg = mean(&self.omega_history);
        }
    }

    fn ratio_temperature(&mut self, omega_t: f64) -> f64 {
        let task = self.omega_history.len() - usize::from(self.include_current_in_avg);
        if self.omega_history.is_empty() {
            self.warnings
                .push(format!("task {task}: no earlier aggregation degree, using tau0"));
            return self.tau0;
        }
        if !(self.omega_avg > 0.0) {
            self.warnings.push(format!(
                "task {task}: average aggregation degree {} is not positive, using tau0",
                self.omega_avg
            ));
            return self.tau0;
        }
        (self.tau0 * omega_t / self.omega_avg).clamp(self.tau_min, self.tau_max)
    }

    /// Same bookkeeping with the temperature pinned to `τ0`.
    pub fn record_fixed(&mut self, omega_t: f64) {
        self.omega_current = omega_t;
        self.omega_history.push(omega_t);
        self.omega_avg = mean(&self.omega_history);
        self.tau_current = self.tau0;
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// `Σ α^t (1 - α^{<t}) / Σ (1 - α^{<t})` with its gradient with respect to
/// the current gate values.
pub fn hat_regularizer(gates: &[Vec<f64>], accumulated: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let free: f64 = accumulated.iter().flatten().map(|a| 1.0 - a).sum();
    if !(free > 0.0) {
        return Err(Error::CapacityExhausted);
    }
    let mut used = 0.0;
    let grads = gates
        .iter()
        .zip(accumulated)
        .map(|(g, a)| {
            g.iter()
                .zip(a)
                .map(|(&gi, &ai)| {
                    used += gi * (1.0 - ai);
                    (1.0 - ai) / free
                })
                .collect()
        })
        .collect();
    Ok((used / free, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ioe,
    Dac,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Ioe => "ioe",
            Phase::Dac => "dac",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ioe: f64,
    pub dac: f64,
    pub hat: f64,
    pub total: f64,
    pub lambda: f64,
    pub lambda_hat: f64,
}

/// Combines the loss terms; the DAC term carries weight zero in the IOE phase.
pub fn total_loss(ioe: f64, dac: f64, hat: f64, lambda: f64, lambda_hat: f64, phase: Phase) -> LossBreakdown {
    let dac_weight = match phase {
        Phase::Ioe => 0.0,
        Phase::Dac => lambda,
    };
    LossBreakdown {
        ioe,
        dac,
        hat,
        total: ioe + dac_weight * dac + lambda_hat * hat,
        lambda,
        lambda_hat,
    }
}
