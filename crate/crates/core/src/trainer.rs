//! Sequential training over a task stream.
//!
//! Each task runs: basis extension, an IOE phase, one aggregation
//! measurement, a DAC phase, mask accumulation, head training and an
//! evaluation over every task seen so far. Randomness comes from streams
//! keyed by `(seed, stream id + task)`, so a run resumed from a task-boundary
//! snapshot follows the same trajectory as an uninterrupted one.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{BasisSet, GeneratorConfig, OrthogonalityReport};
use crate::error::{Error, Result};
use crate::inference::{
    a_last_a_inc, evaluate, predictions_csv, train_head, AccMatrix, Classifier, Evaluation, HeadConfig, OodHead,
    PredictionRecord, ScoreRule,
};
use crate::model::{
    add_weight_decay, anneal_scale, gate_gradients, Activation, Gates, MaskState, MaskedNetwork, NetworkSpec, Sgd,
};
use crate::numerics::{axpy, unit_normalize, Cholesky, Mat, RngStream};
use crate::objective::{
    aggregation_degree, hat_regularizer, loss_dac, loss_ioe, total_loss, AggregationState, Batch, Phase, DEFAULT_TAU0,
    DEFAULT_TAU_IOE, DEFAULT_TAU_MAX, DEFAULT_TAU_MIN,
};
use crate::tasks::{class_statistics_of, gather, make_stream, SampleSource, StreamSpec, TaskDataset};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Stream ids. Per-task streams add the task index.
pub const INIT_STREAM: u64 = 0x0100;
pub const SHUFFLE_STREAM: u64 = 0x1000;
pub const GATE_STREAM: u64 = 0x3000;
pub const HEAD_STREAM: u64 = 0x4000;
pub const AUGMENT_STREAM: u64 = 0x5000;

/// Shrinkage toward `tr(Σ)/d · I` used by [`embedding_separation`].
pub const SEPARATION_SHRINKAGE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub activation: Activation,
    pub use_bias: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden_widths: vec![64],
            feature_dim: 64,
            embed_dim: 16,
            activation: Activation::Relu,
            use_bias: true,
        }
    }
}

impl NetworkConfig {
    pub fn spec(&self, input_dim: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim,
            hidden_widths: self.hidden_widths.clone(),
            feature_dim: self.feature_dim,
            embed_dim: self.embed_dim,
            activation: self.activation,
            use_bias: self.use_bias,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_ioe: usize,
    pub epochs_dac: usize,
    /// Epoch at which DAC joins; defaults to `epochs_ioe`.
    pub dac_start: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the DAC term.
    pub lambda: f64,
    pub lambda_hat_first: f64,
    pub lambda_hat: f64,
    pub s_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_ioe: 120,
            epochs_dac: 80,
            dac_start: None,
            batch_size: 32,
            lr: 0.05,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 0.002,
            lambda: 1.0,
            lambda_hat_first: 1.5,
            lambda_hat: 1.0,
            s_max: 400.0,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.epochs_ioe + self.epochs_dac
    }

    pub fn dac_epoch(&self) -> usize {
        self.dac_start.unwrap_or(self.epochs_ioe)
    }

    /// Cosine decay from `lr` to `lr_min` over the task's epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let total = self.total_epochs().max(1) as f64;
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (PI * epoch as f64 / total).cos())
    }

    pub fn lambda_hat_for(&self, task: usize) -> f64 {
        if task == 0 {
            self.lambda_hat_first
        } else {
            self.lambda_hat
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureConfig {
    pub tau_ioe: f64,
    pub tau0: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub include_current_in_avg: bool,
    /// Keep the DAC temperature at `tau0` for every task.
    pub fixed: bool,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        TemperatureConfig {
            tau_ioe: DEFAULT_TAU_IOE,
            tau0: DEFAULT_TAU0,
            tau_min: DEFAULT_TAU_MIN,
            tau_max: DEFAULT_TAU_MAX,
            include_current_in_avg: false,
            fixed: false,
        }
    }
}

/// Component switches. `use_ioe = false` trains with the contrastive loss
/// alone at `tau0` for every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub use_ioe: bool,
    pub use_dac: bool,
    /// IOE softmax over every basis vector learned so far instead of the
    /// current task's only.
    #[serde(default)]
    pub ioe_all_bases: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_ioe: true,
            use_dac: true,
            ioe_all_bases: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Pins the data stream to its own seed instead of `seed`.
    pub data_seed: Option<u64>,
    pub data: StreamSpec,
    pub network: NetworkConfig,
    pub basis: GeneratorConfig,
    pub train: TrainConfig,
    pub temperature: TemperatureConfig,
    pub ablation: AblationConfig,
    pub head: HeadConfig,
    pub rule: ScoreRule,
    pub output_dir: Option<PathBuf>,
    pub checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data_seed: None,
            data: StreamSpec::default(),
            network: NetworkConfig::default(),
            basis: GeneratorConfig::default(),
            train: TrainConfig::default(),
            temperature: TemperatureConfig::default(),
            ablation: AblationConfig::default(),
            head: HeadConfig::default(),
            rule: ScoreRule::default(),
            output_dir: None,
            checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    pub fn stream_spec(&self) -> StreamSpec {
        let mut s = self.data.clone();
        s.seed = self.data_seed.unwrap_or(self.seed);
        s
    }

    pub fn basis_config(&self) -> GeneratorConfig {
        let mut b = self.basis.clone();
        b.seed = self.seed;
        b
    }

    /// DAC temperature stays at `tau0`.
    pub fn fixed_temperature(&self) -> bool {
        self.temperature.fixed || !self.ablation.use_ioe
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.network.spec(self.data.input_dim).validate()?;
        self.basis_config().validate()?;
        let t = &self.train;
        let bad = |msg: String| Err(Error::Config(msg));
        if t.total_epochs() == 0 {
            return bad("training needs at least one epoch".into());
        }
        if t.dac_epoch() > t.total_epochs() {
            return bad(format!(
                "dac_start {} exceeds the {} training epochs",
                t.dac_epoch(),
                t.total_epochs()
            ));
        }
        if t.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(t.lr > 0.0) || !(t.lr_min >= 0.0) || t.lr_min > t.lr {
            return bad("need 0 <= lr_min <= lr and lr > 0".into());
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return bad("momentum must lie in [0, 1)".into());
        }
        if !(t.weight_decay >= 0.0 && t.lambda >= 0.0 && t.lambda_hat >= 0.0 && t.lambda_hat_first >= 0.0) {
            return bad("weight_decay and loss weights must be non-negative".into());
        }
        if !(t.s_max >= 1.0) {
            return bad("s_max must be at least 1".into());
        }
        let tc = &self.temperature;
        if !(tc.tau_ioe > 0.0 && tc.tau0 > 0.0 && tc.tau_min > 0.0 && tc.tau_min <= tc.tau_max) {
            return bad("temperatures must be positive with tau_min <= tau_max".into());
        }
        if !self.ablation.use_ioe && !self.ablation.use_dac {
            return bad("at least one of use_ioe and use_dac must be on".into());
        }
        if self.head.epochs == 0 || !(self.head.lr > 0.0) || self.head.batch_size == 0 {
            return bad("head needs epochs >= 1, lr > 0 and batch_size >= 1".into());
        }
        Ok(())
    }
}

/// Position inside a task. Within a task phases only move forward
/// (`Ready → Ioe → Dac → Head`, skipping absent phases); `Head` returns to
/// `Ready` for the next task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunPhase {
    Ready,
    Ioe,
    Dac,
    Head,
}

impl RunPhase {
    pub fn advance(&mut self, next: RunPhase) -> Result<()> {
        let ok = next > *self || (*self == RunPhase::Head && next == RunPhase::Ready);
        if !ok {
            return Err(Error::Precondition(format!("phase {self:?} cannot move to {next:?}")));
        }
        *self = next;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub task: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub ioe: f64,
    pub dac: f64,
    pub hat: f64,
    pub total: f64,
    /// Mean batch aggregation degree.
    pub omega: f64,
    /// DAC temperature, or `τ_IOE` during the IOE phase.
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: usize,
    pub classes: usize,
    /// Aggregation degree on the training set when DAC starts.
    pub omega_start: f64,
    /// Aggregation degree on the training set under the final task mask.
    pub omega_end: f64,
    pub tau: f64,
    pub mask_saturation: f64,
    pub frozen_violations: usize,
    pub head_loss: f64,
    pub cil: Vec<f64>,
    pub oracle: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config: ExperimentConfig,
    pub input_dim: usize,
    /// Index of the next task to train.
    pub task: usize,
    pub phase: RunPhase,
    pub net: MaskedNetwork,
    pub mask: MaskState,
    pub task_masks: Vec<Gates>,
    pub heads: Vec<OodHead>,
    pub basis: BasisSet,
    pub aggregation: AggregationState,
    pub acc: AccMatrix,
    pub oracle: AccMatrix,
    pub metrics: Vec<EpochMetrics>,
    pub summaries: Vec<TaskSummary>,
}

impl RunState {
    pub fn new(config: ExperimentConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let spec = config.network.spec(input_dim);
        let net = MaskedNetwork::new(spec.clone(), &mut RngStream::new(config.seed, INIT_STREAM))?;
        let tc = &config.temperature;
        let mut aggregation = AggregationState::new(tc.tau_ioe, tc.tau0, tc.tau_min, tc.tau_max);
        aggregation.include_current_in_avg = tc.include_current_in_avg;
        Ok(RunState {
            input_dim,
            task: 0,
            phase: RunPhase::Ready,
            mask: MaskState::new(&spec),
            basis: BasisSet::new(spec.embed_dim)?,
            net,
            task_masks: Vec::new(),
            heads: Vec::new(),
            aggregation,
            acc: AccMatrix::new(),
            oracle: AccMatrix::new(),
            metrics: Vec::new(),
            summaries: Vec::new(),
            config,
        })
    }

    pub fn classifier(&self) -> Classifier<'_> {
        Classifier {
            net: &self.net,
            task_masks: &self.task_masks,
            heads: &self.heads,
            rule: self.config.rule,
        }
    }
}

/// Transforms each training batch in place before the forward pass.
pub trait Augmentation {
    fn apply(&self, inputs: &mut Mat, rng: &mut RngStream);
}

/// Leaves batches untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityAugmentation;

impl Augmentation for IdentityAugmentation {
    fn apply(&self, _inputs: &mut Mat, _rng: &mut RngStream) {}
}

/// Trains task `state.task` on `train` and evaluates on `tests`, the test
/// splits of tasks `0..=state.task`. Errors carry the task index.
pub fn run_task(state: &mut RunState, train: &dyn SampleSource, tests: &[&dyn SampleSource]) -> Result<Evaluation> {
    run_task_with(state, train, tests, &IdentityAugmentation)
}

/// [`run_task`] with a batch augmentation.
pub fn run_task_with(
    state: &mut RunState,
    train: &dyn SampleSource,
    tests: &[&dyn SampleSource],
    augment: &dyn Augmentation,
) -> Result<Evaluation> {
    let task = state.task;
    run_task_inner(state, train, tests, augment).map_err(|e| match e {
        Error::Task { .. } => e,
        other => Error::Task {
            task,
            source: Box::new(other),
        },
    })
}

fn run_task_inner(
    state: &mut RunState,
    train: &dyn SampleSource,
    tests: &[&dyn SampleSource],
    augment: &dyn Augmentation,
) -> Result<Evaluation> {
    let t = state.task;
    if state.phase != RunPhase::Ready {
        return Err(Error::Precondition(format!(
            "state is mid-task in phase {:?}",
            state.phase
        )));
    }
    if train.task_id() != t {
        return Err(Error::Config(format!(
            "expected data for task {t}, got task {}",
            train.task_id()
        )));
    }
    if train.label_offset() != state.basis.len() {
        return Err(Error::Config(format!(
            "label overlap: task labels start at {} but {} classes are already in use",
            train.label_offset(),
            state.basis.len()
        )));
    }
    if tests.len() != t + 1 || tests.iter().enumerate().any(|(i, s)| s.task_id() != i) {
        return Err(Error::Config(
            "tests must hold one split per task seen so far, in order".into(),
        ));
    }
    let classes = train.class_count();
    if classes == 0 || train.len() < 2 {
        return Err(Error::Config(
            "a task needs at least one class and two training samples".into(),
        ));
    }
    let cfg = state.config.clone();
    let seed = cfg.seed;
    let tc = &cfg.train;

    state.basis = state.basis.extend(classes, &cfg.basis_config())?;
    let anchors: Vec<Vec<f64>> = state.basis.task_vectors(t).expect("basis was just extended").to_vec();
    let ioe_anchors = cfg.ablation.use_ioe.then_some(anchors.as_slice());
    let all_anchors = (cfg.ablation.use_ioe && cfg.ablation.ioe_all_bases).then(|| state.basis.vectors().to_vec());
    let offset = train.label_offset();

    state.mask.begin_task(&mut RngStream::new(seed, GATE_STREAM + t as u64));
    let before = state.net.clone();
    let prior = state.mask.accumulated.clone();
    let mut opt = Sgd::new(&state.net, tc.momentum);
    let lambda_hat = tc.lambda_hat_for(t);
    let dac_weight = if cfg.ablation.use_ioe { tc.lambda } else { 1.0 };
    let mut shuffle = RngStream::new(seed, SHUFFLE_STREAM + t as u64);
    let mut augment_rng = RngStream::new(seed, AUGMENT_STREAM + t as u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut omega_start = None;

    for epoch in 0..tc.total_epochs() {
        let phase = if !cfg.ablation.use_ioe || (cfg.ablation.use_dac && epoch >= tc.dac_epoch()) {
            Phase::Dac
        } else {
            Phase::Ioe
        };
        if phase == Phase::Dac && omega_start.is_none() {
            let gates = state.mask.gates(tc.s_max);
            let omega = measure_omega(&state.net, &gates, train, ioe_anchors)?;
            set_temperature(state, omega);
            omega_start = Some(omega);
            state.phase.advance(RunPhase::Dac)?;
        } else if epoch == 0 {
            state.phase.advance(RunPhase::Ioe)?;
        }
        let tau = match phase {
            Phase::Ioe => cfg.temperature.tau_ioe,
            Phase::Dac => state.aggregation.tau_current,
        };

        shuffle.shuffle(&mut order);
        let batches: Vec<&[usize]> = order.chunks(tc.batch_size).filter(|c| c.len() >= 2).collect();
        let lr = tc.lr_at(epoch);
        let mut sums = [0.0; 5];
        for (b, rows) in batches.iter().enumerate() {
            let progress = if batches.len() > 1 {
                b as f64 / (batches.len() - 1) as f64
            } else {
                1.0
            };
            let scale = anneal_scale(progress, tc.s_max);
            let gates = state.mask.gates(scale);
            let (mut x, labels) = gather(train, rows)?;
            augment.apply(&mut x, &mut augment_rng);
            let fwd = state.net.forward(&x, &gates)?;
            let batch = Batch::new(fwd.embeddings.clone(), labels)?;

            let mut d_embed = Mat::zeros(batch.len(), fwd.embeddings.cols());
            let mut ioe = 0.0;
            if let Some(a) = ioe_anchors {
                let (l, g) = match &all_anchors {
                    Some(all) => {
                        let global = batch.labels().iter().map(|c| c + offset).collect();
                        loss_ioe(
                            &Batch::new(batch.embeddings().clone(), global)?,
                            all,
                            cfg.temperature.tau_ioe,
                        )?
                    }
                    None => loss_ioe(&batch, a, cfg.temperature.tau_ioe)?,
                };
                ioe = l;
                d_embed = g;
            }
            let mut dac = 0.0;
            if phase == Phase::Dac {
                match loss_dac(&batch, tau) {
                    Ok((l, g)) => {
                        dac = l;
                        axpy(dac_weight, g.as_slice(), d_embed.as_mut_slice());
                    }
                    Err(Error::DegenerateBatch) => {}
                    Err(e) => return Err(e),
                }
            }
            let mut grads = state.net.backward(&fwd, &gates, &d_embed, None);
            let (hat, hat_grads) = hat_regularizer(&gates, &state.mask.accumulated)?;
            for (g, h) in grads.gates.iter_mut().zip(&hat_grads) {
                axpy(lambda_hat, h, g);
            }
            add_weight_decay(&mut grads, &state.net, tc.weight_decay);
            let gated = gate_gradients(&grads, &state.mask.accumulated);
            let logit_grads = state.mask.logit_gradients(&gated.gates, scale, tc.s_max);
            opt.step(&mut state.net, &gated, Some((&mut state.mask, &logit_grads)), lr);

            let parts = total_loss(ioe, dac, hat, dac_weight, lambda_hat, phase);
            let anchors_b = ioe_anchors
                .map(<[Vec<f64>]>::to_vec)
                .unwrap_or_else(|| class_mean_anchors(batch.embeddings(), batch.labels(), classes));
            let omega = aggregation_degree(batch.embeddings(), batch.labels(), &anchors_b)?;
            for (s, v) in sums
                .iter_mut()
                .zip([parts.ioe, parts.dac, parts.hat, parts.total, omega])
            {
                *s += v;
            }
        }
        if !state.net.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "parameters became non-finite in epoch {epoch}"
            )));
        }
        let nb = batches.len().max(1) as f64;
        state.metrics.push(EpochMetrics {
            task: t,
            epoch,
            phase,
            lr,
            ioe: sums[0] / nb,
            dac: sums[1] / nb,
            hat: sums[2] / nb,
            total: sums[3] / nb,
            omega: sums[4] / nb,
            tau,
        });
    }

    let task_mask = state.mask.binarize();
    let omega_start = match omega_start {
        Some(w) => w,
        None => {
            // no DAC phase: the single measurement happens at the end
            let w = measure_omega(&state.net, &task_mask, train, ioe_anchors)?;
            set_temperature(state, w);
            w
        }
    };
    state.phase.advance(RunPhase::Head)?;
    let frozen_violations = state.net.frozen_violations(&before, &prior);
    if frozen_violations > 0 {
        return Err(Error::Precondition(format!(
            "{frozen_violations} parameters frozen by earlier tasks changed"
        )));
    }
    state.mask.absorb(&task_mask);
    let omega_end = measure_omega(&state.net, &task_mask, train, ioe_anchors)?;

    let mut head_rng = RngStream::new(seed, HEAD_STREAM + t as u64);
    let (head, head_history) = train_head(&state.net, &task_mask, train, &cfg.head, &mut head_rng)?;
    state.task_masks.push(task_mask);
    state.heads.push(head);

    let eval = evaluate(&state.classifier(), tests)?;
    state.acc.push_row(eval.cil.clone())?;
    state.oracle.push_row(eval.oracle.clone())?;
    state.summaries.push(TaskSummary {
        task: t,
        classes,
        omega_start,
        omega_end,
        tau: state.aggregation.tau_current,
        mask_saturation: state.mask.saturation(),
        frozen_violations,
        head_loss: head_history.last().copied().unwrap_or(0.0),
        cil: eval.cil.clone(),
        oracle: eval.oracle.clone(),
    });
    state.task += 1;
    state.phase.advance(RunPhase::Ready)?;
    Ok(eval)
}

fn set_temperature(state: &mut RunState, omega: f64) {
    if state.config.fixed_temperature() {
        state.aggregation.record_fixed(omega);
    } else {
        state.aggregation.update_temperature(omega);
    }
}

/// Normalized class means of `embeddings`, standing in for basis vectors
/// when a run has none.
pub fn class_mean_anchors(embeddings: &Mat, labels: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; embeddings.cols()]; classes];
    for (i, &c) in labels.iter().enumerate() {
        axpy(1.0, embeddings.row(i), &mut sums[c]);
    }
    sums.into_iter()
        .map(|s| unit_normalize(&s).unwrap_or_else(|_| vec![0.0; embeddings.cols()]))
        .collect()
}

/// Aggregation degree of the whole of `source` under `gates`, without
/// gradients.
pub fn measure_omega(
    net: &MaskedNetwork,
    gates: &[Vec<f64>],
    source: &dyn SampleSource,
    anchors: Option<&[Vec<f64>]>,
) -> Result<f64> {
    let rows: Vec<usize> = (0..source.len()).collect();
    let (x, labels) = gather(source, &rows)?;
    let z = net.forward(&x, gates)?.embeddings;
    match anchors {
        Some(a) => aggregation_degree(&z, &labels, a),
        None => aggregation_degree(&z, &labels, &class_mean_anchors(&z, &labels, source.class_count())),
    }
}

/// Mean pairwise Mahalanobis distance between class means, with the pooled
/// within-class covariance shrunk toward `tr(Σ)/d · I` by `shrinkage`.
pub fn embedding_separation(embeddings: &[Vec<f64>], labels: &[usize], classes: usize, shrinkage: f64) -> Result<f64> {
    if classes < 2 {
        return Err(Error::DegenerateInput("separation needs at least two classes".into()));
    }
    let stats = class_statistics_of(embeddings, labels, classes)?;
    let cov = &stats.pooled_covariance;
    let d = cov.rows();
    let trace: f64 = (0..d).map(|i| cov[(i, i)]).sum();
    let mut shrunk = cov.scale(1.0 - shrinkage);
    for i in 0..d {
        shrunk[(i, i)] += shrinkage * trace / d as f64;
    }
    let chol = Cholesky::new(&shrunk)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..classes {
        for b in a + 1..classes {
            let diff: Vec<f64> = stats.means[a].iter().zip(&stats.means[b]).map(|(x, y)| x - y).collect();
            total += chol.inv_quad_form(&diff).sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub sample_id: usize,
    pub task: usize,
    pub class: usize,
    pub embedding: Vec<f64>,
}

/// Embeddings of every test sample under its own task's mask, numbered in
/// the same order as the predictions.
pub fn test_embeddings(state: &RunState, tests: &[&dyn SampleSource]) -> Result<Vec<EmbeddingRecord>> {
    let mut out = Vec::new();
    for (t, source) in tests.iter().enumerate() {
        let mask = state
            .task_masks
            .get(t)
            .ok_or_else(|| Error::Config(format!("no mask for task {t}")))?;
        let rows: Vec<usize> = (0..source.len()).collect();
        let (x, labels) = gather(*source, &rows)?;
        let z = state.net.forward(&x, mask)?.embeddings;
        for (b, c) in labels.into_iter().enumerate() {
            out.push(EmbeddingRecord {
                sample_id: out.len(),
                task: t,
                class: c + source.label_offset(),
                embedding: z.row(b).to_vec(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub tasks: usize,
    pub acc_matrix: Vec<Vec<f64>>,
    pub oracle_matrix: Vec<Vec<f64>>,
    pub a_last: f64,
    pub a_inc: f64,
    pub oracle_a_last: f64,
    pub oracle_a_inc: f64,
    /// Sample-weighted accuracies over all test sets after the last task.
    pub final_cil_accuracy: f64,
    pub final_oracle_accuracy: f64,
    pub omega_start: Vec<f64>,
    pub omega_end: Vec<f64>,
    pub tau: Vec<f64>,
    pub omega_avg: f64,
    pub mask_saturation: Vec<f64>,
    pub frozen_violations: Vec<usize>,
    pub orthogonality: OrthogonalityReport,
    pub embedding_separation: f64,
    pub warnings: Vec<String>,
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub state: RunState,
    pub report: Report,
    pub predictions: Vec<PredictionRecord>,
    pub embeddings: Vec<EmbeddingRecord>,
}

/// Final evaluation and report over the test splits of all tasks.
pub fn finish(state: RunState, tests: &[&dyn SampleSource]) -> Result<RunOutput> {
    if state.task == 0 || tests.len() != state.task {
        return Err(Error::Precondition(
            "finish needs every trained task's test split".into(),
        ));
    }
    let eval = evaluate(&state.classifier(), tests)?;
    let embeddings = test_embeddings(&state, tests)?;
    let vectors: Vec<Vec<f64>> = embeddings.iter().map(|e| e.embedding.clone()).collect();
    let labels: Vec<usize> = embeddings.iter().map(|e| e.class).collect();
    let classes = state.basis.len();
    let separation = if classes >= 2 {
        embedding_separation(&vectors, &labels, classes, SEPARATION_SHRINKAGE)?
    } else {
        0.0
    };
    let (a_last, a_inc) = a_last_a_inc(&state.acc)?;
    let (oracle_a_last, oracle_a_inc) = a_last_a_inc(&state.oracle)?;
    let (final_cil_accuracy, final_oracle_accuracy) = eval.overall();
    let s = &state.summaries;
    let report = Report {
        config: state.config.clone(),
        tasks: state.task,
        acc_matrix: state.acc.rows.clone(),
        oracle_matrix: state.oracle.rows.clone(),
        a_last,
        a_inc,
        oracle_a_last,
        oracle_a_inc,
        final_cil_accuracy,
        final_oracle_accuracy,
        omega_start: s.iter().map(|x| x.omega_start).collect(),
        omega_end: s.iter().map(|x| x.omega_end).collect(),
        tau: s.iter().map(|x| x.tau).collect(),
        omega_avg: state.aggregation.omega_avg,
        mask_saturation: s.iter().map(|x| x.mask_saturation).collect(),
        frozen_violations: s.iter().map(|x| x.frozen_violations).collect(),
        orthogonality: state.basis.orthogonality_report()?,
        embedding_separation: separation,
        warnings: state.aggregation.warnings.clone(),
    };
    Ok(RunOutput {
        state,
        report,
        predictions: eval.predictions,
        embeddings,
    })
}

/// Trains the remaining tasks of `tasks` starting at `state.task`, calling
/// `on_task_end` after each. Training splits are borrowed one task at a time.
pub fn run_stream<F>(mut state: RunState, tasks: &[TaskDataset], mut on_task_end: F) -> Result<RunOutput>
where
    F: FnMut(&RunState) -> Result<()>,
{
    if tasks.is_empty() {
        return Err(Error::Config("the stream has no tasks".into()));
    }
    if state.task > tasks.len() {
        return Err(Error::Checkpoint(format!(
            "state has {} tasks but the stream only {}",
            state.task,
            tasks.len()
        )));
    }
    let tests: Vec<_> = tasks.iter().map(TaskDataset::test_split).collect();
    let refs: Vec<&dyn SampleSource> = tests.iter().map(|s| s as &dyn SampleSource).collect();
    for t in state.task..tasks.len() {
        let train = tasks[t].train_split();
        run_task(&mut state, &train, &refs[..=t])?;
        on_task_end(&state)?;
    }
    finish(state, &refs)
}

/// Generates the configured stream and trains on all of it.
pub fn run_sequence(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let stream = make_stream(&cfg.stream_spec())?;
    let state = RunState::new(cfg.clone(), cfg.data.input_dim)?;
    run_stream(state, &stream.tasks, |_| Ok(()))
}

/// Serializes a task-boundary state: magic, format version, payload length,
/// SHA-256 of the payload, JSON payload.
pub fn snapshot(state: &RunState) -> Result<Vec<u8>> {
    if state.phase != RunPhase::Ready {
        return Err(Error::Checkpoint("snapshots are only taken between tasks".into()));
    }
    let payload = serde_json::to_vec(state)?;
    let mut out = Vec::with_capacity(payload.len() + 52);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn restore(bytes: &[u8]) -> Result<RunState> {
    let header = 8 + 4 + 8 + 32;
    if bytes.len() < header || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let payload = &bytes[header..];
    if payload.len() != len {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, header says {len}",
            payload.len()
        )));
    }
    if Sha256::digest(payload).as_slice() != &bytes[20..52] {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }
    let state: RunState = serde_json::from_slice(payload)?;
    if state.phase != RunPhase::Ready {
        return Err(Error::Checkpoint("checkpoint is not at a task boundary".into()));
    }
    Ok(state)
}

pub fn checkpoint_path(dir: &Path, tasks_done: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("task_{tasks_done:03}.ckpt"))
}

pub fn save_checkpoint(state: &RunState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, snapshot(state)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<RunState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(&bytes)
}

/// Latest checkpoint under `dir/checkpoints`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let ckpt = dir.join("checkpoints");
    if !ckpt.is_dir() {
        return Ok(None);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&ckpt)
        .map_err(|e| Error::io(&ckpt, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    files.sort();
    Ok(files.pop())
}

/// `task,epoch,phase,lr,ioe,dac,hat,total,omega,tau`
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("task,epoch,phase,lr,ioe,dac,hat,total,omega,tau\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.task,
            r.epoch,
            r.phase.name(),
            r.lr,
            r.ioe,
            r.dac,
            r.hat,
            r.total,
            r.omega,
            r.tau
        );
    }
    out
}

/// `sample_id,task,class,e0,e1,…`
pub fn embeddings_csv(records: &[EmbeddingRecord]) -> String {
    let dim = records.first().map_or(0, |r| r.embedding.len());
    let mut out = String::from("sample_id,task,class");
    for k in 0..dim {
        let _ = write!(out, ",e{k}");
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{},{},{}", r.sample_id, r.task, r.class);
        for v in &r.embedding {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn report_json(report: &Report) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// Writes metrics.csv, report.json, predictions.csv, embeddings.csv and
/// basis.bin into `dir` and returns the written paths.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files: [(&str, Vec<u8>); 5] = [
        ("metrics.csv", metrics_csv(&out.state.metrics).into_bytes()),
        ("report.json", report_json(&out.report)?.into_bytes()),
        ("predictions.csv", predictions_csv(&out.predictions).into_bytes()),
        ("embeddings.csv", embeddings_csv(&out.embeddings).into_bytes()),
        ("basis.bin", out.state.basis.to_bytes()),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Runs `cfg` on `tasks`, resuming from the newest checkpoint in `dir` when
/// `resume` is set, writing a checkpoint per task when enabled, then all
/// outputs.
pub fn run_to_dir(cfg: &ExperimentConfig, tasks: &[TaskDataset], dir: &Path, resume: bool) -> Result<RunOutput> {
    run_to_dir_with(cfg, tasks, dir, resume, |_| Ok(()))
}

/// [`run_to_dir`] with a callback after every task (and its checkpoint).
pub fn run_to_dir_with<F>(
    cfg: &ExperimentConfig,
    tasks: &[TaskDataset],
    dir: &Path,
    resume: bool,
    mut on_task_end: F,
) -> Result<RunOutput>
where
    F: FnMut(&RunState) -> Result<()>,
{
    let input_dim = tasks
        .first()
        .ok_or_else(|| Error::Config("the stream has no tasks".into()))?
        .dim();
    let state = match resume.then(|| latest_checkpoint(dir)).transpose()?.flatten() {
        Some(path) => {
            let s = load_checkpoint(&path)?;
            if s.config != *cfg {
                return Err(Error::Checkpoint(format!(
                    "{} was written with a different configuration",
                    path.display()
                )));
            }
            s
        }
        None => RunState::new(cfg.clone(), input_dim)?,
    };
    let out = run_stream(state, tasks, |s| {
        if cfg.checkpoints {
            save_checkpoint(s, &checkpoint_path(dir, s.task))?;
        }
        on_task_end(s)
    })?;
    write_outputs(dir, &out)?;
    Ok(out)
}
