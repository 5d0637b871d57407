//! Per-task out-of-distribution heads, the concatenated-softmax decision rule
//! and the accuracy bookkeeping.
//!
//! Each task gets a linear softmax head on the penultimate features computed
//! under that task's mask. At test time every head scores the input, the
//! per-task probability vectors are concatenated, and the global argmax is
//! the prediction. Ties go to the lower task id (and the lower class).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gates, MaskedNetwork};
use crate::numerics::{dot, log_sum_exp, norm, softmax, Mat, RngStream};
use crate::tasks::SampleSource;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            epochs: 100,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
            weight_decay: 0.0,
        }
    }
}

/// Linear classifier over one task's classes. Features are divided by
/// `feature_scale` (the mean training-feature norm) before the linear map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodHead {
    pub task_id: usize,
    pub class_count: usize,
    pub label_offset: usize,
    pub weights: Mat,
    pub bias: Vec<f64>,
    pub feature_scale: f64,
}

impl OodHead {
    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        (0..self.class_count)
            .map(|c| dot(self.weights.row(c), features) / self.feature_scale + self.bias[c])
            .collect()
    }

    /// Softmax at temperature 1.
    pub fn probabilities(&self, features: &[f64]) -> Vec<f64> {
        softmax(&self.logits(features), 1.0)
    }
}

/// Fits a head by mini-batch cross-entropy. Returns the head and the mean
/// training loss of every epoch.
pub fn fit_head(
    task_id: usize,
    label_offset: usize,
    class_count: usize,
    features: &Mat,
    labels: &[usize],
    cfg: &HeadConfig,
    rng: &mut RngStream,
) -> Result<(OodHead, Vec<f64>)> {
    let n = features.rows();
    if n == 0 || labels.len() != n {
        return Err(Error::Config(format!("task {task_id}: head needs a non-empty dataset")));
    }
    if class_count == 0 || labels.iter().any(|&c| c >= class_count) {
        return Err(Error::Config(format!(
            "task {task_id}: labels outside the head's classes"
        )));
    }
    let dim = features.cols();
    let mean_norm = (0..n).map(|i| norm(features.row(i))).sum::<f64>() / n as f64;
    let mut head = OodHead {
        task_id,
        class_count,
        label_offset,
        weights: Mat::zeros(class_count, dim),
        bias: vec![0.0; class_count],
        feature_scale: if mean_norm > 1e-12 { mean_norm } else { 1.0 },
    };
    if class_count == 1 {
        return Ok((head, vec![0.0; cfg.epochs]));
    }
    let batch = cfg.batch_size.max(1);
    let mut vw = Mat::zeros(class_count, dim);
    let mut vb = vec![0.0; class_count];
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut gw = Mat::zeros(class_count, dim);
            let mut gb = vec![0.0; class_count];
            for &i in chunk {
                let x = features.row(i);
                let logits = head.logits(x);
                let lse = log_sum_exp(&logits);
                epoch_loss += lse - logits[labels[i]];
                for c in 0..class_count {
                    let g = (logits[c] - lse).exp() - if c == labels[i] { 1.0 } else { 0.0 };
                    let g = g / chunk.len() as f64;
                    for (w, xj) in gw.row_mut(c).iter_mut().zip(x) {
                        *w += g * xj / head.feature_scale;
                    }
                    gb[c] += g;
                }
            }
            for ((w, v), g) in head
                .weights
                .as_mut_slice()
                .iter_mut()
                .zip(vw.as_mut_slice())
                .zip(gw.as_slice())
            {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
                *w -= cfg.lr * *v;
            }
            for ((b, v), g) in head.bias.iter_mut().zip(&mut vb).zip(&gb) {
                *v = cfg.momentum * *v + g;
                *b -= cfg.lr * *v;
            }
        }
        history.push(epoch_loss / n as f64);
    }
    Ok((head, history))
}

/// Features of every row of `source` under `mask`.
pub fn source_features(net: &MaskedNetwork, mask: &[Vec<f64>], source: &dyn SampleSource) -> Result<(Mat, Vec<usize>)> {
    let rows: Vec<usize> = (0..source.len()).collect();
    let (x, labels) = crate::tasks::gather(source, &rows)?;
    Ok((net.features(&x, mask)?, labels))
}

/// Trains the head of `source`'s task on features of the frozen encoder
/// under that task's mask.
pub fn train_head(
    net: &MaskedNetwork,
    mask: &[Vec<f64>],
    source: &dyn SampleSource,
    cfg: &HeadConfig,
    rng: &mut RngStream,
) -> Result<(OodHead, Vec<f64>)> {
    if source.is_empty() {
        return Err(Error::Config(format!("task {}: empty training set", source.task_id())));
    }
    let (features, labels) = source_features(net, mask, source)?;
    fit_head(
        source.task_id(),
        source.label_offset(),
        source.class_count(),
        &features,
        &labels,
        cfg,
        rng,
    )
}

/// How a head turns its logits into the score compared across tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreRule {
    /// Concatenate per-task softmax outputs and take the global argmax.
    #[default]
    MaxSoftmax,
    /// Pick the task with the largest log-sum-exp of logits, then the argmax
    /// inside it.
    Energy,
}

impl ScoreRule {
    pub fn name(self) -> &'static str {
        match self {
            ScoreRule::MaxSoftmax => "max-softmax",
            ScoreRule::Energy => "energy",
        }
    }
}

impl std::str::FromStr for ScoreRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-softmax" => Ok(ScoreRule::MaxSoftmax),
            "energy" => Ok(ScoreRule::Energy),
            other => Err(Error::Config(format!("unknown score rule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub predicted_task: usize,
    pub predicted_class: usize,
    /// Largest score of every head.
    pub task_scores: Vec<f64>,
    pub true_label: Option<usize>,
}

/// Applies the decision rule to per-task scores. `offsets[t]` is the first
/// global class of task `t`. The first maximum wins, so ties fall to the lower
/// task id and then the lower class.
pub fn decide(scores: &[Vec<f64>], offsets: &[usize], true_label: Option<usize>) -> Result<DecisionRecord> {
    if scores.is_empty() || scores.len() != offsets.len() {
        return Err(Error::Config("decision needs one score vector per task".into()));
    }
    let mut best = (0usize, 0usize, f64::NEG_INFINITY);
    let mut task_scores = Vec::with_capacity(scores.len());
    for (t, s) in scores.iter().enumerate() {
        let mut task_max = f64::NEG_INFINITY;
        for (c, &v) in s.iter().enumerate() {
            if v > best.2 {
                best = (t, c, v);
            }
            task_max = task_max.max(v);
        }
        task_scores.push(task_max);
    }
    Ok(DecisionRecord {
        predicted_task: best.0,
        predicted_class: offsets[best.0] + best.1,
        task_scores,
        true_label,
    })
}

/// The trained model as seen at test time.
#[derive(Clone, Copy, Debug)]
pub struct Classifier<'a> {
    pub net: &'a MaskedNetwork,
    pub task_masks: &'a [Gates],
    pub heads: &'a [OodHead],
    pub rule: ScoreRule,
}

impl Classifier<'_> {
    /// Per-task head outputs for every row of `x`: `out[t][b]` is task `t`'s
    /// probability vector (or logits under [`ScoreRule::Energy`]).
    pub fn head_outputs(&self, x: &Mat) -> Result<Vec<Vec<Vec<f64>>>> {
        if self.heads.is_empty() || self.heads.len() > self.task_masks.len() {
            return Err(Error::Config("classifier needs a mask for every head".into()));
        }
        self.heads
            .iter()
            .zip(self.task_masks)
            .map(|(head, mask)| {
                let f = self.net.features(x, mask)?;
                Ok((0..x.rows())
                    .map(|b| match self.rule {
                        ScoreRule::MaxSoftmax => head.probabilities(f.row(b)),
                        ScoreRule::Energy => head.logits(f.row(b)),
                    })
                    .collect())
            })
            .collect()
    }

    pub fn decide_batch(&self, x: &Mat, truth: Option<&[usize]>) -> Result<Vec<DecisionRecord>> {
        let outputs = self.head_outputs(x)?;
        let offsets: Vec<usize> = self.heads.iter().map(|h| h.label_offset).collect();
        (0..x.rows())
            .map(|b| {
                let label = truth.map(|t| t[b]);
                let per_task: Vec<Vec<f64>> = outputs.iter().map(|o| o[b].clone()).collect();
                match self.rule {
                    ScoreRule::MaxSoftmax => decide(&per_task, &offsets, label),
                    ScoreRule::Energy => {
                        let energies: Vec<Vec<f64>> = per_task.iter().map(|l| vec![log_sum_exp(l)]).collect();
                        let pick = decide(&energies, &vec![0; offsets.len()], label)?;
                        let t = pick.predicted_task;
                        let within = decide(&per_task[t..=t], &offsets[t..=t], label)?;
                        Ok(DecisionRecord {
                            predicted_task: t,
                            predicted_class: within.predicted_class,
                            task_scores: pick.task_scores,
                            true_label: label,
                        })
                    }
                }
            })
            .collect()
    }

    pub fn decide_one(&self, x: &[f64]) -> Result<DecisionRecord> {
        let m = Mat::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.decide_batch(&m, None)?.remove(0))
    }
}

/// One exported test prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: usize,
    pub true_task: usize,
    pub true_class: usize,
    pub predicted_task: usize,
    pub predicted_class: usize,
    /// Prediction with the true task given (within-task argmax).
    pub oracle_class: usize,
    pub task_scores: Vec<f64>,
}

/// Result of evaluating after task `N`: one CIL accuracy and one task-oracle
/// accuracy per seen task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub cil: Vec<f64>,
    pub oracle: Vec<f64>,
    pub predictions: Vec<PredictionRecord>,
}

impl Evaluation {
    /// Overall accuracies `(cil, oracle)` weighted by sample count.
    pub fn overall(&self) -> (f64, f64) {
        let n = self.predictions.len().max(1) as f64;
        let cil = self
            .predictions
            .iter()
            .filter(|p| p.predicted_class == p.true_class)
            .count();
        let oracle = self
            .predictions
            .iter()
            .filter(|p| p.oracle_class == p.true_class)
            .count();
        (cil as f64 / n, oracle as f64 / n)
    }
}

/// Scores the test split of every task seen so far. Sample ids number the
/// rows in evaluation order.
pub fn evaluate(classifier: &Classifier<'_>, tests: &[&dyn SampleSource]) -> Result<Evaluation> {
    let mut cil = Vec::with_capacity(tests.len());
    let mut oracle = Vec::with_capacity(tests.len());
    let mut predictions = Vec::new();
    for (t, source) in tests.iter().enumerate() {
        if source.is_empty() {
            return Err(Error::Config(format!("task {t}: empty test split")));
        }
        let rows: Vec<usize> = (0..source.len()).collect();
        let (x, local) = crate::tasks::gather(*source, &rows)?;
        let truth: Vec<usize> = local.iter().map(|c| c + source.label_offset()).collect();
        let records = classifier.decide_batch(&x, Some(&truth))?;
        let own = classifier.heads[t].clone();
        let own_features = classifier.net.features(&x, &classifier.task_masks[t])?;
        let (mut hits, mut oracle_hits) = (0usize, 0usize);
        for (b, rec) in records.into_iter().enumerate() {
            let logits = own.logits(own_features.row(b));
            let within = decide(&[logits], &[own.label_offset], None)?.predicted_class;
            hits += usize::from(rec.predicted_class == truth[b]);
            oracle_hits += usize::from(within == truth[b]);
            predictions.push(PredictionRecord {
                sample_id: predictions.len(),
                true_task: t,
                true_class: truth[b],
                predicted_task: rec.predicted_task,
                predicted_class: rec.predicted_class,
                oracle_class: within,
                task_scores: rec.task_scores,
            });
        }
        cil.push(hits as f64 / source.len() as f64);
        oracle.push(oracle_hits as f64 / source.len() as f64);
    }
    Ok(Evaluation {
        cil,
        oracle,
        predictions,
    })
}

/// `sample_id,true_task,true_class,predicted_task,predicted_class,oracle_class,score_0,…`
pub fn predictions_csv(records: &[PredictionRecord]) -> String {
    let tasks = records.iter().map(|r| r.task_scores.len()).max().unwrap_or(0);
    let mut out = String::from("sample_id,true_task,true_class,predicted_task,predicted_class,oracle_class");
    for t in 0..tasks {
        let _ = write!(out, ",score_{t}");
    }
    out.push('\n');
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.sample_id, r.true_task, r.true_class, r.predicted_task, r.predicted_class, r.oracle_class
        );
        for s in &r.task_scores {
            let _ = write!(out, ",{s}");
        }
        out.push('\n');
    }
    out
}

/// Lower-triangular accuracy matrix: row `N` holds the accuracy on tasks
/// `0..=N` after training task `N`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccMatrix {
    pub fn new() -> Self {
        AccMatrix::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccMatrix::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Config(format!(
                "accuracy row {} must have {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("accuracies must lie in [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, n: usize, t: usize) -> Option<f64> {
        self.rows.get(n).and_then(|r| r.get(t)).copied()
    }
}

/// `A_last = mean of the last row`, `A_inc = mean over N of the row means`.
pub fn a_last_a_inc(r: &AccMatrix) -> Result<(f64, f64)> {
    if r.rows.is_empty() {
        return Err(Error::Config("accuracy matrix has no rows".into()));
    }
    for (n, row) in r.rows.iter().enumerate() {
        if row.len() != n + 1 {
            return Err(Error::Config(format!("accuracy row {n} is incomplete")));
        }
    }
    let means: Vec<f64> = r
        .rows
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    let a_last = *means.last().expect("non-empty");
    let a_inc = means.iter().sum::<f64>() / means.len() as f64;
    Ok((a_last, a_inc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decision_examples() {
        let d = decide(&[vec![0.1, 0.7], vec![0.6, 0.2]], &[0, 2], None).unwrap();
        assert_eq!((d.predicted_task, d.predicted_class), (0, 1));
        assert_eq!(d.task_scores, vec![0.7, 0.6]);
        let single = decide(&[vec![0.2, 0.5, 0.3]], &[4], Some(5)).unwrap();
        assert_eq!(single.predicted_class, 5);
        // ties go to the lower task
        let tie = decide(&[vec![0.5, 0.5], vec![0.5, 0.5]], &[0, 2], None).unwrap();
        assert_eq!((tie.predicted_task, tie.predicted_class), (0, 0));
        assert!(decide(&[], &[], None).is_err());
    }

    #[test]
    fn metric_examples() {
        let r = AccMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.6]]).unwrap();
        let (last, inc) = a_last_a_inc(&r).unwrap();
        assert!((last - 0.7).abs() < 1e-15);
        assert!((inc - 0.8).abs() < 1e-15);
        let ones = AccMatrix::from_rows(vec![vec![1.0], vec![1.0, 1.0], vec![1.0; 3]]).unwrap();
        assert_eq!(a_last_a_inc(&ones).unwrap(), (1.0, 1.0));
        assert!(a_last_a_inc(&AccMatrix::new()).is_err());
        assert!(AccMatrix::from_rows(vec![vec![0.5, 0.5]]).is_err());
        let broken = AccMatrix {
            rows: vec![vec![1.0], vec![1.0]],
        };
        assert!(a_last_a_inc(&broken).is_err());
    }

    #[test]
    fn metrics_match_spreadsheet_recomputation() {
        let mut rng = RngStream::new(9, 0);
        for _ in 0..20 {
            let t = 1 + rng.index(7);
            let rows: Vec<Vec<f64>> = (0..t)
                .map(|n| (0..=n).map(|_| rng.uniform(0.0, 1.0)).collect())
                .collect();
            let (last, inc) = a_last_a_inc(&AccMatrix::from_rows(rows.clone()).unwrap()).unwrap();
            let mut total_inc = 0.0;
            for (n, row) in rows.iter().enumerate() {
                let mut s = 0.0;
                for v in row {
                    s += v;
                }
                total_inc += s / (n + 1) as f64;
            }
            let mut s = 0.0;
            for v in &rows[t - 1] {
                s += v;
            }
            assert!((last - s / t as f64).abs() < 1e-12);
            assert!((inc - total_inc / t as f64).abs() < 1e-12);
        }
    }

    fn gaussian_task(rng: &mut RngStream, n: usize, shift: f64) -> (Mat, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let mut x = rng.normal_vec(3);
            x[0] += if c == 0 { -shift } else { shift };
            rows.push(x);
            labels.push(c);
        }
        (Mat::from_rows(&rows).unwrap(), labels)
    }

    fn accuracy(head: &OodHead, x: &Mat, labels: &[usize]) -> f64 {
        let hits = (0..x.rows())
            .filter(|&b| {
                decide(&[head.probabilities(x.row(b))], &[0], None)
                    .unwrap()
                    .predicted_class
                    == labels[b]
            })
            .count();
        hits as f64 / x.rows() as f64
    }

    #[test]
    fn separable_head_is_accurate() {
        let mut rng = RngStream::new(10, 0);
        let (x, y) = gaussian_task(&mut rng, 400, 4.0);
        let (head, losses) = fit_head(0, 0, 2, &x, &y, &HeadConfig::default(), &mut rng).unwrap();
        let (xt, yt) = gaussian_task(&mut rng, 400, 4.0);
        assert!(accuracy(&head, &xt, &yt) >= 0.99);
        let k = losses.len() / 4;
        let early: f64 = losses[..k].iter().sum::<f64>() / k as f64;
        let late: f64 = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
        assert!(late <= early);
    }

    #[test]
    fn shuffled_labels_give_chance() {
        let mut rng = RngStream::new(11, 0);
        let (x, mut y) = gaussian_task(&mut rng, 400, 4.0);
        rng.shuffle(&mut y);
        let (head, _) = fit_head(0, 0, 2, &x, &y, &HeadConfig::default(), &mut rng).unwrap();
        // labels carry no information about inputs in either split
        let (xt, mut yt) = gaussian_task(&mut rng, 1000, 4.0);
        rng.shuffle(&mut yt);
        assert!((accuracy(&head, &xt, &yt) - 0.5).abs() <= 0.1);
    }

    #[test]
    fn single_class_head_always_answers_it() {
        let mut rng = RngStream::new(12, 0);
        let (x, _) = gaussian_task(&mut rng, 10, 1.0);
        let (head, _) = fit_head(3, 7, 1, &x, &[0; 10], &HeadConfig::default(), &mut rng).unwrap();
        for b in 0..10 {
            assert_eq!(head.probabilities(x.row(b)), vec![1.0]);
            assert_eq!(
                decide(&[head.probabilities(x.row(b))], &[7], None)
                    .unwrap()
                    .predicted_class,
                7
            );
        }
        assert!(fit_head(0, 0, 2, &Mat::zeros(0, 3), &[], &HeadConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn predictions_csv_layout() {
        let rec = PredictionRecord {
            sample_id: 0,
            true_task: 1,
            true_class: 3,
            predicted_task: 1,
            predicted_class: 3,
            oracle_class: 3,
            task_scores: vec![0.25, 0.75],
        };
        let csv = predictions_csv(&[rec]);
        assert_eq!(
            csv,
            "sample_id,true_task,true_class,predicted_task,predicted_class,oracle_class,score_0,score_1\n0,1,3,1,3,3,0.25,0.75\n"
        );
    }
}
