//! Synthetic task streams with disjoint label spaces.
//!
//! Three generator families are available:
//!
//! * `gaussian-ring`: class centres on a closed curve
//!   (`cos(2πjk/K), sin(2πjk/K)` for `j = 1, 2, …`, truncated to the input
//!   dimension and scaled to length `separation`) with isotropic noise;
//! * `spirals`: one arm per class in the first two coordinates;
//! * `shells`: concentric spheres, one radius per class.
//!
//! Inputs are standardized with per-coordinate mean and deviation of the
//! training split of the whole stream.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, Mat, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    GaussianRing,
    Spirals,
    Shells,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::GaussianRing => "gaussian-ring",
            Generator::Spirals => "spirals",
            Generator::Shells => "shells",
        }
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-ring" => Ok(Generator::GaussianRing),
            "spirals" => Ok(Generator::Spirals),
            "shells" => Ok(Generator::Shells),
            other => Err(Error::Config(format!("unknown generator `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub generator: Generator,
    pub tasks: usize,
    pub classes_per_task: usize,
    /// Training samples per class.
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub noise: f64,
    pub separation: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            generator: Generator::GaussianRing,
            tasks: 5,
            classes_per_task: 2,
            samples_per_class: 200,
            test_per_class: 200,
            input_dim: 16,
            noise: 1.0,
            separation: 6.0,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::Config("tasks and classes_per_task must be at least 1".into()));
        }
        if self.samples_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("every class needs train and test samples".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        if self.generator == Generator::Spirals && self.input_dim < 2 {
            return Err(Error::Config("spirals need input_dim >= 2".into()));
        }
        if !(self.noise >= 0.0) || !(self.separation > 0.0) {
            return Err(Error::Config("noise must be >= 0 and separation > 0".into()));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.tasks * self.classes_per_task
    }
}

/// One task: inputs, task-local labels and a train/test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: usize,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub label_offset: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl TaskDataset {
    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn global_label(&self, i: usize) -> usize {
        self.label_offset + self.labels[i]
    }

    pub fn train_split(&self) -> Split<'_> {
        Split {
            data: self,
            indices: &self.train,
        }
    }

    pub fn test_split(&self) -> Split<'_> {
        Split {
            data: self,
            indices: &self.test,
        }
    }
}

/// A borrowed view over one split of a task.
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    data: &'a TaskDataset,
    indices: &'a [usize],
}

/// Read access to one split of a task. The trainer reads training data only
/// through this trait, which lets tests count accesses.
pub trait SampleSource {
    fn task_id(&self) -> usize;
    fn class_count(&self) -> usize;
    fn label_offset(&self) -> usize;
    fn len(&self) -> usize;
    fn input(&self, i: usize) -> &[f64];
    fn label(&self, i: usize) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for Split<'_> {
    fn task_id(&self) -> usize {
        self.data.task_id
    }

    fn class_count(&self) -> usize {
        self.data.class_count
    }

    fn label_offset(&self) -> usize {
        self.data.label_offset
    }

    fn len(&self) -> usize {
        self.indices.len()
    }

    fn input(&self, i: usize) -> &[f64] {
        &self.data.inputs[self.indices[i]]
    }

    fn label(&self, i: usize) -> usize {
        self.data.labels[self.indices[i]]
    }
}

/// Gathers rows `rows` of a source into a matrix plus labels.
pub fn gather(source: &dyn SampleSource, rows: &[usize]) -> Result<(Mat, Vec<usize>)> {
    let first = rows
        .first()
        .ok_or_else(|| Error::DegenerateInput("no rows to gather".into()))?;
    let dim = source.input(*first).len();
    let mut data = Vec::with_capacity(rows.len() * dim);
    let mut labels = Vec::with_capacity(rows.len());
    for &r in rows {
        data.extend_from_slice(source.input(r));
        labels.push(source.label(r));
    }
    Ok((Mat::from_vec(rows.len(), dim, data)?, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub spec: StreamSpec,
    pub tasks: Vec<TaskDataset>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn total_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.class_count).sum()
    }
}

const RING_STREAM: u64 = 0xDA7A_0000;

fn ring_centre(k: usize, total: usize, dim: usize, separation: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(dim + 1);
    let mut j = 1;
    while v.len() < dim {
        let angle = 2.0 * std::f64::consts::PI * (j * k) as f64 / total as f64;
        v.push(angle.cos());
        v.push(angle.sin());
        j += 1;
    }
    v.truncate(dim);
    let n = crate::numerics::norm(&v).max(1e-12);
    v.iter().map(|x| separation * x / n).collect()
}

fn draw(spec: &StreamSpec, class: usize, rng: &mut RngStream) -> Vec<f64> {
    let total = spec.total_classes();
    let d = spec.input_dim;
    let mut x = match spec.generator {
        Generator::GaussianRing => ring_centre(class, total, d, spec.separation),
        Generator::Spirals => {
            let r = rng.uniform(0.25, 1.0);
            let angle = 2.0 * std::f64::consts::PI * class as f64 / total as f64 + 2.5 * r;
            let mut v = vec![0.0; d];
            v[0] = spec.separation * r * angle.cos();
            v[1] = spec.separation * r * angle.sin();
            v
        }
        Generator::Shells => {
            let dir = rng.normal_vec(d);
            let n = crate::numerics::norm(&dir).max(1e-12);
            let radius = spec.separation * (class + 1) as f64;
            dir.iter().map(|v| radius * v / n).collect()
        }
    };
    if spec.noise > 0.0 {
        let eps = rng.normal_vec(d);
        axpy(spec.noise, &eps, &mut x);
    }
    x
}

/// Generates the stream. Each class draws from its own random stream, so a
/// stream's content does not depend on generation order.
pub fn make_stream(spec: &StreamSpec) -> Result<TaskStream> {
    spec.validate()?;
    let per_class = spec.samples_per_class + spec.test_per_class;
    let mut tasks = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let offset = t * spec.classes_per_task;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in 0..spec.classes_per_task {
            let mut rng = RngStream::new(spec.seed, RING_STREAM + (offset + c) as u64);
            for s in 0..per_class {
                let idx = inputs.len();
                inputs.push(draw(spec, offset + c, &mut rng));
                labels.push(c);
                if s < spec.samples_per_class {
                    train.push(idx);
                } else {
                    test.push(idx);
                }
            }
        }
        tasks.push(TaskDataset {
            task_id: t,
            inputs,
            labels,
            class_count: spec.classes_per_task,
            label_offset: offset,
            train,
            test,
        });
    }

    let (mean, std) = train_moments(&tasks, spec.input_dim);
    for task in &mut tasks {
        for x in &mut task.inputs {
            for ((v, m), s) in x.iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / s;
            }
        }
    }
    Ok(TaskStream {
        spec: spec.clone(),
        tasks,
        mean,
        std,
    })
}

/// Per-coordinate mean and deviation over training rows only; zero
/// deviations become 1.
fn train_moments(tasks: &[TaskDataset], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut count = 0usize;
    for task in tasks {
        for &i in &task.train {
            axpy(1.0, &task.inputs[i], &mut mean);
            count += 1;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; dim];
    for task in tasks {
        for &i in &task.train {
            for ((v, x), m) in var.iter_mut().zip(&task.inputs[i]).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
    }
    let std = var
        .iter()
        .map(|v| {
            let s = (v / count as f64).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// Per-class means and the pooled within-class covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStatistics {
    pub means: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    /// `Σ_c Σ_{i∈c} (xᵢ - m_c)(xᵢ - m_c)ᵀ / (N - C)`.
    pub pooled_covariance: Mat,
}

/// Statistics of `samples` grouped by `labels` (`0..class_count`).
pub fn class_statistics_of(samples: &[Vec<f64>], labels: &[usize], class_count: usize) -> Result<ClassStatistics> {
    if samples.len() != labels.len() || samples.is_empty() {
        return Err(Error::DegenerateInput(
            "samples and labels must be non-empty and aligned".into(),
        ));
    }
    let dim = samples[0].len();
    let mut means = vec![vec![0.0; dim]; class_count];
    let mut counts = vec![0usize; class_count];
    for (x, &c) in samples.iter().zip(labels) {
        if c >= class_count {
            return Err(Error::Config(format!("label {c} outside 0..{class_count}")));
        }
        axpy(1.0, x, &mut means[c]);
        counts[c] += 1;
    }
    for (c, (m, &n)) in means.iter_mut().zip(&counts).enumerate() {
        if n < 2 {
            return Err(Error::DegenerateInput(format!(
                "class {c} has {n} sample(s); at least 2 are needed"
            )));
        }
        m.iter_mut().for_each(|v| *v /= n as f64);
    }
    let mut cov = Mat::zeros(dim, dim);
    for (x, &c) in samples.iter().zip(labels) {
        let d: Vec<f64> = x.iter().zip(&means[c]).map(|(a, b)| a - b).collect();
        for i in 0..dim {
            for j in 0..dim {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    let dof = (samples.len() - class_count) as f64;
    Ok(ClassStatistics {
        means,
        counts,
        pooled_covariance: cov.scale(1.0 / dof),
    })
}

/// Statistics of the training splits of a stream, by global class.
pub fn class_statistics(stream: &TaskStream) -> Result<ClassStatistics> {
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for task in &stream.tasks {
        for &i in &task.train {
            samples.push(task.inputs[i].clone());
            labels.push(task.global_label(i));
        }
    }
    class_statistics_of(&samples, &labels, stream.total_classes())
}

/// Columnar text export:
///
/// ```text
/// dim,<d>
/// classes,<C_1>,<C_2>,…
/// task,class,split,x0,…,x<d-1>
/// <task>,<local class>,train|test,<features…>
/// ```
pub fn export_csv(stream: &TaskStream) -> String {
    let dim = stream.spec.input_dim;
    let mut out = String::new();
    let _ = writeln!(out, "dim,{dim}");
    let counts: Vec<String> = stream.tasks.iter().map(|t| t.class_count.to_string()).collect();
    let _ = writeln!(out, "classes,{}", counts.join(","));
    let header: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
    let _ = writeln!(out, "task,class,split,{}", header.join(","));
    for task in &stream.tasks {
        let mut rows: Vec<(usize, &str)> = task.train.iter().map(|&i| (i, "train")).collect();
        rows.extend(task.test.iter().map(|&i| (i, "test")));
        rows.sort_unstable();
        for (i, split) in rows {
            let _ = write!(out, "{},{},{}", task.task_id, task.labels[i], split);
            for v in &task.inputs[i] {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

/// Inverse of [`export_csv`]. Inputs are returned as stored, i.e. already
/// standardized.
pub fn import_csv(text: &str) -> Result<Vec<TaskDataset>> {
    let bad = |line: usize, msg: &str| Error::Config(format!("dataset line {line}: {msg}"));
    let mut lines = text.lines().enumerate();
    let dim = match lines.next() {
        Some((_, l)) => l
            .strip_prefix("dim,")
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| bad(1, "expected `dim,<d>`"))?,
        None => return Err(bad(1, "empty file")),
    };
    let counts: Vec<usize> = match lines.next() {
        Some((_, l)) => l
            .strip_prefix("classes,")
            .ok_or_else(|| bad(2, "expected `classes,…`"))?
            .split(',')
            .map(|v| v.trim().parse::<usize>().map_err(|_| bad(2, "bad class count")))
            .collect::<Result<_>>()?,
        None => return Err(bad(2, "missing class counts")),
    };
    lines.next();
    let mut offset = 0;
    let mut tasks: Vec<TaskDataset> = counts
        .iter()
        .enumerate()
        .map(|(t, &c)| {
            let task = TaskDataset {
                task_id: t,
                inputs: Vec::new(),
                labels: Vec::new(),
                class_count: c,
                label_offset: offset,
                train: Vec::new(),
                test: Vec::new(),
            };
            offset += c;
            task
        })
        .collect();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + dim {
            return Err(bad(n + 1, "wrong number of fields"));
        }
        let t: usize = fields[0].parse().map_err(|_| bad(n + 1, "bad task"))?;
        let c: usize = fields[1].parse().map_err(|_| bad(n + 1, "bad class"))?;
        let task = tasks.get_mut(t).ok_or_else(|| bad(n + 1, "task out of range"))?;
        if c >= task.class_count {
            return Err(bad(n + 1, "class out of range"));
        }
        let x = fields[3..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| bad(n + 1, "bad feature")))
            .collect::<Result<Vec<_>>>()?;
        let idx = task.inputs.len();
        match fields[2] {
            "train" => task.train.push(idx),
            "test" => task.test.push(idx),
            _ => return Err(bad(n + 1, "split must be train or test")),
        }
        task.inputs.push(x);
        task.labels.push(c);
    }
    Ok(tasks)
}

pub fn write_csv(stream: &TaskStream, path: &Path) -> Result<()> {
    std::fs::write(path, export_csv(stream)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(generator: Generator) -> StreamSpec {
        StreamSpec {
            generator,
            tasks: 5,
            classes_per_task: 2,
            samples_per_class: 20,
            test_per_class: 10,
            input_dim: 6,
            noise: 0.5,
            separation: 4.0,
            seed: 11,
        }
    }

    #[test]
    fn label_offsets_count_up() {
        let s = make_stream(&small(Generator::GaussianRing)).unwrap();
        let offsets: Vec<usize> = s.tasks.iter().map(|t| t.label_offset).collect();
        assert_eq!(offsets, vec![0, 2, 4, 6, 8]);
        assert_eq!(s.total_classes(), 10);
        let mut seen = std::collections::BTreeSet::new();
        for t in &s.tasks {
            for i in 0..t.inputs.len() {
                seen.insert(t.global_label(i));
            }
            for &i in &t.train {
                assert!(!t.test.contains(&i));
            }
            assert_eq!(t.train.len(), 40);
            assert_eq!(t.test.len(), 20);
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn generation_is_deterministic() {
        for g in [Generator::GaussianRing, Generator::Spirals, Generator::Shells] {
            assert_eq!(make_stream(&small(g)).unwrap(), make_stream(&small(g)).unwrap());
        }
        let mut other = small(Generator::Spirals);
        other.seed = 12;
        assert_ne!(
            make_stream(&other).unwrap(),
            make_stream(&small(Generator::Spirals)).unwrap()
        );
    }

    #[test]
    fn noiseless_ring_classes_are_points() {
        let mut spec = small(Generator::GaussianRing);
        spec.noise = 0.0;
        let s = make_stream(&spec).unwrap();
        let mut points: Vec<Vec<f64>> = Vec::new();
        for t in &s.tasks {
            for c in 0..2 {
                let rows: Vec<&Vec<f64>> = (0..t.inputs.len())
                    .filter(|&i| t.labels[i] == c)
                    .map(|i| &t.inputs[i])
                    .collect();
                assert!(rows.iter().all(|r| *r == rows[0]));
                points.push(rows[0].clone());
            }
        }
        for i in 0..points.len() {
            for j in 0..i {
                assert!(crate::numerics::norm(&crate::numerics::sub(&points[i], &points[j])) > 1e-6);
            }
        }
    }

    #[test]
    fn standardization_uses_train_rows_only() {
        let s = make_stream(&small(Generator::Shells)).unwrap();
        let mut mean = vec![0.0; 6];
        let mut n = 0.0;
        for t in &s.tasks {
            for &i in &t.train {
                axpy(1.0, &t.inputs[i], &mut mean);
                n += 1.0;
            }
        }
        assert!(mean.iter().all(|m| (m / n).abs() < 1e-12));

        // perturbing test rows before standardization leaves the moments alone
        let raw = {
            let mut spec = small(Generator::Shells);
            spec.test_per_class = 30;
            make_stream(&spec).unwrap()
        };
        assert_eq!(raw.mean, s.mean);
        assert_eq!(raw.std, s.std);
    }

    #[test]
    fn invalid_spec_is_config_error() {
        let mut spec = small(Generator::GaussianRing);
        spec.tasks = 0;
        assert!(matches!(make_stream(&spec), Err(Error::Config(_))));
        let mut spec = small(Generator::Spirals);
        spec.input_dim = 1;
        assert!(make_stream(&spec).is_err());
    }

    #[test]
    fn statistics_examples() {
        let st = class_statistics_of(&[vec![0.0, 0.0], vec![2.0, 2.0]], &[0, 0], 1).unwrap();
        assert_eq!(st.means[0], vec![1.0, 1.0]);
        let same = class_statistics_of(&vec![vec![3.0, 1.0]; 4], &[0, 0, 1, 1], 2).unwrap();
        assert!(same.pooled_covariance.as_slice().iter().all(|&v| v == 0.0));
        assert!(matches!(
            class_statistics_of(&[vec![1.0], vec![2.0], vec![3.0]], &[0, 0, 1], 2),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn pooled_covariance_matches_two_pass_formula() {
        let mut rng = RngStream::new(5, 0);
        let samples: Vec<Vec<f64>> = (0..30).map(|_| rng.normal_vec(3)).collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let st = class_statistics_of(&samples, &labels, 3).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let mut acc = 0.0;
                for c in 0..3 {
                    let members: Vec<&Vec<f64>> = samples
                        .iter()
                        .zip(&labels)
                        .filter(|(_, &l)| l == c)
                        .map(|(x, _)| x)
                        .collect();
                    let ma = members.iter().map(|x| x[a]).sum::<f64>() / members.len() as f64;
                    let mb = members.iter().map(|x| x[b]).sum::<f64>() / members.len() as f64;
                    acc += members.iter().map(|x| (x[a] - ma) * (x[b] - mb)).sum::<f64>();
                }
                assert!((st.pooled_covariance[(a, b)] - acc / 27.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_roundtrip() {
        let s = make_stream(&small(Generator::Spirals)).unwrap();
        let back = import_csv(&export_csv(&s)).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in s.tasks.iter().zip(&back) {
            assert_eq!(a.inputs, b.inputs);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.train, b.train);
            assert_eq!(a.test, b.test);
            assert_eq!(a.label_offset, b.label_offset);
        }
        assert!(import_csv("dim,2\nclasses,1\nh\n0,3,train,1,2\n").is_err());
    }
}
