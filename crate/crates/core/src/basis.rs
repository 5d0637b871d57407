//! Incrementally generated class anchors on the unit hypersphere.
//!
//! Every learned class owns one unit vector. When a task arrives, its new
//! vectors are generated against all existing ones, which stay frozen. While
//! the cumulative class count fits in the dimension the new vectors are
//! exactly orthonormalized; beyond that, a projected subgradient descent
//! minimizes the summed absolute inner products between new-new and new-old
//! pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, norm, unit_normalize, RngStream};

const MAGIC: &[u8; 8] = b"DCBASIS\0";
const FORMAT_VERSION: u32 = 1;

/// Range of global class indices owned by one task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpan {
    pub start: usize,
    pub count: usize,
}

/// One unit vector per learned class, grouped by task in arrival order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    dim: usize,
    vectors: Vec<Vec<f64>>,
    tasks: Vec<TaskSpan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Largest tolerated `|cos|` between any two vectors once the class count
    /// exceeds the dimension.
    pub max_cosine: f64,
    pub step_size: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            max_cosine: 0.1,
            step_size: 0.05,
            max_iterations: 5000,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.max_cosine) {
            return Err(Error::Config(format!("max_cosine {} outside [0, 1)", self.max_cosine)));
        }
        if self.max_iterations == 0 || !(self.step_size > 0.0) {
            return Err(Error::Config("max_iterations and step_size must be positive".into()));
        }
        Ok(())
    }
}

/// Pairwise `|cos|` statistics of a basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub max_abs_cos: f64,
    pub mean_abs_cos: f64,
    pub pair_count: usize,
    /// `block_max[a][b]`: largest `|cos|` between a vector of task `a` and one
    /// of task `b` (distinct vectors only).
    pub block_max: Vec<Vec<f64>>,
}

impl BasisSet {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("basis dimension must be at least 1".into()));
        }
        Ok(BasisSet {
            dim,
            vectors: Vec::new(),
            tasks: Vec::new(),
        })
    }

    /// Builds a basis from explicit vectors (normalized here), one task per
    /// entry of `task_sizes`.
    pub fn from_vectors(dim: usize, vectors: Vec<Vec<f64>>, task_sizes: &[usize]) -> Result<Self> {
        let mut basis = BasisSet::new(dim)?;
        if task_sizes.iter().sum::<usize>() != vectors.len() {
            return Err(Error::Config("task sizes do not cover the vectors".into()));
        }
        for v in &vectors {
            if v.len() != dim {
                return Err(Error::Config(format!(
                    "vector of length {} in a {dim}-dimensional basis",
                    v.len()
                )));
            }
            basis.vectors.push(unit_normalize(v)?);
        }
        let mut start = 0;
        for &count in task_sizes {
            basis.tasks.push(TaskSpan { start, count });
            start += count;
        }
        Ok(basis)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn vector(&self, class: usize) -> &[f64] {
        &self.vectors[class]
    }

    pub fn tasks(&self) -> &[TaskSpan] {
        &self.tasks
    }

    pub fn task_span(&self, task: usize) -> Option<TaskSpan> {
        self.tasks.get(task).copied()
    }

    /// Vectors owned by `task`.
    pub fn task_vectors(&self, task: usize) -> Option<&[Vec<f64>]> {
        self.task_span(task).map(|s| &self.vectors[s.start..s.start + s.count])
    }

    /// Appends a task with `new_class_count` fresh vectors. Existing vectors
    /// are copied unchanged.
    pub fn extend(&self, new_class_count: usize, cfg: &GeneratorConfig) -> Result<BasisSet> {
        self.extend_traced(new_class_count, cfg).map(|(b, _)| b)
    }

    /// [`extend`](Self::extend), also returning the extension objective after
    /// every accepted descent step (empty in the exact regime).
    pub fn extend_traced(&self, new_class_count: usize, cfg: &GeneratorConfig) -> Result<(BasisSet, Vec<f64>)> {
        if new_class_count == 0 {
            return Err(Error::Config("a task must add at least one class".into()));
        }
        cfg.validate()?;
        let old = self.vectors.len();
        let total = old + new_class_count;
        // one stream per extension, keyed by how many vectors already exist
        let mut rng = RngStream::new(cfg.seed, 0xBA5E_0000 + old as u64);

        let mut trace = Vec::new();
        let fresh = if total <= self.dim {
            self.orthonormal_extension(new_class_count, &mut rng)?
        } else {
            self.penalized_extension(new_class_count, cfg, &mut rng, &mut trace)?
        };

        let mut next = self.clone();
        next.tasks.push(TaskSpan {
            start: old,
            count: new_class_count,
        });
        next.vectors.extend(fresh);
        Ok((next, trace))
    }

    fn orthonormal_extension(&self, count: usize, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
        let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(count);
        while accepted.len() < count {
            let mut v = rng.normal_vec(self.dim);
            // modified Gram-Schmidt, applied twice for round-off
            for _ in 0..2 {
                for u in self.vectors.iter().chain(accepted.iter()) {
                    let c = dot(&v, u);
                    axpy(-c, u, &mut v);
                }
            }
            if norm(&v) < 1e-8 {
                continue;
            }
            accepted.push(unit_normalize(&v)?);
        }
        Ok(accepted)
    }

    fn penalized_extension(
        &self,
        count: usize,
        cfg: &GeneratorConfig,
        rng: &mut RngStream,
        trace: &mut Vec<f64>,
    ) -> Result<Vec<Vec<f64>>> {
        let mut fresh: Vec<Vec<f64>> = (0..count)
            .map(|_| unit_normalize(&rng.normal_vec(self.dim)))
            .collect::<Result<_>>()?;
        let old_worst = self.worst_old_cosine();
        let limit = cfg.max_cosine;
        // aim slightly inside the limit; the absolute-value pull settles at a
        // small excess over wherever the hinge starts
        let target = 0.95 * limit;
        let mut objective = penalty(&fresh, &self.vectors) + hinge(&fresh, &self.vectors, target);
        trace.push(objective);
        let mut step = cfg.step_size;

        for _ in 0..cfg.max_iterations {
            if old_worst.max(worst_new_cosine(&fresh, &self.vectors)) <= limit {
                return Ok(fresh);
            }
            let grads = objective_subgradient(&fresh, &self.vectors, target);
            // backtrack until the objective does not increase
            loop {
                let candidate = fresh
                    .iter()
                    .zip(&grads)
                    .map(|(v, g)| {
                        let mut tangent = g.clone();
                        axpy(-dot(g, v), v, &mut tangent);
                        let mut w = v.clone();
                        axpy(-step, &tangent, &mut w);
                        unit_normalize(&w)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let value = penalty(&candidate, &self.vectors) + hinge(&candidate, &self.vectors, target);
                if value <= objective {
                    fresh = candidate;
                    objective = value;
                    step = (step * 1.2).min(10.0 * cfg.step_size);
                    break;
                }
                step *= 0.5;
                if step < 1e-14 {
                    break;
                }
            }
            trace.push(objective);
            if step < 1e-14 {
                break;
            }
        }
        let worst = old_worst.max(worst_new_cosine(&fresh, &self.vectors));
        if worst <= limit {
            Ok(fresh)
        } else {
            Err(Error::GenerationFailure {
                worst_cos: worst,
                max_cosine: limit,
            })
        }
    }

    fn worst_old_cosine(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.vectors.len() {
            for j in 0..i {
                worst = worst.max(dot(&self.vectors[i], &self.vectors[j]).abs());
            }
        }
        worst
    }

    /// The extension objective for the most recently added task:
    /// `Σ_{i≠j new} |μᵢ·μⱼ| + Σ_{k new, c old} |μₖ·μ_c|`.
    pub fn last_task_penalty(&self) -> f64 {
        match self.tasks.last() {
            Some(span) => penalty(&self.vectors[span.start..], &self.vectors[..span.start]),
            None => 0.0,
        }
    }

    pub fn orthogonality_report(&self) -> Result<OrthogonalityReport> {
        let n = self.vectors.len();
        if n < 2 {
            return Err(Error::DegenerateInput(
                "orthogonality needs at least two vectors".into(),
            ));
        }
        let owner: Vec<usize> = self
            .tasks
            .iter()
            .enumerate()
            .flat_map(|(t, s)| std::iter::repeat_n(t, s.count))
            .collect();
        let tasks = self.tasks.len();
        let mut block_max = vec![vec![0.0; tasks]; tasks];
        let (mut max, mut sum, mut pairs) = (0.0_f64, 0.0, 0usize);
        for i in 0..n {
            for j in 0..i {
                let c = dot(&self.vectors[i], &self.vectors[j]).abs();
                max = max.max(c);
                sum += c;
                pairs += 1;
                let (a, b) = (owner[i], owner[j]);
                block_max[a][b] = f64::max(block_max[a][b], c);
                block_max[b][a] = block_max[a][b];
            }
        }
        Ok(OrthogonalityReport {
            max_abs_cos: max,
            mean_abs_cos: sum / pairs as f64,
            pair_count: pairs,
            block_max,
        })
    }

    /// Binary container, little-endian:
    /// magic `DCBASIS\0`, `u32` version, `u64` dim, `u64` vector count,
    /// `u64` task count, then `(u64 start, u64 count)` per task, then the
    /// vectors row-major as `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + 16 * self.tasks.len() + 8 * self.dim * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [self.dim, self.vectors.len(), self.tasks.len()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for span in &self.tasks {
            out.extend_from_slice(&(span.start as u64).to_le_bytes());
            out.extend_from_slice(&(span.count as u64).to_le_bytes());
        }
        for v in &self.vectors {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a basis container".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "basis container version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let dim = r.u64()? as usize;
        let count = r.u64()? as usize;
        let task_count = r.u64()? as usize;
        let mut tasks = Vec::with_capacity(task_count.min(1 << 16));
        for _ in 0..task_count {
            tasks.push(TaskSpan {
                start: r.u64()? as usize,
                count: r.u64()? as usize,
            });
        }
        let mut vectors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let v = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            vectors.push(v);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes in basis container".into()));
        }
        let mut expected = 0;
        for span in &tasks {
            if span.start != expected {
                return Err(Error::Checkpoint("task spans are not contiguous".into()));
            }
            expected += span.count;
        }
        if expected != count || dim == 0 {
            return Err(Error::Checkpoint("task spans do not cover the vectors".into()));
        }
        Ok(BasisSet { dim, vectors, tasks })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated basis container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn penalty(fresh: &[Vec<f64>], old: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (i, a) in fresh.iter().enumerate() {
        for (j, b) in fresh.iter().enumerate() {
            if i != j {
                total += dot(a, b).abs();
            }
        }
        for c in old {
            total += dot(a, c).abs();
        }
    }
    total
}

fn penalty_subgradient(fresh: &[Vec<f64>], old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    fresh
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut g = vec![0.0; a.len()];
            for (j, b) in fresh.iter().enumerate() {
                if i != j {
                    // ordered pairs (i,j) and (j,i) both contribute
                    axpy(2.0 * sign(dot(a, b)), b, &mut g);
                }
            }
            for c in old {
                axpy(sign(dot(a, c)), c, &mut g);
            }
            g
        })
        .collect()
}

/// Weight on the squared excess over the cosine limit. The absolute-value
/// penalty alone is minimized by sparse vectors, which against a frozen
/// orthonormal set means landing on an old vector.
const HINGE_WEIGHT: f64 = 200.0;

fn hinge(fresh: &[Vec<f64>], old: &[Vec<f64>], limit: f64) -> f64 {
    let mut total = 0.0;
    for (i, a) in fresh.iter().enumerate() {
        for b in fresh[..i].iter().chain(old) {
            let excess = (dot(a, b).abs() - limit).max(0.0);
            total += excess * excess;
        }
    }
    HINGE_WEIGHT * total
}

fn objective_subgradient(fresh: &[Vec<f64>], old: &[Vec<f64>], limit: f64) -> Vec<Vec<f64>> {
    let mut grads = penalty_subgradient(fresh, old);
    for (i, a) in fresh.iter().enumerate() {
        let others = fresh
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, b)| b)
            .chain(old);
        for b in others {
            let c = dot(a, b);
            let excess = c.abs() - limit;
            if excess > 0.0 {
                axpy(2.0 * HINGE_WEIGHT * excess * sign(c), b, &mut grads[i]);
            }
        }
    }
    grads
}

fn worst_new_cosine(fresh: &[Vec<f64>], old: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0_f64;
    for (i, a) in fresh.iter().enumerate() {
        for b in fresh[..i].iter().chain(old) {
            worst = worst.max(dot(a, b).abs());
        }
    }
    worst
}

/// Subgradient of `|x|`, taking 0 at the kink.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_max_cos(vectors: &[Vec<f64>]) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..vectors.len() {
            for j in 0..vectors.len() {
                if i != j {
                    let c = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum::<f64>();
                    worst = worst.max(c.abs());
                }
            }
        }
        worst
    }

    #[test]
    fn exact_regime_is_orthonormal() {
        let basis = BasisSet::new(3)
            .unwrap()
            .extend(3, &GeneratorConfig::default())
            .unwrap();
        assert_eq!(basis.len(), 3);
        for v in basis.vectors() {
            assert!((norm(v) - 1.0).abs() < 1e-9);
        }
        assert!(brute_force_max_cos(basis.vectors()) <= 1e-6);
        assert!(basis.last_task_penalty() <= 1e-6);
    }

    #[test]
    fn second_vector_in_plane_is_forced() {
        let e1 = BasisSet::from_vectors(2, vec![vec![1.0, 0.0]], &[1]).unwrap();
        let ext = e1.extend(1, &GeneratorConfig::default()).unwrap();
        let v = ext.vector(1);
        assert!(v[0].abs() < 1e-12);
        assert!((v[1].abs() - 1.0).abs() < 1e-12);
        assert_eq!(ext.vector(0), &[1.0, 0.0]);
    }

    #[test]
    fn overcomplete_regime_reaches_feasible_limit() {
        // after 8 frozen orthonormal vectors in R^8 any new vector has some
        // |cos| >= 1/sqrt(8) ≈ 0.354
        let cfg = GeneratorConfig {
            max_cosine: 0.5,
            ..GeneratorConfig::default()
        };
        let first = BasisSet::new(8).unwrap().extend(8, &cfg).unwrap();
        let (basis, trace) = first.extend_traced(4, &cfg).unwrap();
        let report = basis.orthogonality_report().unwrap();
        assert!(report.max_abs_cos <= 0.5);
        assert_eq!(report.max_abs_cos, brute_force_max_cos(basis.vectors()));
        assert!(!trace.is_empty());
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(&basis.vectors()[..8], first.vectors());
    }

    #[test]
    fn joint_overcomplete_generation() {
        // 12 vectors in R^8 at once; the Welch bound is sqrt(4/88) ≈ 0.213
        let cfg = GeneratorConfig {
            max_cosine: 0.3,
            ..GeneratorConfig::default()
        };
        let basis = BasisSet::new(8).unwrap().extend(12, &cfg).unwrap();
        let worst = brute_force_max_cos(basis.vectors());
        assert!(worst <= 0.3, "{worst}");
        assert!(worst >= (4.0_f64 / 88.0).sqrt());
    }

    #[test]
    fn infeasible_limit_reports_achieved_cosine() {
        let cfg = GeneratorConfig {
            max_cosine: 0.1,
            max_iterations: 500,
            ..GeneratorConfig::default()
        };
        let err = BasisSet::new(2).unwrap().extend(3, &cfg).unwrap_err();
        match err {
            // three unit vectors in the plane: best worst-case |cos| is 0.5
            Error::GenerationFailure { worst_cos, .. } => assert!(worst_cos >= 0.5 - 1e-9),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn report_examples() {
        let ortho = BasisSet::from_vectors(
            3,
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            &[2, 1],
        )
        .unwrap();
        let r = ortho.orthogonality_report().unwrap();
        assert_eq!(r.max_abs_cos, 0.0);
        assert_eq!(r.pair_count, 3);

        let dup = BasisSet::from_vectors(2, vec![vec![1.0, 1.0], vec![1.0, 1.0]], &[2]).unwrap();
        assert!((dup.orthogonality_report().unwrap().max_abs_cos - 1.0).abs() < 1e-12);

        let single = BasisSet::from_vectors(2, vec![vec![1.0, 0.0]], &[1]).unwrap();
        assert!(single.orthogonality_report().is_err());
    }

    #[test]
    fn byte_container_roundtrip_and_rejection() {
        let basis = BasisSet::new(5)
            .unwrap()
            .extend(2, &GeneratorConfig::default())
            .unwrap()
            .extend(3, &GeneratorConfig::default())
            .unwrap();
        let bytes = basis.to_bytes();
        assert_eq!(BasisSet::from_bytes(&bytes).unwrap(), basis);
        assert!(BasisSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(BasisSet::from_bytes(&bad).is_err());
    }

    #[test]
    fn zero_classes_is_a_config_error() {
        let err = BasisSet::new(4).unwrap().extend(0, &GeneratorConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn history_is_immutable_and_deterministic(
                seed in any::<u64>(),
                sizes in proptest::collection::vec(1usize..4, 1..5),
            ) {
                let cfg = GeneratorConfig { seed, ..GeneratorConfig::default() };
                let mut basis = BasisSet::new(16).unwrap();
                for &n in &sizes {
                    let next = basis.extend(n, &cfg).unwrap();
                    prop_assert_eq!(&next.vectors()[..basis.len()], basis.vectors());
                    prop_assert_eq!(&next, &basis.extend(n, &cfg).unwrap());
                    basis = next;
                }
                prop_assert!(brute_force_max_cos(basis.vectors()) <= 1e-6);
            }
        }
    }
}
