//! Dense linear algebra, seeded random streams and the finite-difference
//! gradient oracle shared by every other module.
//!
//! Vectors are plain `&[f64]` / `Vec<f64>`; matrices are row-major [`Mat`].
//! Everything is double precision.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Mat::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Config(format!(
                "matrix shape {rows}x{cols} does not match {} entries",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Config("ragged matrix rows".into()));
        }
        Mat::from_vec(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `selfᵀ · v`.
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "matvec_t shape mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Mat { data, ..*self }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Mat { data, ..*self }
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            data: self.data.iter().map(|a| a * s).collect(),
            ..*self
        }
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| {
                (0..i).all(|j| {
                    let (a, b) = (self[(i, j)], self[(j, i)]);
                    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
                })
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `vᵀ · self · v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        dot(v, &self.matvec(v))
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Mat,
}

impl Cholesky {
    /// Factorizes a symmetric positive-definite matrix.
    pub fn new(a: &Mat) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::InvalidCovariance(format!(
                "matrix is {}x{}, not square",
                a.rows, a.cols
            )));
        }
        if !a.is_finite() {
            return Err(Error::InvalidCovariance("non-finite entries".into()));
        }
        if !a.is_symmetric(1e-9) {
            return Err(Error::InvalidCovariance("matrix is not symmetric".into()));
        }
        let n = a.rows;
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::InvalidCovariance(format!(
                    "not positive definite (pivot {j} = {d:e})"
                )));
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn factor(&self) -> &Mat {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// Solves `L y = b`.
    pub fn forward_solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }

    /// Solves `Lᵀ x = y`.
    pub fn backward_solve(&self, y: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.backward_solve(&self.forward_solve(b))
    }

    /// `vᵀ A⁻¹ v`, computed as `‖L⁻¹ v‖²`.
    pub fn inv_quad_form(&self, v: &[f64]) -> f64 {
        let y = self.forward_solve(v);
        dot(&y, &y)
    }

    /// `L · w`, mapping whitened coordinates back to the original space.
    pub fn mul_factor(&self, w: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|i| (0..=i).map(|k| self.l[(i, k)] * w[k]).sum()).collect()
    }

    pub fn inverse(&self) -> Mat {
        let n = self.dim();
        let mut inv = Mat::zeros(n, n);
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[c] = 1.0;
            let col = self.solve(&e);
            for r in 0..n {
                inv[(r, c)] = col[r];
            }
        }
        // symmetrize round-off
        for i in 0..n {
            for j in 0..i {
                let m = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = m;
                inv[(j, i)] = m;
            }
        }
        inv
    }
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky factor.
pub fn spd_inverse(sigma: &Mat) -> Result<Mat> {
    Ok(Cholesky::new(sigma)?.inverse())
}

/// Eigenvalues of a symmetric matrix (cyclic Jacobi), ascending.
pub fn symmetric_eigenvalues(a: &Mat) -> Result<Vec<f64>> {
    if !a.is_symmetric(1e-9) {
        return Err(Error::Precondition("matrix is not symmetric".into()));
    }
    let n = a.rows;
    let mut m = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `y += a · x`.
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Scales `v` to unit Euclidean length.
pub fn unit_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateInput(format!("cannot normalize a vector of norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Mahalanobis distance `sqrt((u−v)ᵀ Σ⁻¹ (u−v))` given the precision matrix.
pub fn mahalanobis(u: &[f64], v: &[f64], sigma_inv: &Mat) -> Result<f64> {
    if u.len() != v.len() || sigma_inv.rows() != u.len() {
        return Err(Error::Config(format!(
            "dimension mismatch: {} / {} against {}x{}",
            u.len(),
            v.len(),
            sigma_inv.rows(),
            sigma_inv.cols()
        )));
    }
    Cholesky::new(sigma_inv)?;
    let d = sub(u, v);
    Ok(sigma_inv.quad_form(&d).max(0.0).sqrt())
}

/// Softmax of `logits / temperature`, stabilized by subtracting the maximum.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log Σ exp(xᵢ)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Central finite differences `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h`.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Precondition(format!("step {h} must be positive")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(i));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    /// Per-coordinate relative error `|a−n| / max(|a|, |n|, 0.01·scale)`, where
    /// `scale` is the largest magnitude in either gradient. The floor keeps
    /// coordinates that are zero up to round-off from dominating.
    pub fn compare(analytic: &[f64], numeric: &[f64]) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let scale = analytic.iter().chain(numeric).fold(0.0_f64, |m, v| m.max(v.abs()));
        let floor = (0.01 * scale).max(1e-12);
        let mut report = GradCheckReport {
            max_relative_error: 0.0,
            worst_coordinate: 0,
            analytic: analytic.first().copied().unwrap_or(0.0),
            numeric: numeric.first().copied().unwrap_or(0.0),
        };
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if rel > report.max_relative_error {
                report = GradCheckReport {
                    max_relative_error: rel,
                    worst_coordinate: i,
                    analytic: a,
                    numeric: n,
                };
            }
        }
        report
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error <= tol
    }
}

/// Reproducible random stream: identical `(seed, stream_id)` pairs produce
/// identical draws. Backed by ChaCha8 with the stream id selecting the
/// ChaCha stream, so streams never overlap.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

/// Serializable position of an [`RngStream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPosition {
    pub seed: u64,
    pub stream_id: u64,
    pub word_pos: u128,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn position(&self) -> RngPosition {
        RngPosition {
            seed: self.seed,
            stream_id: self.stream_id,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(pos: RngPosition) -> Self {
        let mut s = RngStream::new(pos.seed, pos.stream_id);
        s.rng.set_word_pos(pos.word_pos);
        s
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(rng: &mut RngStream, n: usize) -> Mat {
        let a = Mat::from_vec(n, n, rng.normal_vec(n * n)).unwrap();
        a.matmul(&a.transpose()).add(&Mat::identity(n).scale(0.5))
    }

    /// Inverse by Gauss–Jordan elimination with partial pivoting; independent
    /// of the Cholesky path.
    fn gauss_jordan_inverse(a: &Mat) -> Mat {
        let n = a.rows();
        let mut aug = Mat::zeros(n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = a[(i, j)];
            }
            aug[(i, n + i)] = 1.0;
        }
        for c in 0..n {
            let p = (c..n)
                .max_by(|&x, &y| aug[(x, c)].abs().total_cmp(&aug[(y, c)].abs()))
                .unwrap();
            for j in 0..2 * n {
                let tmp = aug[(c, j)];
                aug[(c, j)] = aug[(p, j)];
                aug[(p, j)] = tmp;
            }
            let piv = aug[(c, c)];
            for j in 0..2 * n {
                aug[(c, j)] /= piv;
            }
            for r in 0..n {
                if r != c {
                    let f = aug[(r, c)];
                    for j in 0..2 * n {
                        aug[(r, j)] -= f * aug[(c, j)];
                    }
                }
            }
        }
        let mut inv = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                inv[(i, j)] = aug[(i, n + j)];
            }
        }
        inv
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(unit_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(unit_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        let mut rng = RngStream::new(1, 0);
        let v = unit_normalize(&rng.normal_vec(256)).unwrap();
        assert!((norm(&v) - 1.0).abs() <= 1e-12);
        assert!(matches!(unit_normalize(&[0.0, 0.0]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn mahalanobis_examples() {
        let d = mahalanobis(&[1.0, 1.0], &[0.0, 0.0], &Mat::identity(2)).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        let prec = spd_inverse(&Mat::diag(&[4.0, 1.0])).unwrap();
        let d = mahalanobis(&[2.0, 0.0], &[0.0, 0.0], &prec).unwrap();
        assert!((d - 1.0).abs() < 1e-15);

        let mut rng = RngStream::new(2, 0);
        let sigma = random_spd(&mut rng, 3);
        let explicit = gauss_jordan_inverse(&sigma);
        let (u, v) = (rng.normal_vec(3), rng.normal_vec(3));
        let diff = sub(&u, &v);
        let oracle = explicit.quad_form(&diff).sqrt();
        let got = mahalanobis(&u, &v, &spd_inverse(&sigma).unwrap()).unwrap();
        assert!((got - oracle).abs() < 1e-10 * oracle.max(1.0));

        let not_spd = Mat::diag(&[1.0, -1.0]);
        assert!(matches!(
            mahalanobis(&u[..2], &v[..2], &not_spd),
            Err(Error::InvalidCovariance(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0], 1.0);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300 + f64::EPSILON);
        // direct evaluation of exp(x/τ)/Σ exp(x/τ) at τ = 0.5, no shift
        let direct: Vec<f64> = {
            let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| (x / 0.5).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        let got = softmax(&[1.0, 2.0, 3.0], 0.5);
        for (a, b) in got.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-15);
        }
        // e^2/(1+e^2+e^4) etc., evaluated by hand
        assert!((got[2] - 0.866_813_332_197_334_9).abs() < 1e-12);
    }

    #[test]
    fn spd_inverse_examples() {
        assert_eq!(spd_inverse(&Mat::identity(3)).unwrap(), Mat::identity(3));
        let inv = spd_inverse(&Mat::diag(&[2.0, 5.0])).unwrap();
        assert!(inv.max_abs_diff(&Mat::diag(&[0.5, 0.2])) < 1e-15);
        let mut rng = RngStream::new(3, 0);
        let sigma = random_spd(&mut rng, 4);
        let inv = spd_inverse(&sigma).unwrap();
        assert!(sigma.matmul(&inv).max_abs_diff(&Mat::identity(4)) < 1e-8);
        assert!(matches!(
            spd_inverse(&Mat::diag(&[1.0, 0.0])),
            Err(Error::InvalidCovariance(_))
        ));
    }

    #[test]
    fn eigenvalues_of_known_matrices() {
        let ev = symmetric_eigenvalues(&Mat::diag(&[3.0, -1.0, 2.0])).unwrap();
        assert_eq!(ev, vec![-1.0, 2.0, 3.0]);
        let m = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let ev = symmetric_eigenvalues(&m).unwrap();
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_gradient(|x| dot(x, x), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_gradient(|_| 7.0, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        let err = finite_diff_gradient(|x| if x[1] > 2.0 { f64::NAN } else { 0.0 }, &[0.0, 2.0], 1e-3);
        assert!(matches!(err, Err(Error::NonFinite(1))));
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let a: Vec<f64> = RngStream::new(9, 4).normal_vec(8);
        let b: Vec<f64> = RngStream::new(9, 4).normal_vec(8);
        let c: Vec<f64> = RngStream::new(9, 5).normal_vec(8);
        assert_eq!(a, b);
        assert_ne!(a, c);

        let mut s = RngStream::new(9, 4);
        s.normal_vec(3);
        let mut resumed = RngStream::restore(s.position());
        assert_eq!(s.normal_vec(5), resumed.normal_vec(5));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-10.0f64..10.0, n)
        }

        proptest! {
            #[test]
            fn normalize_is_idempotent(v in vec_strategy(6)) {
                prop_assume!(norm(&v) > 1e-6);
                let once = unit_normalize(&v).unwrap();
                let twice = unit_normalize(&once).unwrap();
                for (a, b) in once.iter().zip(&twice) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }

            #[test]
            fn softmax_shift_invariant(v in vec_strategy(5), c in -100.0f64..100.0, t in 0.05f64..5.0) {
                let p = softmax(&v, t);
                let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
                let q = softmax(&shifted, t);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]
            #[test]
            fn mahalanobis_triangle_inequality(
                seed in any::<u64>(),
                a in vec_strategy(3), b in vec_strategy(3), c in vec_strategy(3),
            ) {
                let mut rng = RngStream::new(seed, 0);
                let prec = spd_inverse(&random_spd(&mut rng, 3)).unwrap();
                let ab = mahalanobis(&a, &b, &prec).unwrap();
                let bc = mahalanobis(&b, &c, &prec).unwrap();
                let ac = mahalanobis(&a, &c, &prec).unwrap();
                let ba = mahalanobis(&b, &a, &prec).unwrap();
                prop_assert!(ac <= ab + bc + 1e-9 * (1.0 + ac));
                prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
            }
        }
    }
}
