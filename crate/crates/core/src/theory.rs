//! Numerical checks of the OOD-detection bounds on Gaussian mixtures.
//!
//! In-distribution data is a uniform mixture of `k` Gaussians `N(μ_in,i, Σ)`,
//! out-of-distribution data a uniform mixture of `T` Gaussians `N(μ_out,t, Σ)`.
//! The score is `ES(x) = Σᵢ exp(-½ d_M(x, μ_in,i)²)`, and
//! `D = E_in[ES] - E_out[ES]`.
//!
//! Monte Carlo work happens in whitened coordinates (`x' = L⁻¹x` with
//! `Σ = LLᵀ`), where Mahalanobis distances become Euclidean.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::numerics::{sub, symmetric_eigenvalues, unit_normalize, Cholesky, Mat, RngStream};

/// Smallest Monte Carlo sample count accepted by the estimators.
pub const MIN_SAMPLES: usize = 1000;
/// Eigenvalue tolerance for the `Σ_a ⪯ Σ_b` precondition.
pub const PSD_TOL: f64 = -1e-10;

const SPEC_STREAM: u64 = 0x5EC0_0000;
const MC_STREAM: u64 = 0x3C00_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub in_means: Vec<Vec<f64>>,
    pub out_means: Vec<Vec<f64>>,
    pub sigma: Mat,
}

/// A validated spec with its covariance factor and whitened means.
#[derive(Clone, Debug)]
pub struct PreparedSpec {
    pub spec: GmmSpec,
    chol: Cholesky,
    in_w: Vec<Vec<f64>>,
    out_w: Vec<Vec<f64>>,
}

impl GmmSpec {
    pub fn dim(&self) -> usize {
        self.sigma.rows()
    }

    pub fn prepare(&self) -> Result<PreparedSpec> {
        if self.in_means.is_empty() || self.out_means.is_empty() {
            return Err(Error::Config("a mixture needs k >= 1 and T >= 1 components".into()));
        }
        let d = self.dim();
        if !self.sigma.is_square() || !self.sigma.is_symmetric(1e-12) {
            return Err(Error::InvalidCovariance("covariance must be symmetric".into()));
        }
        for m in self.in_means.iter().chain(&self.out_means) {
            if m.len() != d {
                return Err(Error::Config(format!("mean of length {} in dimension {d}", m.len())));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("means must be finite".into()));
            }
        }
        let chol = Cholesky::new(&self.sigma)?;
        let in_w = self.in_means.iter().map(|m| chol.forward_solve(m)).collect();
        let out_w = self.out_means.iter().map(|m| chol.forward_solve(m)).collect();
        Ok(PreparedSpec {
            spec: self.clone(),
            chol,
            in_w,
            out_w,
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl PreparedSpec {
    pub fn k(&self) -> usize {
        self.in_w.len()
    }

    pub fn t(&self) -> usize {
        self.out_w.len()
    }

    pub fn dim(&self) -> usize {
        self.chol.dim()
    }

    /// Mahalanobis distance between `μ_in,i` and `μ_out,t`.
    pub fn d_in_out(&self, i: usize, t: usize) -> f64 {
        sq_dist(&self.in_w[i], &self.out_w[t]).sqrt()
    }

    pub fn d_in_in(&self, i: usize, j: usize) -> f64 {
        sq_dist(&self.in_w[i], &self.in_w[j]).sqrt()
    }

    /// ES of a point given in whitened coordinates.
    fn es_white(&self, xw: &[f64]) -> f64 {
        self.in_w.iter().map(|m| (-0.5 * sq_dist(xw, m)).exp()).sum()
    }

    pub fn es_score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Config("point dimension does not match the spec".into()));
        }
        Ok(self.es_white(&self.chol.forward_solve(x)))
    }

    /// Whitened draw from the uniform mixture over `means`.
    fn draw_white(means: &[Vec<f64>], rng: &mut RngStream) -> Vec<f64> {
        let m = &means[rng.index(means.len())];
        m.iter().map(|v| v + rng.normal()).collect()
    }

    /// Draws a point (original coordinates) from the IND or OOD mixture.
    pub fn sample(&self, out_of_distribution: bool, rng: &mut RngStream) -> Vec<f64> {
        let means = if out_of_distribution {
            &self.spec.out_means
        } else {
            &self.spec.in_means
        };
        let m = &means[rng.index(means.len())];
        let w = rng.normal_vec(self.dim());
        let lw = self.chol.mul_factor(&w);
        m.iter().zip(&lw).map(|(a, b)| a + b).collect()
    }
}

/// `Σᵢ exp(-½ (x-μᵢ)ᵀ Σ⁻¹ (x-μᵢ))`.
pub fn es_score(x: &[f64], spec: &GmmSpec) -> Result<f64> {
    spec.prepare()?.es_score(x)
}

/// Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

fn mc_summary(values: &[f64]) -> McEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    McEstimate {
        mean,
        se: (var / n).sqrt(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub d: f64,
    pub se: f64,
    pub e_in: McEstimate,
    pub e_out: McEstimate,
}

fn check_samples(n: usize) -> Result<()> {
    if n < MIN_SAMPLES {
        return Err(Error::Precondition(format!(
            "Monte Carlo needs at least {MIN_SAMPLES} samples, got {n}"
        )));
    }
    Ok(())
}

/// `D = E_in[ES] - E_out[ES]` from `n` independent draws of each mixture.
pub fn expected_gap_mc(spec: &PreparedSpec, n: usize, rng: &mut RngStream) -> Result<GapEstimate> {
    check_samples(n)?;
    let ins: Vec<f64> = (0..n)
        .map(|_| spec.es_white(&PreparedSpec::draw_white(&spec.in_w, rng)))
        .collect();
    let outs: Vec<f64> = (0..n)
        .map(|_| spec.es_white(&PreparedSpec::draw_white(&spec.out_w, rng)))
        .collect();
    let (e_in, e_out) = (mc_summary(&ins), mc_summary(&outs));
    Ok(GapEstimate {
        d: e_in.mean - e_out.mean,
        se: (e_in.se * e_in.se + e_out.se * e_out.se).sqrt(),
        e_in,
        e_out,
    })
}

/// `(1/T) Σ_t Σ_i ½ d_M(μ_in,i, μ_out,t)`.
pub fn lemma1_bound(spec: &PreparedSpec) -> f64 {
    let mut total = 0.0;
    for t in 0..spec.t() {
        for i in 0..spec.k() {
            total += 0.5 * spec.d_in_out(i, t);
        }
    }
    total / spec.t() as f64
}

/// Both readings of the relaxed bound. With `i₀(t)` the IND mean closest to
/// `μ_out,t`, the first term is `(k/2T) Σ_t d_M(μ_out,t, μ_in,i₀(t))`; the
/// second, `½ Σ_i d_M(μ_in,i₀, μ_in,i)`, is averaged over `t` in `averaged`
/// and maximized over `t` in `conservative`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Bound {
    pub averaged: f64,
    pub conservative: f64,
}

pub fn theorem1_bound(spec: &PreparedSpec) -> Theorem1Bound {
    let (k, t_count) = (spec.k(), spec.t());
    let mut first = 0.0;
    let mut second_sum = 0.0;
    let mut second_max = f64::NEG_INFINITY;
    for t in 0..t_count {
        let mut i0 = 0;
        for i in 1..k {
            if spec.d_in_out(i, t) < spec.d_in_out(i0, t) {
                i0 = i;
            }
        }
        first += spec.d_in_out(i0, t);
        let second: f64 = (0..k).map(|i| 0.5 * spec.d_in_in(i0, i)).sum();
        second_sum += second;
        second_max = second_max.max(second);
    }
    let first = k as f64 / (2.0 * t_count as f64) * first;
    Theorem1Bound {
        averaged: first + second_sum / t_count as f64,
        conservative: first + second_max,
    }
}

/// Paired estimate of `E_out[ES]` and of
/// `(1/T) Σ_t Σ_i [(1 - P_out(B_α(μ_out,t))) + exp(-α²/2)]`, `α = α_{i,t}`,
/// where `B_α` is the open Mahalanobis ball and `P_out` the OOD mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaAEstimate {
    pub bound: McEstimate,
    pub e_out: McEstimate,
    /// Standard error of the per-sample difference `ES(x) - g(x)`.
    pub diff_se: f64,
    pub diff_mean: f64,
}

pub fn lower_bound_lemma_a(spec: &PreparedSpec, n: usize, rng: &mut RngStream) -> Result<LemmaAEstimate> {
    check_samples(n)?;
    let (k, t_count) = (spec.k(), spec.t());
    // radii α_{i,t} = ½ d_M(μ_in,i, μ_out,t)
    let alpha: Vec<Vec<f64>> = (0..t_count)
        .map(|t| (0..k).map(|i| 0.5 * spec.d_in_out(i, t)).collect())
        .collect();
    let mut es = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    for _ in 0..n {
        let x = PreparedSpec::draw_white(&spec.out_w, rng);
        es.push(spec.es_white(&x));
        let mut gx = 0.0;
        for (t, radii) in alpha.iter().enumerate() {
            let r2 = sq_dist(&x, &spec.out_w[t]);
            for &a in radii {
                let inside = if r2 < a * a { 1.0 } else { 0.0 };
                gx += (1.0 - inside) + (-0.5 * a * a).exp();
            }
        }
        g.push(gx / t_count as f64);
    }
    let diff: Vec<f64> = es.iter().zip(&g).map(|(a, b)| a - b).collect();
    let d = mc_summary(&diff);
    Ok(LemmaAEstimate {
        bound: mc_summary(&g),
        e_out: mc_summary(&es),
        diff_se: d.se,
        diff_mean: d.mean,
    })
}

/// `½ d_M(μ₁, μ₂)²` for two Gaussians sharing `Σ`.
pub fn kl_gaussian(mu1: &[f64], mu2: &[f64], sigma: &Mat) -> Result<f64> {
    let chol = Cholesky::new(sigma)?;
    if mu1.len() != chol.dim() || mu2.len() != chol.dim() {
        return Err(Error::Config("mean dimension does not match the covariance".into()));
    }
    Ok(0.5 * chol.inv_quad_form(&sub(mu1, mu2)))
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvReport {
    pub tv: McEstimate,
    /// Closed form `2Φ(d/2) - 1` for equal covariances.
    pub tv_exact: f64,
    pub kl: f64,
    pub pinsker_sqrt: f64,
    pub pinsker_exp: f64,
    pub pass: bool,
}

/// Total variation between `N(μ₁, Σ)` and `N(μ₂, Σ)` by sampling the equal
/// mixture `m = ½(p₁+p₂)`: `TV = E_m[|p₁-p₂| / (p₁+p₂)]`. Both Pinsker-type
/// bounds `√(KL/2)` and `1 - ½e^{-KL}` are checked with a `3·SE` margin.
pub fn tv_and_pinsker(mu1: &[f64], mu2: &[f64], sigma: &Mat, n: usize, rng: &mut RngStream) -> Result<TvReport> {
    check_samples(n)?;
    let chol = Cholesky::new(sigma)?;
    if mu1.len() != chol.dim() || mu2.len() != chol.dim() {
        return Err(Error::Config("mean dimension does not match the covariance".into()));
    }
    let a = chol.forward_solve(mu1);
    let b = chol.forward_solve(mu2);
    let means = [a.clone(), b.clone()];
    let ratios: Vec<f64> = (0..n)
        .map(|_| {
            let x = PreparedSpec::draw_white(&means, rng);
            // log p₁ - log p₂; the normalizers cancel
            let diff = 0.5 * (sq_dist(&x, &b) - sq_dist(&x, &a));
            (0.5 * diff).tanh().abs()
        })
        .collect();
    let tv = mc_summary(&ratios);
    let d = sq_dist(&a, &b).sqrt();
    let kl = 0.5 * d * d;
    let pinsker_sqrt = (kl / 2.0).sqrt();
    let pinsker_exp = 1.0 - 0.5 * (-kl).exp();
    Ok(TvReport {
        tv,
        tv_exact: 2.0 * std_normal_cdf(d / 2.0) - 1.0,
        kl,
        pinsker_sqrt,
        pinsker_exp,
        pass: tv.mean <= pinsker_sqrt.min(pinsker_exp) + 3.0 * tv.se,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub quad_a: f64,
    pub quad_b: f64,
    pub min_gap_eigenvalue: f64,
    pub pass: bool,
}

/// For `Σ_a ⪯ Σ_b`, checks `(u-v)ᵀΣ_a⁻¹(u-v) ≥ (u-v)ᵀΣ_b⁻¹(u-v)` within 1e-10.
pub fn covariance_ordering_check(u: &[f64], v: &[f64], sigma_a: &Mat, sigma_b: &Mat) -> Result<OrderingCheck> {
    let ca = Cholesky::new(sigma_a)?;
    let cb = Cholesky::new(sigma_b)?;
    if ca.dim() != cb.dim() || u.len() != ca.dim() || v.len() != ca.dim() {
        return Err(Error::Config("dimensions do not match".into()));
    }
    let gap = symmetric_eigenvalues(&sigma_b.sub(sigma_a))?;
    let min_gap = gap.iter().copied().fold(f64::INFINITY, f64::min);
    if min_gap < PSD_TOL {
        return Err(Error::Precondition(format!(
            "sigma_b - sigma_a has eigenvalue {min_gap:e}; the ordering does not hold"
        )));
    }
    let w = sub(u, v);
    let (quad_a, quad_b) = (ca.inv_quad_form(&w), cb.inv_quad_form(&w));
    Ok(OrderingCheck {
        quad_a,
        quad_b,
        min_gap_eigenvalue: min_gap,
        pass: quad_a >= quad_b - 1e-10,
    })
}

/// Random SPD matrix `AAᵀ/d + εI` with entries of `A` standard normal.
pub fn random_spd(dim: usize, ridge: f64, rng: &mut RngStream) -> Mat {
    let a = Mat::from_vec(dim, dim, rng.normal_vec(dim * dim)).expect("square");
    let mut s = a.matmul(&a.transpose()).scale(1.0 / dim as f64);
    for i in 0..dim {
        s[(i, i)] += ridge;
    }
    // exact symmetry
    for i in 0..dim {
        for j in 0..i {
            let m = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = m;
            s[(j, i)] = m;
        }
    }
    s
}

/// Random spec: dimension in 2..=16, k and T in 1..=6, and every mean within
/// Mahalanobis radius 5 of a common centre, so pairwise distances stay in
/// `[0, 10]`.
pub fn random_spec(rng: &mut RngStream) -> GmmSpec {
    let dim = 2 + rng.index(15);
    let k = 1 + rng.index(6);
    let t = 1 + rng.index(6);
    let sigma = random_spd(dim, 0.1, rng);
    let chol = Cholesky::new(&sigma).expect("ridge keeps it positive definite");
    let centre = rng.normal_vec(dim);
    let mean = |rng: &mut RngStream| {
        let dir = unit_normalize(&rng.normal_vec(dim)).expect("non-zero draw");
        let r = rng.uniform(0.0, 5.0);
        let w: Vec<f64> = dir.iter().map(|x| r * x).collect();
        let lw = chol.mul_factor(&w);
        centre.iter().zip(&lw).map(|(c, d)| c + d).collect::<Vec<f64>>()
    };
    let in_means = (0..k).map(|_| mean(rng)).collect();
    let out_means = (0..t).map(|_| mean(rng)).collect();
    GmmSpec {
        in_means,
        out_means,
        sigma,
    }
}

/// One row of the bound-verification table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub spec_id: usize,
    pub seed: u64,
    pub dim: usize,
    pub k: usize,
    pub t: usize,
    pub empirical_d: f64,
    pub se: f64,
    pub lemma1: f64,
    pub theorem1: f64,
    pub theorem1_conservative: f64,
    pub e_out: f64,
    pub lemma_a: f64,
    pub lemma_a_se: f64,
    pub pass_lemma1: bool,
    pub pass_theorem1: bool,
    pub pass_lemma_a: bool,
    pub pass_relaxation: bool,
}

impl BoundRow {
    pub fn all_pass(&self) -> bool {
        self.pass_lemma1 && self.pass_theorem1 && self.pass_lemma_a && self.pass_relaxation
    }
}

/// Generates spec `spec_id` from `seed` and runs every estimator on it.
pub fn verify_spec(seed: u64, spec_id: usize, samples: usize) -> Result<BoundRow> {
    let mut spec_rng = RngStream::new(seed, SPEC_STREAM + spec_id as u64);
    let spec = random_spec(&mut spec_rng).prepare()?;
    verify_prepared(&spec, seed, spec_id, samples)
}

pub fn verify_prepared(spec: &PreparedSpec, seed: u64, spec_id: usize, samples: usize) -> Result<BoundRow> {
    let mut rng = RngStream::new(seed, MC_STREAM + spec_id as u64);
    let gap = expected_gap_mc(spec, samples, &mut rng)?;
    let lemma1 = lemma1_bound(spec);
    let th = theorem1_bound(spec);
    let la = lower_bound_lemma_a(spec, samples, &mut rng)?;
    Ok(BoundRow {
        spec_id,
        seed,
        dim: spec.dim(),
        k: spec.k(),
        t: spec.t(),
        empirical_d: gap.d,
        se: gap.se,
        lemma1,
        theorem1: th.averaged,
        theorem1_conservative: th.conservative,
        e_out: la.e_out.mean,
        lemma_a: la.bound.mean,
        lemma_a_se: la.diff_se,
        pass_lemma1: gap.d <= lemma1 + 3.0 * gap.se,
        pass_theorem1: gap.d <= th.averaged + 3.0 * gap.se,
        pass_lemma_a: la.diff_mean <= 3.0 * la.diff_se,
        pass_relaxation: th.averaged >= lemma1 - 1e-12 && th.conservative >= th.averaged - 1e-12,
    })
}

/// Verifies `count` random specs on a pool of `workers` threads. Each spec
/// uses its own random streams, so rows do not depend on scheduling; they are
/// returned in spec order.
pub fn verify_bounds(count: usize, seed: u64, samples: usize, workers: usize) -> Result<Vec<BoundRow>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        (0..count)
            .into_par_iter()
            .map(|id| verify_spec(seed, id, samples))
            .collect()
    })
}

pub fn bounds_csv(rows: &[BoundRow]) -> String {
    let mut out = String::from(
        "spec_id,seed,dim,k,t,empirical_d,se,lemma1,theorem1,theorem1_conservative,e_out,lemma_a,lemma_a_se,pass_lemma1,pass_theorem1,pass_lemma_a,pass_relaxation\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.spec_id,
            r.seed,
            r.dim,
            r.k,
            r.t,
            r.empirical_d,
            r.se,
            r.lemma1,
            r.theorem1,
            r.theorem1_conservative,
            r.e_out,
            r.lemma_a,
            r.lemma_a_se,
            r.pass_lemma1,
            r.pass_theorem1,
            r.pass_lemma_a,
            r.pass_relaxation
        );
    }
    out
}
