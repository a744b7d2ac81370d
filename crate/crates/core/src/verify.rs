//! Monte-Carlo and convergence checks for the zero-order estimator.
//!
//! Each check reports its estimate, the target, the tolerance it was held
//! to and whether it passed. Monte-Carlo sums run in fixed-size shards,
//! each with its own seeded stream, and shards are reduced in index order,
//! so results are deterministic for any thread count.

use std::fmt;

use rayon::prelude::*;

use crate::config::{theory_eta, theory_tau, ExperimentConfig, LearningRate, ModelKind, QuadOptimum};
use crate::error::{Error, Result};
use crate::federation::{run_with, Problem};
use crate::params::{dot, ParamVector};
use crate::seedstream::{sphere_fill, sphere_from_stream, DirectionMode, RngStream, SeedTuple, StreamKind};

const SHARD: usize = 1 << 14;

/// Outcome of one verification check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub estimate: f64,
    pub target: f64,
    pub tolerance: String,
    pub pass: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<34} estimate={:<14.6e} target={:<14.6e} {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.estimate,
            self.target,
            self.tolerance
        )
    }
}

/// Constants of the strongly convex analysis for a quadratic, where the
/// smoothness constant equals the curvature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryParams {
    pub lambda: f64,
    pub l_f: f64,
    pub d: usize,
    pub k: usize,
    pub mu_zero: bool,
}

impl TheoryParams {
    pub fn quadratic(lambda: f64, d: usize, k: usize, mu_zero: bool) -> Self {
        Self {
            lambda,
            l_f: lambda,
            d,
            k,
            mu_zero,
        }
    }

    pub fn tau(&self) -> f64 {
        theory_tau(self.d, self.k, self.mu_zero)
    }

    pub fn eta(&self) -> f64 {
        theory_eta(self.d, self.k, self.mu_zero, self.l_f)
    }

    /// Per-step contraction factor `1 − λ/(τ(L_F + λ))`.
    pub fn rate_bound(&self) -> f64 {
        1.0 - self.lambda / (self.tau() * (self.l_f + self.lambda))
    }
}

/// Runs `n` draws split into shards; `body` gets a fresh stream per shard
/// and the number of draws, and returns a partial accumulator.
fn sharded<A, F>(n: usize, seed: u64, body: F) -> Vec<A>
where
    A: Send,
    F: Fn(&mut RngStream, usize) -> A + Sync,
{
    let shards = n.div_ceil(SHARD);
    (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut rng = RngStream::from_tuple(&SeedTuple::new(seed, s as u64, 0, 0, StreamKind::Init));
            body(&mut rng, SHARD.min(n - s * SHARD))
        })
        .collect()
}

/// Max-abs entrywise deviation of `(1/N) Σ z zᵀ` from `I/d`, plus the
/// largest relative deviation of a diagonal entry from `1/d`.
pub fn mc_isotropy(d: usize, n: usize, seed: u64) -> (f64, f64) {
    let parts = sharded(n, seed, |rng, count| {
        let mut acc = vec![0.0; d * d];
        for _ in 0..count {
            let z = sphere_from_stream(rng, d);
            for i in 0..d {
                for j in 0..d {
                    acc[i * d + j] += z[i] * z[j];
                }
            }
        }
        acc
    });
    let mut acc = vec![0.0; d * d];
    for p in parts {
        for (a, b) in acc.iter_mut().zip(p) {
            *a += b;
        }
    }
    let inv_d = 1.0 / d as f64;
    let mut worst = 0.0f64;
    let mut worst_diag = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { inv_d } else { 0.0 };
            let dev = (acc[i * d + j] / n as f64 - target).abs();
            worst = worst.max(dev);
            if i == j {
                worst_diag = worst_diag.max(dev / inv_d);
            }
        }
    }
    (worst, worst_diag)
}

/// `E‖(1/k) Σ_r d⟨x, z_r⟩ z_r‖² / ‖x‖²` over `n` trials.
pub fn mc_norm_factor(d: usize, k: usize, n: usize, x: &[f64], seed: u64) -> f64 {
    assert_eq!(x.len(), d, "x must have dimension d");
    let parts = sharded(n, seed, |rng, count| {
        let mut total = 0.0;
        let mut v = vec![0.0; d];
        let mut z = vec![0.0; d];
        for _ in 0..count {
            v.iter_mut().for_each(|e| *e = 0.0);
            for _ in 0..k {
                sphere_fill(rng, &mut z);
                let c = d as f64 * dot(x, &z) / k as f64;
                for (vi, zi) in v.iter_mut().zip(&z) {
                    *vi += c * zi;
                }
            }
            total += dot(&v, &v);
        }
        total
    });
    parts.iter().sum::<f64>() / n as f64 / dot(x, x)
}

/// Sum over `n` independent sphere pairs of `|z₁ᵀz₂| (xᵀz₁)²`, and the
/// sum of squares, for mean and standard error.
fn cross_sums(d: usize, n: usize, x: &[f64], seed: u64) -> (f64, f64) {
    let parts = sharded(n, seed, |rng, count| {
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..count {
            let z1 = sphere_from_stream(rng, d);
            let z2 = sphere_from_stream(rng, d);
            let v = dot(&z1, &z2).abs() * dot(x, &z1).powi(2);
            s += v;
            s2 += v * v;
        }
        (s, s2)
    });
    parts.iter().fold((0.0, 0.0), |(a, b), (c, e)| (a + c, b + e))
}

/// Empirical `E[|z₁ᵀz₂| (xᵀz₁)²]`.
pub fn mc_cross_abs_bound(d: usize, n: usize, x: &[f64], seed: u64) -> f64 {
    cross_sums(d, n, x, seed).0 / n as f64
}

/// Monte-Carlo estimate of `F_μ(w) − F(w)` for `F(w) = (λ/2)‖w‖²` at the
/// given point, with its standard error.
pub fn smoothed_gap(lambda: f64, mu: f64, w: &[f64], n: usize, seed: u64) -> (f64, f64) {
    let d = w.len();
    let f = |v: &[f64]| 0.5 * lambda * dot(v, v);
    let f0 = f(w);
    let parts = sharded(n, seed, |rng, count| {
        let (mut s, mut s2) = (0.0, 0.0);
        let mut p = vec![0.0; d];
        for _ in 0..count {
            let z = sphere_from_stream(rng, d);
            for i in 0..d {
                p[i] = w[i] + mu * z[i];
            }
            let g = f(&p) - f0;
            s += g;
            s2 += g * g;
        }
        (s, s2)
    });
    let (s, s2) = parts.iter().fold((0.0, 0.0), |(a, b), (c, e)| (a + c, b + e));
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}

/// `|F_μ(w) − F(w) − λμ²/2|` at a seeded random point of dimension `d`.
pub fn smoothed_gap_quadratic(lambda: f64, mu: f64, d: usize, n: usize, seed: u64) -> f64 {
    let w = random_point(d, seed, 0.5);
    (smoothed_gap(lambda, mu, &w, n, seed).0 - 0.5 * lambda * mu * mu).abs()
}

fn random_point(d: usize, seed: u64, radius: f64) -> Vec<f64> {
    let mut rng = RngStream::from_tuple(&SeedTuple::new(seed, u64::MAX, 0, 0, StreamKind::Init));
    let z = sphere_from_stream(&mut rng, d);
    z.into_iter().map(|v| radius * v).collect()
}

/// Mean distance to the optimum over seeded runs, with a geometric fit.
#[derive(Debug, Clone)]
pub struct Contraction {
    /// Mean of `‖wᵗ − w*‖` across runs, one entry per step `0..=T`.
    pub mean_distance: Vec<f64>,
    /// `exp` of the least-squares slope of `ln` mean distance over the
    /// geometric phase.
    pub rate: f64,
    /// Mean distance over the last quarter of the run.
    pub floor: f64,
}

/// Fits `d_t ≈ C ρᵗ` over the prefix where `d_t` stays above
/// `cutoff · d_0`. A run that lands on the optimum in one step has rate 0.
pub fn fit_rate(dist: &[f64], cutoff: f64) -> f64 {
    let d0 = dist[0];
    let window: Vec<(f64, f64)> = dist
        .iter()
        .enumerate()
        .take_while(|(_, &v)| v > cutoff * d0)
        .map(|(t, &v)| (t as f64, v.ln()))
        .collect();
    if window.len() < 2 {
        return dist.get(1).map_or(0.0, |d1| d1 / d0);
    }
    let n = window.len() as f64;
    let mt = window.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = window.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = window.iter().map(|(t, l)| (t - mt) * (l - ml)).sum();
    let var: f64 = window.iter().map(|(t, _)| (t - mt).powi(2)).sum();
    (cov / var).exp()
}

/// Runs the quadratic config once per seed (varying only `seed`, so the
/// problem instance is shared) and averages distances step by step.
pub fn contraction_rate(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Contraction> {
    if cfg.model != ModelKind::Quadratic {
        return Err(Error::InvalidArgument("contraction checks need the quadratic model".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    let mut base = cfg.clone();
    base.eval_every = 1;
    base.data_seed = Some(cfg.data_seed());
    let problem = Problem::build(&base)?;
    let mut sum = vec![0.0; base.steps + 1];
    for &s in seeds {
        let mut c = base.clone();
        c.seed = s;
        let out = run_with(&c, &problem)?;
        for (acc, log) in sum.iter_mut().zip(&out.logs) {
            *acc += (2.0 * log.train_loss / cfg.quad_lambda).sqrt();
        }
    }
    let mean_distance: Vec<f64> = sum.iter().map(|v| v / seeds.len() as f64).collect();
    let tail = (mean_distance.len() / 4).max(1);
    let floor = mean_distance[mean_distance.len() - tail..].iter().sum::<f64>() / tail as f64;
    Ok(Contraction {
        rate: fit_rate(&mean_distance, 1e-9),
        mean_distance,
        floor,
    })
}

/// Quadratic theory setup: sphere directions, no attackers, theory step.
pub fn theory_config(d: usize, k: usize, mu: f64, steps: usize) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelKind::Quadratic,
        quad_dim: d,
        quad_lambda: 1.0,
        quad_optimum: QuadOptimum::Random,
        m: 4,
        alpha: 0.0,
        beta: 0.0,
        mu,
        mu_zero: mu == 0.0,
        k,
        direction_mode: DirectionMode::Sphere,
        eta: LearningRate::Theory,
        steps,
        eval_every: 1,
        data_seed: Some(2024),
        ..ExperimentConfig::default()
    }
}

pub const THEORY_SEEDS: std::ops::Range<u64> = 1..21;

pub const THEOREM3_STEPS: usize = 1200;

fn check(name: &str, estimate: f64, target: f64, tolerance: String, pass: bool) -> Check {
    Check {
        name: name.into(),
        estimate,
        target,
        tolerance,
        pass,
    }
}

pub fn check_isotropy(seed: u64) -> Check {
    let (dev, _) = mc_isotropy(10, 1_000_000, seed);
    check("isotropy d=10 N=1e6", dev, 0.0, "max |dev| < 0.002".into(), dev < 0.002)
}

pub fn check_isotropy_diagonal(seed: u64) -> Check {
    let (_, diag) = mc_isotropy(10, 1_000_000, seed);
    check("isotropy diagonal d=10", diag, 0.0, "relative < 1%".into(), diag < 0.01)
}

fn unit_x(d: usize, seed: u64) -> Vec<f64> {
    random_point(d, seed ^ 0x5eed, 1.0)
}

pub fn check_norm_factor(d: usize, k: usize, rel_tol: f64, seed: u64) -> Check {
    let x = unit_x(d, seed);
    let ratio = mc_norm_factor(d, k, 200_000, &x, seed);
    let target = (d + k - 1) as f64 / k as f64;
    let rel = (ratio / target - 1.0).abs();
    check(
        &format!("norm factor d={d} k={k}"),
        ratio,
        target,
        format!("relative {:.4} < {rel_tol}", rel),
        rel < rel_tol,
    )
}

pub fn check_cross_bound(seed: u64) -> Check {
    let d = 16;
    let n = 1_000_000;
    let x = unit_x(d, seed);
    let (s, s2) = cross_sums(d, n, &x, seed);
    let mean = s / n as f64;
    let se = ((s2 / n as f64 - mean * mean).max(0.0) / n as f64).sqrt();
    let bound = dot(&x, &x) / (d as f64).powf(1.5);
    let upper = mean + 3.0 * se;
    check(
        "cross bound d=16 N=1e6",
        mean,
        bound,
        format!("mean + 3se = {upper:.3e} <= 0.9 bound"),
        upper <= 0.9 * bound,
    )
}

pub fn check_smoothed_gap(seed: u64) -> Check {
    let (lambda, mu, d, n) = (1.0, 0.1, 64, 100_000);
    let w = random_point(d, seed, 0.5);
    let (gap, se) = smoothed_gap(lambda, mu, &w, n, seed);
    let target = 0.5 * lambda * mu * mu;
    let rel = (gap / target - 1.0).abs();
    check(
        "smoothed gap lambda=1 mu=0.1",
        gap,
        target,
        format!("relative {rel:.4} < 5% (3se = {:.2e})", 3.0 * se),
        rel < 0.05,
    )
}

pub fn check_theorem2() -> Result<Check> {
    let cfg = theory_config(16, 16, 0.0, 60);
    let c = contraction_rate(&cfg, &THEORY_SEEDS.collect::<Vec<_>>())?;
    let bound = TheoryParams::quadratic(1.0, 16, 16, true).rate_bound();
    Ok(check(
        "mu=0 contraction d=16 k=16",
        c.rate,
        bound,
        "rate <= bound + 0.02".into(),
        c.rate <= bound + 0.02,
    ))
}

pub fn check_theorem2_1d() -> Result<Check> {
    let cfg = theory_config(1, 1, 0.0, 10);
    let c = contraction_rate(&cfg, &THEORY_SEEDS.collect::<Vec<_>>())?;
    Ok(check("mu=0 contraction d=1 k=1", c.rate, 0.5, "rate <= 0.52".into(), c.rate <= 0.52))
}

/// Floors of the mean distance at `μ = 10⁻³` and `μ = 10⁻⁴`.
///
/// On a quadratic the central difference has no truncation bias, so the
/// floor is set by rounding in the loss difference. With the optimum at the
/// origin that error scales with `μ`. The transient is identical for both
/// values of `μ` and reaches the floor after about 700 steps; the floor is
/// the mean over the last quarter of 1200 steps.
pub fn theorem3_floors() -> Result<(f64, f64)> {
    let seeds: Vec<u64> = THEORY_SEEDS.collect();
    let floor = |mu: f64| -> Result<f64> {
        let mut cfg = theory_config(16, 16, mu, THEOREM3_STEPS);
        cfg.quad_optimum = QuadOptimum::Origin;
        Ok(contraction_rate(&cfg, &seeds)?.floor)
    };
    Ok((floor(1e-3)?, floor(1e-4)?))
}

pub fn check_theorem3() -> Result<Check> {
    let (hi, lo) = theorem3_floors()?;
    let ratio = hi / lo;
    Ok(check(
        "mu>0 floor ratio 1e-3 / 1e-4",
        ratio,
        5.0,
        format!("floors {hi:.2e} / {lo:.2e}, ratio >= 5"),
        ratio >= 5.0,
    ))
}

pub fn lemma_suite(seed: u64) -> Vec<Check> {
    vec![
        check_isotropy(seed),
        check_isotropy_diagonal(seed),
        check_norm_factor(8, 1, 0.03, seed),
        check_norm_factor(8, 512, 0.02, seed),
        check_cross_bound(seed),
        check_smoothed_gap(seed),
    ]
}

pub fn theorem_suite() -> Result<Vec<Check>> {
    Ok(vec![check_theorem2_1d()?, check_theorem2()?, check_theorem3()?])
}

/// Sanity: a vector of Sphere draws has unit norm, for callers that want a
/// quick self-test of the sampler.
pub fn unit_norm_defect(d: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    (0..draws)
        .map(|_| (ParamVector::from_vec_unchecked(sphere_from_stream(&mut rng, d)).norm() - 1.0).abs())
        .fold(0.0, f64::max)
}
