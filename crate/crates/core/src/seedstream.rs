//! Shared-seed randomness.
//!
//! Every random vector in a run is a pure function of a [`SeedTuple`]. The
//! federator and each client derive the same 64-bit stream seed from
//! `(root, step, sample, epoch, kind)` and regenerate identical directions,
//! so directions never travel over the wire.
//!
//! Frozen identity (third parties can reproduce streams from this alone):
//!
//! 1. **Derivation.** Starting from `h = 0`, each of the five words
//!    `root, step, sample, epoch, kind.tag()` is absorbed as
//!    `h = mix64((h + 0x9E3779B97F4A7C15) ^ word)` (wrapping add), where
//!    `mix64` is the SplitMix64 finalizer
//!    (`z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
//!    z *= 0x94D049BB133111EB; z ^= z >> 31`).
//! 2. **Generator.** xoshiro256++ whose 256-bit state is the first four
//!    SplitMix64 outputs of the derived seed.
//! 3. **Uniforms.** `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
//! 4. **Gaussians.** Marsaglia's polar method: draw `u, v = 2U - 1`, reject
//!    unless `0 < s = u² + v² < 1`, emit `u·f` then `v·f` with
//!    `f = sqrt(-2 ln s / s)`. Rejected pairs consume stream values.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::params::ParamVector;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Separates streams that must never alias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamKind {
    Direction,
    DataShuffle,
    Init,
    Adversary,
    Partition,
}

impl StreamKind {
    pub fn tag(self) -> u64 {
        match self {
            StreamKind::Direction => 1,
            StreamKind::DataShuffle => 2,
            StreamKind::Init => 3,
            StreamKind::Adversary => 4,
            StreamKind::Partition => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTuple {
    pub root: u64,
    pub step: u64,
    pub sample: u64,
    pub epoch: u64,
    pub kind: StreamKind,
}

impl SeedTuple {
    pub fn new(root: u64, step: u64, sample: u64, epoch: u64, kind: StreamKind) -> Self {
        Self {
            root,
            step,
            sample,
            epoch,
            kind,
        }
    }

    /// Seed of direction `sample` in local epoch `epoch` of round `step`.
    pub fn direction(root: u64, step: usize, sample: usize, epoch: usize) -> Self {
        Self::new(
            root,
            step as u64,
            sample as u64,
            epoch as u64,
            StreamKind::Direction,
        )
    }

    pub fn derive(&self) -> u64 {
        derive_seed(self)
    }
}

pub fn derive_seed(tuple: &SeedTuple) -> u64 {
    [
        tuple.root,
        tuple.step,
        tuple.sample,
        tuple.epoch,
        tuple.kind.tag(),
    ]
    .iter()
    .fold(0u64, |h, &word| mix64(h.wrapping_add(GOLDEN_GAMMA) ^ word))
}

/// Deterministic random stream. The i-th draw depends only on `(seed, i)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn from_tuple(tuple: &SeedTuple) -> Self {
        Self::new(tuple.derive())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, by rejection so there is no modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return x % n;
            }
        }
    }

    /// Standard normal draw via the polar method.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * f);
                return u * f;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// How perturbation directions are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionMode {
    /// i.i.d. standard normal coordinates; no dimension factor on coefficients.
    Gaussian,
    /// Uniform on the unit sphere; coefficients carry a factor `d`.
    Sphere,
}

pub fn gaussian_direction(seed: u64, d: usize) -> ParamVector {
    let mut rng = RngStream::new(seed);
    ParamVector::from_vec_unchecked((0..d).map(|_| rng.gaussian()).collect())
}

pub fn sphere_direction(seed: u64, d: usize) -> ParamVector {
    let mut rng = RngStream::new(seed);
    ParamVector::from_vec_unchecked(sphere_from_stream(&mut rng, d))
}

/// Unit-sphere draw consuming `rng` sequentially; redraws on an all-zero vector.
pub fn sphere_from_stream(rng: &mut RngStream, d: usize) -> Vec<f64> {
    let mut z = vec![0.0; d];
    sphere_fill(rng, &mut z);
    z
}

/// [`sphere_from_stream`] into a caller-owned buffer, with identical values.
pub fn sphere_fill(rng: &mut RngStream, out: &mut [f64]) {
    loop {
        out.iter_mut().for_each(|v| *v = rng.gaussian());
        let n = crate::params::norm(out);
        if n > 0.0 {
            out.iter_mut().for_each(|v| *v /= n);
            return;
        }
    }
}

/// Materializes the direction for `seed`.
pub fn direction(seed: u64, d: usize, mode: DirectionMode) -> ParamVector {
    match mode {
        DirectionMode::Gaussian => gaussian_direction(seed, d),
        DirectionMode::Sphere => sphere_direction(seed, d),
    }
}

/// `w += scale * z(seed)` without materializing `z`.
///
/// Gaussian mode streams one coordinate at a time. Sphere mode first replays
/// the stream to find the normalizer, then replays it again to apply. Each
/// coordinate receives `w[i] + scale * z[i]` with `z[i]` bit-identical to
/// [`direction`], so this agrees with [`perturb_with`] on a cached direction.
pub fn perturb_inplace(w: &mut [f64], scale: f64, seed: u64, mode: DirectionMode) {
    match mode {
        DirectionMode::Gaussian => {
            let mut rng = RngStream::new(seed);
            for wi in w.iter_mut() {
                *wi += scale * rng.gaussian();
            }
        }
        DirectionMode::Sphere => {
            let d = w.len();
            let mut rng = RngStream::new(seed);
            let n = loop {
                let n = streamed_norm(rng.clone(), d);
                if n > 0.0 {
                    break n;
                }
                for _ in 0..d {
                    rng.gaussian();
                }
            };
            for wi in w.iter_mut() {
                *wi += scale * (rng.gaussian() / n);
            }
        }
    }
}

/// Norm of the next `d` Gaussians of `rng`, computed exactly as
/// [`crate::params::norm`] would on the materialized vector.
fn streamed_norm(rng: RngStream, d: usize) -> f64 {
    let mut probe = rng.clone();
    let scale = (0..d).fold(0.0f64, |m, _| m.max(probe.gaussian().abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let mut probe = rng;
    let sumsq = (0..d).fold(0.0f64, |acc, _| {
        let x = probe.gaussian() / scale;
        acc + x * x
    });
    scale * sumsq.sqrt()
}

/// `w += scale * z` for an already materialized direction.
pub fn perturb_with(w: &mut [f64], scale: f64, z: &[f64]) {
    debug_assert_eq!(w.len(), z.len());
    for (wi, zi) in w.iter_mut().zip(z) {
        *wi += scale * zi;
    }
}
