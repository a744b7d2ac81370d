//! Zero-order coefficients and seed-replayed model updates.
//!
//! A client turns direction `z` into one signed scalar
//! `c · (f(w + μz) − f(w − μz)) / (2μ)`, with `c = d` for sphere directions
//! and `c = 1` for Gaussian ones. Everyone holding the same seeds rebuilds
//! the update `−η/k · Σ_r ĝ_r z_r` locally.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{Batch, LossModel};
use crate::params::{dot, ParamVector};
use crate::seedstream::{direction, perturb_inplace, perturb_with, DirectionMode, SeedTuple};

/// How a client's model returns to its pre-probe state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Restore {
    /// Copy the model back from a snapshot. Exact.
    Snapshot,
    /// Undo the probes by replaying the perturbations with opposite sign.
    /// Floating-point addition is not invertible, so this can drift by an
    /// ulp per probe.
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoConfig {
    pub mu: f64,
    pub k: usize,
    pub mode: DirectionMode,
    pub mu_zero: bool,
    pub restore: Restore,
}

impl ZoConfig {
    pub fn new(mu: f64, k: usize, mode: DirectionMode) -> Result<Self> {
        let cfg = Self {
            mu,
            k,
            mode,
            mu_zero: mu == 0.0,
            restore: Restore::Snapshot,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(Error::InvalidArgument(format!("mu must be finite and >= 0, got {}", self.mu)));
        }
        if (self.mu > 0.0) == self.mu_zero {
            return Err(Error::InvalidArgument(
                "exactly one of mu > 0 and mu_zero must hold".into(),
            ));
        }
        Ok(())
    }

    /// Dimension factor applied to every coefficient.
    pub fn scale(&self, d: usize) -> f64 {
        match self.mode {
            DirectionMode::Sphere => d as f64,
            DirectionMode::Gaussian => 1.0,
        }
    }
}

/// The scalars one client uploads in one round, ordered by `(epoch, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client: usize,
    pub coefficients: Vec<f64>,
}

fn probe(
    model: &dyn LossModel,
    w: &mut [f64],
    batch: &Batch<'_>,
    cfg: &ZoConfig,
    mut perturb: impl FnMut(&mut [f64], f64),
) -> Result<f64> {
    let mu = cfg.mu;
    if mu.is_nan() || mu <= 0.0 {
        return Err(Error::InvalidArgument(
            "finite-difference coefficient needs mu > 0".into(),
        ));
    }
    let snapshot = (cfg.restore == Restore::Snapshot).then(|| w.to_vec());
    perturb(w, mu);
    let plus = model.loss(w, batch);
    perturb(w, -2.0 * mu);
    let minus = model.loss(w, batch);
    match snapshot {
        Some(s) => w.copy_from_slice(&s),
        None => perturb(w, mu),
    }
    let (plus, minus) = (plus?, minus?);
    let g = cfg.scale(w.len()) * ((plus - minus) / (2.0 * mu));
    if !g.is_finite() {
        return Err(Error::non_finite(format!(
            "coefficient from losses {plus} and {minus}"
        )));
    }
    Ok(g)
}

/// Coefficient along the direction of `seed`, perturbing `w` in place and
/// restoring it before returning.
pub fn zo_coefficient(
    model: &dyn LossModel,
    w: &mut [f64],
    batch: &Batch<'_>,
    cfg: &ZoConfig,
    seed: u64,
) -> Result<f64> {
    let mode = cfg.mode;
    probe(model, w, batch, cfg, |w, s| perturb_inplace(w, s, seed, mode))
}

/// [`zo_coefficient`] for an already materialized direction. Bit-identical
/// to the streamed form when `z` came from the same seed.
pub fn zo_coefficient_with(
    model: &dyn LossModel,
    w: &mut [f64],
    batch: &Batch<'_>,
    cfg: &ZoConfig,
    z: &[f64],
) -> Result<f64> {
    probe(model, w, batch, cfg, |w, s| perturb_with(w, s, z))
}

/// The μ = 0 coefficient `c · ⟨∇f(w; B), z⟩`.
pub fn zo_coefficient_mu0(
    model: &dyn LossModel,
    w: &[f64],
    batch: &Batch<'_>,
    cfg: &ZoConfig,
    seed: u64,
) -> Result<f64> {
    let grad = model.grad(w, batch)?;
    let z = direction(seed, w.len(), cfg.mode);
    projected(&grad, &z, cfg)
}

/// One gradient projected onto several directions.
pub fn projected(grad: &[f64], z: &[f64], cfg: &ZoConfig) -> Result<f64> {
    let g = cfg.scale(z.len()) * dot(grad, z);
    if !g.is_finite() {
        return Err(Error::non_finite("projected gradient coefficient"));
    }
    Ok(g)
}

/// The `k` directions of one `(step, epoch)`, materialized once and shared
/// by every party that needs them.
#[derive(Debug, Clone)]
pub struct DirectionSet {
    pub step: usize,
    pub epoch: usize,
    dirs: Vec<Vec<f64>>,
}

impl DirectionSet {
    pub fn generate(root: u64, step: usize, epoch: usize, k: usize, d: usize, mode: DirectionMode) -> Self {
        let dirs = (0..k)
            .into_par_iter()
            .map(|r| direction(SeedTuple::direction(root, step, r, epoch).derive(), d, mode).into_vec())
            .collect();
        Self { step, epoch, dirs }
    }

    pub fn get(&self, r: usize) -> &[f64] {
        &self.dirs[r]
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }
}

fn check_coeffs(coeffs: &[f64]) -> Result<()> {
    if let Some(r) = coeffs.iter().position(|g| !g.is_finite()) {
        return Err(Error::non_finite(format!("aggregated coefficient {r}")));
    }
    Ok(())
}

/// `w ← w − (η/k) Σ_r ĝ_r z_r`, replaying directions `r = 0, 1, ...` in
/// ascending order from their seeds.
pub fn apply_update(
    w: &mut ParamVector,
    coeffs: &[f64],
    step: usize,
    epoch: usize,
    eta: f64,
    cfg: &ZoConfig,
    root: u64,
) -> Result<()> {
    check_coeffs(coeffs)?;
    let k = coeffs.len() as f64;
    for (r, g) in coeffs.iter().enumerate() {
        let seed = SeedTuple::direction(root, step, r, epoch).derive();
        perturb_inplace(w, -eta * g / k, seed, cfg.mode);
    }
    Ok(())
}

/// [`apply_update`] with cached directions; bit-identical to it.
pub fn apply_update_with(w: &mut [f64], coeffs: &[f64], eta: f64, dirs: &DirectionSet) -> Result<()> {
    check_coeffs(coeffs)?;
    if coeffs.len() != dirs.len() {
        return Err(Error::LengthMismatch {
            expected: dirs.len(),
            actual: coeffs.len(),
        });
    }
    let k = coeffs.len() as f64;
    for (r, g) in coeffs.iter().enumerate() {
        perturb_with(w, -eta * g / k, dirs.get(r));
    }
    Ok(())
}
