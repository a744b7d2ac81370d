//! Dense model vectors and the arithmetic shared by every engine.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

/// Dense real parameter vector. The length is fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Wraps `entries`, rejecting NaN and infinities.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if let Some(i) = entries.iter().position(|x| !x.is_finite()) {
            return Err(Error::non_finite(format!("parameter entry {i}")));
        }
        Ok(Self(entries))
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    /// Wraps without the finiteness scan. Callers own the invariant.
    pub(crate) fn from_vec_unchecked(entries: Vec<f64>) -> Self {
        Self(entries)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        check_len(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Model vector plus the number of completed rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub w: ParamVector,
    pub step: usize,
}

impl ModelState {
    pub fn new(w: ParamVector) -> Self {
        Self { w, step: 0 }
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }
}

/// Euclidean projection onto the closed ball of the given radius.
pub fn project_ball(w: &ParamVector, radius: f64) -> Result<ParamVector> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "projection radius must be positive and finite, got {radius}"
        )));
    }
    if !w.is_finite() {
        return Err(Error::non_finite("project_ball input"));
    }
    let n = w.norm();
    if n <= radius {
        return Ok(w.clone());
    }
    let s = radius / n;
    let mut out: Vec<f64> = w.iter().map(|x| x * s).collect();
    // Rounding in the rescale can leave the norm a hair above the radius;
    // nudge down until it is inside so projection stays idempotent.
    while norm(&out) > radius {
        for x in out.iter_mut() {
            *x *= 1.0 - f64::EPSILON;
        }
    }
    Ok(ParamVector(out))
}

/// `w + scale * v`.
pub fn axpy(w: &ParamVector, scale: f64, v: &ParamVector) -> Result<ParamVector> {
    check_len(w.dim(), v.dim())?;
    let out = w.iter().zip(v.iter()).map(|(a, b)| a + scale * b).collect();
    ParamVector::new(out)
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    // Scaled to survive entries near the overflow threshold.
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let s = a.iter().fold(0.0f64, |acc, x| {
        let y = x / scale;
        acc + y * y
    });
    scale * s.sqrt()
}
