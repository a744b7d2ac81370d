//! Trimmed-mean aggregation.
//!
//! Survivors are always summed in ascending order, so an aggregate depends
//! on the multiset of inputs and never on client order or scheduling.

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::zo::ClientReport;

/// Number of values dropped from each end.
pub fn trim_count(beta: f64, m: usize) -> usize {
    (beta * m as f64).floor() as usize
}

fn check_beta(beta: f64, m: usize) -> Result<usize> {
    if m == 0 {
        return Err(Error::Empty("trimmed mean input"));
    }
    if !(0.0..0.5).contains(&beta) {
        return Err(Error::InvalidTrim { beta, m });
    }
    let b = trim_count(beta, m);
    if m <= 2 * b {
        return Err(Error::InvalidTrim { beta, m });
    }
    Ok(b)
}

fn trimmed_sorted(values: &mut [f64], b: usize) -> Result<f64> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::non_finite("trimmed mean input (NaN)"));
    }
    values.sort_unstable_by(f64::total_cmp);
    let survivors = &values[b..values.len() - b];
    // A constant multiset returns its value exactly; summing would round.
    if survivors[0] == survivors[survivors.len() - 1] {
        return Ok(survivors[0]);
    }
    let sum = survivors.iter().fold(0.0, |acc, v| acc + v);
    Ok(sum / survivors.len() as f64)
}

/// Mean after dropping the `⌊βm⌋` smallest and largest values.
pub fn trimmed_mean(values: &[f64], beta: f64) -> Result<f64> {
    let b = check_beta(beta, values.len())?;
    trimmed_sorted(&mut values.to_vec(), b)
}

/// Per-direction trimmed mean over the clients' reports.
pub fn robust_direction_aggregate(reports: &[ClientReport], beta: f64) -> Result<Vec<f64>> {
    let b = check_beta(beta, reports.len())?;
    let k = reports[0].coefficients.len();
    if let Some(bad) = reports.iter().find(|r| r.coefficients.len() != k) {
        return Err(Error::LengthMismatch {
            expected: k,
            actual: bad.coefficients.len(),
        });
    }
    let mut column = vec![0.0; reports.len()];
    (0..k)
        .map(|r| {
            for (slot, rep) in column.iter_mut().zip(reports) {
                *slot = rep.coefficients[r];
            }
            trimmed_sorted(&mut column, b)
        })
        .collect()
}

/// Coordinate-wise trimmed mean of full vectors.
pub fn coordwise_trimmed_mean(grads: &[ParamVector], beta: f64) -> Result<ParamVector> {
    let b = check_beta(beta, grads.len())?;
    let d = grads[0].dim();
    if let Some(bad) = grads.iter().find(|g| g.dim() != d) {
        return Err(Error::LengthMismatch {
            expected: d,
            actual: bad.dim(),
        });
    }
    let mut column = vec![0.0; grads.len()];
    let out = (0..d)
        .map(|j| {
            for (slot, g) in column.iter_mut().zip(grads) {
                *slot = g[j];
            }
            trimmed_sorted(&mut column, b)
        })
        .collect::<Result<Vec<f64>>>()?;
    ParamVector::new(out)
}

/// Coordinate-wise mean, summed in sorted order like the trimmed variants,
/// so it equals [`coordwise_trimmed_mean`] at `β = 0` bit for bit.
pub fn mean_aggregate(grads: &[ParamVector]) -> Result<ParamVector> {
    coordwise_trimmed_mean(grads, 0.0)
}
