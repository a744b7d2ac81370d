//! Byzantine behaviours.
//!
//! Colluding attackers see every honest coefficient of the current round
//! before choosing theirs, and all of them send the same value for a given
//! direction. Label flipping instead poisons the attackers' local data and
//! lets them follow the protocol.

use std::fmt;
use std::str::FromStr;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::robust::trim_count;
use crate::seedstream::{RngStream, SeedTuple, StreamKind};
use crate::zo::ClientReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    None,
    FullKnowledge,
    AlwaysSmall,
    AlwaysLarge,
    RandomChoice,
    LabelFlipping,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::None,
        AttackKind::FullKnowledge,
        AttackKind::AlwaysSmall,
        AttackKind::AlwaysLarge,
        AttackKind::RandomChoice,
        AttackKind::LabelFlipping,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::FullKnowledge => "full_knowledge",
            AttackKind::AlwaysSmall => "always_small",
            AttackKind::AlwaysLarge => "always_large",
            AttackKind::RandomChoice => "random_choice",
            AttackKind::LabelFlipping => "label_flipping",
        }
    }

    /// Attacks that overwrite uploaded scalars rather than data.
    pub fn is_value_attack(self) -> bool {
        !matches!(self, AttackKind::None | AttackKind::LabelFlipping)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = AttackKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown attack '{s}', expected one of {}", names.join(", "))
            })
    }
}

/// Which clients misbehave and how. The attackers are the last `⌊αm⌋`
/// client indices for the whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub m: usize,
    pub byzantine: usize,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, m: usize, alpha: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "byzantine fraction must lie in [0, 1/2), got {alpha}"
            )));
        }
        let byzantine = if kind == AttackKind::None {
            0
        } else {
            (alpha * m as f64).floor() as usize
        };
        Ok(Self { kind, m, byzantine })
    }

    pub fn honest(&self) -> usize {
        self.m - self.byzantine
    }

    pub fn is_byzantine(&self, client: usize) -> bool {
        client >= self.honest()
    }
}

/// 1-based order-statistic index `max(⌊βm⌋, 1)`, capped at the number of
/// honest values.
fn order_index(beta: f64, m: usize, n: usize) -> usize {
    trim_count(beta, m).max(1).min(n)
}

fn sorted(honest: &[f64]) -> Result<Vec<f64>> {
    if honest.is_empty() {
        return Err(Error::Empty("honest values"));
    }
    let mut v = honest.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    Ok(v)
}

pub fn always_small(honest: &[f64], beta: f64, m: usize) -> Result<f64> {
    let v = sorted(honest)?;
    Ok(v[order_index(beta, m, v.len()) - 1])
}

pub fn always_large(honest: &[f64], beta: f64, m: usize) -> Result<f64> {
    let v = sorted(honest)?;
    Ok(v[v.len() - order_index(beta, m, v.len())])
}

pub fn random_choice(honest: &[f64], beta: f64, m: usize, rng: &mut RngStream) -> Result<f64> {
    if rng.next_u64() >> 63 == 0 {
        always_small(honest, beta, m)
    } else {
        always_large(honest, beta, m)
    }
}

/// Pulls against the honest consensus: a non-negative honest mean (summed
/// over honest values, divided by `m`) draws the small order statistic,
/// a negative one the large.
pub fn full_knowledge(honest: &[f64], beta: f64, m: usize) -> Result<f64> {
    if honest.is_empty() {
        return Err(Error::Empty("honest values"));
    }
    let mean = honest.iter().sum::<f64>() / m as f64;
    if mean >= 0.0 {
        always_small(honest, beta, m)
    } else {
        always_large(honest, beta, m)
    }
}

fn column_value(kind: AttackKind, honest: &[f64], beta: f64, m: usize, rng: &mut RngStream) -> Result<f64> {
    match kind {
        AttackKind::FullKnowledge => full_knowledge(honest, beta, m),
        AttackKind::AlwaysSmall => always_small(honest, beta, m),
        AttackKind::AlwaysLarge => always_large(honest, beta, m),
        AttackKind::RandomChoice => random_choice(honest, beta, m, rng),
        AttackKind::None | AttackKind::LabelFlipping => {
            unreachable!("not a value attack")
        }
    }
}

fn adversary_rng(root: u64, step: usize, column: usize) -> RngStream {
    RngStream::from_tuple(&SeedTuple::new(
        root,
        step as u64,
        column as u64,
        0,
        StreamKind::Adversary,
    ))
}

/// Fills in the Byzantine reports of one round. `reports` holds all `m`
/// clients in index order; the attackers' entries are overwritten.
pub fn inject(
    spec: &AttackSpec,
    reports: &mut [ClientReport],
    beta: f64,
    root: u64,
    step: usize,
) -> Result<()> {
    if !spec.kind.is_value_attack() || spec.byzantine == 0 {
        return Ok(());
    }
    let h = spec.honest();
    let cols = reports[0].coefficients.len();
    let mut honest = vec![0.0; h];
    for r in 0..cols {
        for (slot, rep) in honest.iter_mut().zip(&reports[..h]) {
            *slot = rep.coefficients[r];
        }
        let mut rng = adversary_rng(root, step, r);
        let v = column_value(spec.kind, &honest, beta, spec.m, &mut rng)?;
        for rep in &mut reports[h..] {
            rep.coefficients[r] = v;
        }
    }
    Ok(())
}

/// Coordinate-wise analogue of [`inject`] for full-gradient baselines:
/// returns the vector every attacker sends.
pub fn attack_vector(
    spec: &AttackSpec,
    honest: &[ParamVector],
    beta: f64,
    root: u64,
    step: usize,
) -> Result<ParamVector> {
    let d = honest.first().ok_or(Error::Empty("honest gradients"))?.dim();
    let mut col = vec![0.0; honest.len()];
    let out = (0..d)
        .map(|j| {
            for (slot, g) in col.iter_mut().zip(honest) {
                *slot = g[j];
            }
            let mut rng = adversary_rng(root, step, j);
            column_value(spec.kind, &col, beta, spec.m, &mut rng)
        })
        .collect::<Result<Vec<f64>>>()?;
    ParamVector::new(out)
}

/// MNIST label flipping: `l -> 9 - l`.
pub fn label_flip(data: &Dataset) -> Result<Dataset> {
    let labels = data
        .labels()
        .iter()
        .map(|&l| {
            if l > 9 {
                Err(Error::LabelOutOfRange { label: l, classes: 10 })
            } else {
                Ok(9 - l)
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    data.with_labels(labels)
}
