//! Byzantine-resilient federated zero-order optimization.
//!
//! Clients turn a shared seed into perturbation directions, upload one
//! finite-difference scalar per direction, and the federator combines the
//! scalars with a per-direction trimmed mean. Every party rebuilds the model
//! update by replaying the same seeds, so only `k` scalars cross the wire per
//! round.
//!
//! Module map:
//!
//! * [`params`]: dense parameter vectors, ball projection, `axpy`.
//! * [`seedstream`]: seed derivation and the frozen PRNG / Gaussian sampler.
//! * [`losses`]: multinomial logistic regression and a strongly convex quadratic.
//! * [`zo`]: zero-order coefficients and seed-replayed updates.
//! * [`robust`]: trimmed mean and the baseline aggregators.
//! * [`adversary`]: Byzantine behaviours with full knowledge of honest reports.
//! * [`data`]: IDX ingestion, synthetic data, IID / non-IID partitions, batching.
//! * [`config`]: the flat `key = value` experiment configuration.
//! * [`federation`]: round engines, communication accounting and CSV logs.
//! * [`verify`]: Monte-Carlo and convergence-rate checks.

pub mod adversary;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod losses;
pub mod params;
pub mod robust;
pub mod seedstream;
pub mod verify;
pub mod zo;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use params::{ModelState, ParamVector};
