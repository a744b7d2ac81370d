//! Experiment configuration in a flat `key = value` format.
//!
//! One assignment per line, `#` starts a comment, keys are the field names
//! of [`ExperimentConfig`]. Unset keys keep their defaults. [`ExperimentConfig::to_text`]
//! writes every key, and its output parses back to an equal value.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::adversary::{AttackKind, AttackSpec};
use crate::error::{Error, Result};
use crate::robust::trim_count;
use crate::seedstream::DirectionMode;
use crate::zo::{Restore, ZoConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    Cyber0,
    FedAvg,
    CoordwiseTm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Logreg,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    Iid,
    NonIid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadOptimum {
    Origin,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    Coefficients,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearningRate {
    Fixed(f64),
    /// Step size from the convergence analysis; quadratic models only.
    Theory,
}

macro_rules! keyword_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(format!(
                        "unknown value '{s}', expected one of {}",
                        [$($name),+].join(", ")
                    )),
                }
            }
        }

        impl $ty {
            pub fn name(self) -> &'static str {
                $(if self == $variant { return $name; })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(Engine { "cyber0" => Engine::Cyber0, "fedavg" => Engine::FedAvg, "coordwise_tm" => Engine::CoordwiseTm });
keyword_enum!(ModelKind { "logreg" => ModelKind::Logreg, "quadratic" => ModelKind::Quadratic });
keyword_enum!(DatasetKind { "mnist" => DatasetKind::Mnist, "synthetic" => DatasetKind::Synthetic });
keyword_enum!(Distribution { "iid" => Distribution::Iid, "noniid" => Distribution::NonIid });
keyword_enum!(QuadOptimum { "origin" => QuadOptimum::Origin, "random" => QuadOptimum::Random });
keyword_enum!(Broadcast { "coefficients" => Broadcast::Coefficients, "model" => Broadcast::Model });
keyword_enum!(Restore { "snapshot" => Restore::Snapshot, "replay" => Restore::Replay });
keyword_enum!(DirectionMode { "gaussian" => DirectionMode::Gaussian, "sphere" => DirectionMode::Sphere });

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub engine: Engine,
    pub model: ModelKind,
    pub dataset: DatasetKind,
    pub data_dir: String,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_features: usize,
    pub synth_classes: usize,
    pub quad_dim: usize,
    pub quad_lambda: f64,
    pub quad_optimum: QuadOptimum,
    pub m: usize,
    pub alpha: f64,
    pub beta: f64,
    pub attack: AttackKind,
    pub distribution: Distribution,
    pub mu: f64,
    pub mu_zero: bool,
    pub k: usize,
    pub direction_mode: DirectionMode,
    pub eta: LearningRate,
    pub steps: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub full_local_data: bool,
    pub restore: Restore,
    pub broadcast: Broadcast,
    pub projection_radius: Option<f64>,
    pub seed: u64,
    /// Seeds partitions, batches, synthetic data and quadratic instances.
    /// Falls back to `seed`.
    pub data_seed: Option<u64>,
    pub eval_every: usize,
    pub log_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            engine: Engine::Cyber0,
            model: ModelKind::Logreg,
            dataset: DatasetKind::Mnist,
            data_dir: "data/mnist".into(),
            synth_train: 6000,
            synth_test: 1000,
            synth_features: 20,
            synth_classes: 10,
            quad_dim: 16,
            quad_lambda: 1.0,
            quad_optimum: QuadOptimum::Random,
            m: 12,
            alpha: 0.25,
            beta: 0.25,
            attack: AttackKind::None,
            distribution: Distribution::Iid,
            mu: 1e-3,
            mu_zero: false,
            k: 64,
            direction_mode: DirectionMode::Gaussian,
            eta: LearningRate::Fixed(0.01),
            steps: 400,
            local_epochs: 1,
            batch_size: 64,
            full_local_data: false,
            restore: Restore::Snapshot,
            broadcast: Broadcast::Coefficients,
            projection_radius: None,
            seed: 0,
            data_seed: None,
            eval_every: 1,
            log_wall_time: false,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse '{v}': {e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got '{v}'")),
    }
}

fn parse_opt<T: FromStr>(v: &str) -> std::result::Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    if v == "none" {
        Ok(None)
    } else {
        parse(v).map(Some)
    }
}

impl ExperimentConfig {
    /// Every key, in the order [`to_text`](Self::to_text) writes them.
    pub const KEYS: [&'static str; 32] = [
        "engine",
        "model",
        "dataset",
        "data_dir",
        "synth_train",
        "synth_test",
        "synth_features",
        "synth_classes",
        "quad_dim",
        "quad_lambda",
        "quad_optimum",
        "m",
        "alpha",
        "beta",
        "attack",
        "distribution",
        "mu",
        "mu_zero",
        "k",
        "direction_mode",
        "eta",
        "steps",
        "local_epochs",
        "batch_size",
        "full_local_data",
        "restore",
        "broadcast",
        "projection_radius",
        "seed",
        "data_seed",
        "eval_every",
        "log_wall_time",
    ];

    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "engine" => self.engine = parse(v)?,
            "model" => self.model = parse(v)?,
            "dataset" => self.dataset = parse(v)?,
            "data_dir" => self.data_dir = v.to_string(),
            "synth_train" => self.synth_train = parse(v)?,
            "synth_test" => self.synth_test = parse(v)?,
            "synth_features" => self.synth_features = parse(v)?,
            "synth_classes" => self.synth_classes = parse(v)?,
            "quad_dim" => self.quad_dim = parse(v)?,
            "quad_lambda" => self.quad_lambda = parse(v)?,
            "quad_optimum" => self.quad_optimum = parse(v)?,
            "m" => self.m = parse(v)?,
            "alpha" => self.alpha = parse(v)?,
            "beta" => self.beta = parse(v)?,
            "attack" => self.attack = parse(v)?,
            "distribution" => self.distribution = parse(v)?,
            "mu" => self.mu = parse(v)?,
            "mu_zero" => self.mu_zero = parse_bool(v)?,
            "k" => self.k = parse(v)?,
            "direction_mode" => self.direction_mode = parse(v)?,
            "eta" => {
                self.eta = if v == "theory" {
                    LearningRate::Theory
                } else {
                    LearningRate::Fixed(parse(v)?)
                }
            }
            "steps" => self.steps = parse(v)?,
            "local_epochs" => self.local_epochs = parse(v)?,
            "batch_size" => self.batch_size = parse(v)?,
            "full_local_data" => self.full_local_data = parse_bool(v)?,
            "restore" => self.restore = parse(v)?,
            "broadcast" => self.broadcast = parse(v)?,
            "projection_radius" => self.projection_radius = parse_opt(v)?,
            "seed" => self.seed = parse(v)?,
            "data_seed" => self.data_seed = parse_opt(v)?,
            "eval_every" => self.eval_every = parse(v)?,
            "log_wall_time" => self.log_wall_time = parse_bool(v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Textual value of one key.
    pub fn get(&self, key: &str) -> Option<String> {
        fn opt<T: std::fmt::Debug>(v: &Option<T>) -> String {
            v.as_ref().map_or_else(|| "none".into(), |x| format!("{x:?}"))
        }
        Some(match key {
            "engine" => self.engine.name().into(),
            "model" => self.model.name().into(),
            "dataset" => self.dataset.name().into(),
            "data_dir" => self.data_dir.clone(),
            "synth_train" => self.synth_train.to_string(),
            "synth_test" => self.synth_test.to_string(),
            "synth_features" => self.synth_features.to_string(),
            "synth_classes" => self.synth_classes.to_string(),
            "quad_dim" => self.quad_dim.to_string(),
            "quad_lambda" => format!("{:?}", self.quad_lambda),
            "quad_optimum" => self.quad_optimum.name().into(),
            "m" => self.m.to_string(),
            "alpha" => format!("{:?}", self.alpha),
            "beta" => format!("{:?}", self.beta),
            "attack" => self.attack.name().into(),
            "distribution" => self.distribution.name().into(),
            "mu" => format!("{:?}", self.mu),
            "mu_zero" => self.mu_zero.to_string(),
            "k" => self.k.to_string(),
            "direction_mode" => self.direction_mode.name().into(),
            "eta" => match self.eta {
                LearningRate::Fixed(x) => format!("{x:?}"),
                LearningRate::Theory => "theory".into(),
            },
            "steps" => self.steps.to_string(),
            "local_epochs" => self.local_epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "full_local_data" => self.full_local_data.to_string(),
            "restore" => self.restore.name().into(),
            "broadcast" => self.broadcast.name().into(),
            "projection_radius" => opt(&self.projection_radius),
            "seed" => self.seed.to_string(),
            "data_seed" => opt(&self.data_seed),
            "eval_every" => self.eval_every.to_string(),
            "log_wall_time" => self.log_wall_time.to_string(),
            _ => return None,
        })
    }

    /// Parses and validates config text. Syntax errors carry 1-based line
    /// and column.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("");
            if content.trim().is_empty() {
                continue;
            }
            let err = |column: usize, message: String| Error::Config {
                line,
                column,
                message,
            };
            let key_col = content.len() - content.trim_start().len() + 1;
            let Some(eq) = content.find('=') else {
                return Err(err(key_col, "expected 'key = value'".into()));
            };
            let key = content[..eq].trim();
            let after = &content[eq + 1..];
            let value = after.trim();
            let value_col = eq + 2 + (after.len() - after.trim_start().len());
            if key.is_empty() {
                return Err(err(key_col, "missing key".into()));
            }
            if seen.contains(&key) {
                return Err(err(key_col, format!("duplicate key '{key}'")));
            }
            if !Self::KEYS.contains(&key) {
                return Err(err(key_col, format!("unknown key '{key}'")));
            }
            if value.is_empty() {
                return Err(err(value_col, format!("missing value for '{key}'")));
            }
            cfg.set(key, value).map_err(|m| err(value_col, m))?;
            seen.push(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    /// Model dimension implied by the config (before loading any data).
    pub fn dim_hint(&self) -> usize {
        match (self.model, self.dataset) {
            (ModelKind::Quadratic, _) => self.quad_dim,
            (ModelKind::Logreg, DatasetKind::Mnist) => 785 * 10,
            (ModelKind::Logreg, DatasetKind::Synthetic) => (self.synth_features + 1) * self.synth_classes,
        }
    }

    pub fn zo(&self) -> Result<ZoConfig> {
        let cfg = ZoConfig {
            mu: if self.mu_zero { 0.0 } else { self.mu },
            k: self.k,
            mode: self.direction_mode,
            mu_zero: self.mu_zero,
            restore: self.restore,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn attack_spec(&self) -> Result<AttackSpec> {
        AttackSpec::new(self.attack, self.m, self.alpha)
    }

    /// `τ` of the convergence analysis for dimension `d`.
    pub fn tau(&self, d: usize) -> f64 {
        theory_tau(d, self.k, self.mu_zero)
    }

    /// Resolved step size.
    pub fn learning_rate(&self) -> Result<f64> {
        match self.eta {
            LearningRate::Fixed(x) => Ok(x),
            LearningRate::Theory => {
                if self.model != ModelKind::Quadratic {
                    return Err(Error::InvalidArgument(
                        "eta = theory needs the quadratic model".into(),
                    ));
                }
                Ok(theory_eta(self.quad_dim, self.k, self.mu_zero, self.quad_lambda))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 0.5), got {}", self.alpha));
        }
        if !(0.0..0.5).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 0.5), got {}", self.beta));
        }
        if self.m <= 2 * trim_count(self.beta, self.m) {
            return bad(format!("beta = {} trims every one of {} clients", self.beta, self.m));
        }
        for (name, v) in [
            ("k", self.k),
            ("local_epochs", self.local_epochs),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("quad_dim", self.quad_dim),
            ("synth_train", self.synth_train),
            ("synth_test", self.synth_test),
            ("synth_features", self.synth_features),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(2..=256).contains(&self.synth_classes) {
            return bad("synth_classes must lie in [2, 256]".into());
        }
        if !self.mu_zero && !(self.mu > 0.0 && self.mu.is_finite()) {
            return bad(format!("mu must be positive unless mu_zero is set, got {}", self.mu));
        }
        if !(self.quad_lambda > 0.0 && self.quad_lambda.is_finite()) {
            return bad("quad_lambda must be positive".into());
        }
        if let LearningRate::Fixed(x) = self.eta {
            if !(x.is_finite() && x >= 0.0) {
                return bad(format!("eta must be finite and >= 0, got {x}"));
            }
        }
        if let Some(r) = self.projection_radius {
            if !(r > 0.0 && r.is_finite()) {
                return bad(format!("projection_radius must be positive, got {r}"));
            }
        }
        if self.engine != Engine::Cyber0 && self.local_epochs != 1 {
            return bad("local epochs apply to the cyber0 engine only".into());
        }
        if self.model == ModelKind::Quadratic && self.attack == AttackKind::LabelFlipping {
            return bad("label flipping needs a labelled dataset".into());
        }
        if self.attack == AttackKind::LabelFlipping
            && self.dataset == DatasetKind::Synthetic
            && self.synth_classes != 10
        {
            return bad("label flipping maps l to 9 - l and needs 10 classes".into());
        }
        self.learning_rate()?;
        Ok(())
    }
}

/// `(d + k − 1)/k` at `μ = 0`, `(2d + (k − 1)(1 + √d))/k` otherwise.
pub fn theory_tau(d: usize, k: usize, mu_zero: bool) -> f64 {
    let (d, k) = (d as f64, k as f64);
    if mu_zero {
        (d + k - 1.0) / k
    } else {
        (2.0 * d + (k - 1.0) * (1.0 + d.sqrt())) / k
    }
}

/// `1/(τ L_F)` at `μ = 0`, `1/(2 τ L_F)` otherwise, with `L_F = λ`.
pub fn theory_eta(d: usize, k: usize, mu_zero: bool, lambda: f64) -> f64 {
    let tau = theory_tau(d, k, mu_zero);
    if mu_zero {
        1.0 / (tau * lambda)
    } else {
        1.0 / (2.0 * tau * lambda)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_reference_setup() {
        let c = ExperimentConfig::default();
        assert_eq!((c.m, c.k, c.steps, c.batch_size), (12, 64, 400, 64));
        assert_eq!(c.attack_spec().unwrap().byzantine, 0);
        assert_eq!(c.learning_rate().unwrap(), 0.01);
        c.validate().unwrap();
        assert_eq!(c.dim_hint(), 7850);
    }

    #[test]
    fn parse_reads_keys_and_comments() {
        let c = ExperimentConfig::parse(
            "# header\n  k = 16   # trailing\n\nattack = full_knowledge\nalpha=0.125\nbeta = 0.125\neta = theory\nmodel = quadratic\nattack = none\n",
        );
        assert!(matches!(c, Err(Error::Config { line: 9, column: 1, .. })));
        let c = ExperimentConfig::parse("k = 16\nmodel = quadratic\neta = theory\nmu_zero = true\n").unwrap();
        assert_eq!(c.k, 16);
        assert_eq!(c.learning_rate().unwrap(), 16.0 / 31.0);
    }

    #[test]
    fn parse_errors_locate_the_problem() {
        let e = ExperimentConfig::parse("k = 4\nbogus = 1\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 2, column: 1, .. }), "{e}");
        let e = ExperimentConfig::parse("k = 4\n  alpha =  x\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 2, column: 12, .. }), "{e}");
        let e = ExperimentConfig::parse("steps 4\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, column: 1, .. }));
        let e = ExperimentConfig::parse("k =\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }));
        assert!(matches!(
            ExperimentConfig::parse("beta = 0.5\n"),
            Err(Error::InvalidArgument(_))
        ));
        assert!(ExperimentConfig::parse("eta = theory\n").is_err());
    }

    #[test]
    fn text_round_trips() {
        let c = ExperimentConfig {
            mu: 1e-4,
            eta: LearningRate::Theory,
            model: ModelKind::Quadratic,
            projection_radius: Some(2.5),
            data_seed: Some(17),
            alpha: 0.1 + 0.2,
            data_dir: "/tmp/some dir".into(),
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn theory_constants() {
        assert_eq!(theory_tau(1, 1, true), 1.0);
        assert_eq!(theory_tau(16, 16, true), 31.0 / 16.0);
        assert_eq!(theory_tau(16, 16, false), 107.0 / 16.0);
        assert_eq!(theory_eta(16, 16, false, 1.0), 8.0 / 107.0);
        assert!((theory_tau(8, 100_000, true) - 1.0).abs() < 1e-4);
    }
}
