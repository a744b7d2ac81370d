//! Round engines and communication accounting.
//!
//! [`run`] dispatches on [`Engine`]: the zero-order engine (optionally with
//! local epochs), FedAvg, and the coordinate-wise trimmed-mean baseline.
//! Client work fans out on a rayon pool and is gathered in client-index
//! order, so results never depend on the schedule.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::adversary::{attack_vector, inject, label_flip, AttackKind, AttackSpec};
use crate::config::{Broadcast, DatasetKind, Distribution, Engine, ExperimentConfig, ModelKind, QuadOptimum};
use crate::data::{
    load_mnist_dir, partition_iid, partition_noniid, synth_generate, BatchSampler, Dataset, Partition,
};
use crate::error::{Error, Result};
use crate::losses::{Batch, LogisticRegression, LossModel, Quadratic};
use crate::params::{project_ball, ParamVector};
use crate::robust::{coordwise_trimmed_mean, mean_aggregate, robust_direction_aggregate};
use crate::seedstream::{perturb_with, RngStream, SeedTuple, StreamKind};
use crate::zo::{apply_update_with, projected, zo_coefficient_with, ClientReport, DirectionSet, Restore, ZoConfig};

pub const CSV_HEADER: &str = "step,train_loss,test_acc,uplink_scalars,downlink_scalars,wall_ms";

/// One logged row. Communication counters are cumulative, per client.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub step: usize,
    pub train_loss: f64,
    pub test_acc: Option<f64>,
    pub uplink_scalars: u64,
    pub downlink_scalars: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub logs: Vec<RoundLog>,
    pub final_w: ParamVector,
}

impl RunOutput {
    pub fn final_log(&self) -> &RoundLog {
        self.logs.last().expect("a run logs at least its initial state")
    }
}

/// Cumulative per-client `(uplink, downlink)` scalars after `t` steps.
///
/// The zero-order engine uploads `E·k` coefficients per step. Downlink is
/// a one-time seed and initial model, then either the `E·k` aggregated
/// coefficients or the whole model each step. Gradient baselines move `d`
/// scalars each way per step after the initial model.
pub fn comm_cost(cfg: &ExperimentConfig, d: usize, t: usize) -> (u64, u64) {
    let (d, t) = (d as u64, t as u64);
    match cfg.engine {
        Engine::Cyber0 => {
            let per_step = (cfg.local_epochs * cfg.k) as u64;
            let down = match cfg.broadcast {
                Broadcast::Coefficients => per_step,
                Broadcast::Model => d,
            };
            (t * per_step, 1 + d + t * down)
        }
        Engine::FedAvg | Engine::CoordwiseTm => (t * d, d + t * d),
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Logreg(LogisticRegression),
    Quadratic(Quadratic),
}

impl Model {
    pub fn as_loss(&self) -> &dyn LossModel {
        match self {
            Model::Logreg(m) => m,
            Model::Quadratic(q) => q,
        }
    }

    pub fn dim(&self) -> usize {
        self.as_loss().dim()
    }
}

/// Everything a run needs besides its randomness: model, data, partition
/// and starting point. Building it once lets several runs share loaded data.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: Model,
    pub train: Option<Dataset>,
    pub test: Option<Dataset>,
    pub w0: ParamVector,
}

impl Problem {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        match cfg.model {
            ModelKind::Quadratic => Self::quadratic(cfg),
            ModelKind::Logreg => {
                let (train, test) = match cfg.dataset {
                    DatasetKind::Mnist => load_mnist_dir(&cfg.data_dir)?,
                    DatasetKind::Synthetic => synthetic_split(cfg)?,
                };
                Self::logreg(cfg, train, test)
            }
        }
    }

    pub fn quadratic(cfg: &ExperimentConfig) -> Result<Self> {
        let d = cfg.quad_dim;
        let gaussian = |sample: u64| {
            let mut rng = RngStream::from_tuple(&SeedTuple::new(cfg.data_seed(), 0, sample, 0, StreamKind::Init));
            ParamVector::new((0..d).map(|_| rng.gaussian()).collect())
        };
        let optimum = match cfg.quad_optimum {
            QuadOptimum::Origin => ParamVector::zeros(d),
            QuadOptimum::Random => gaussian(1)?,
        };
        let w0 = gaussian(0)?;
        Ok(Self {
            model: Model::Quadratic(Quadratic::new(cfg.quad_lambda, optimum)?),
            train: None,
            test: None,
            w0,
        })
    }

    pub fn logreg(cfg: &ExperimentConfig, train: Dataset, test: Dataset) -> Result<Self> {
        let classes = match cfg.dataset {
            DatasetKind::Mnist => 10,
            DatasetKind::Synthetic => cfg.synth_classes,
        };
        for data in [&train, &test] {
            if data.classes() > classes {
                return Err(Error::LabelOutOfRange {
                    label: (data.classes() - 1) as u8,
                    classes,
                });
            }
            if data.features() != train.features() {
                return Err(Error::Shape("train and test feature counts differ".into()));
            }
        }
        let model = LogisticRegression::new(train.features(), classes)?;
        let w0 = ParamVector::zeros(model.dim());
        Ok(Self {
            model: Model::Logreg(model),
            train: Some(train),
            test: Some(test),
            w0,
        })
    }

    /// Distance to the optimum, for quadratic problems.
    pub fn distance(&self, w: &[f64]) -> Option<f64> {
        match &self.model {
            Model::Quadratic(q) => Some(q.distance(w)),
            Model::Logreg(_) => None,
        }
    }
}

fn synthetic_split(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let n = cfg.synth_train + cfg.synth_test;
    let all = synth_generate(cfg.data_seed(), n, cfg.synth_features, cfg.synth_classes)?;
    let take = |rows: std::ops::Range<usize>| {
        let mut feats = Vec::with_capacity(rows.len() * all.features());
        let mut labels = Vec::with_capacity(rows.len());
        for r in rows {
            feats.extend_from_slice(all.row(r));
            labels.push(all.label(r));
        }
        Dataset::new(feats, labels, all.features())
    };
    Ok((take(0..cfg.synth_train)?, take(cfg.synth_train..n)?))
}

/// Per-client view of the training data.
struct Client {
    data: Option<Dataset>,
    sampler: Option<BatchSampler>,
}

impl Client {
    fn batch(&mut self, index: usize) -> (Option<&Dataset>, Vec<usize>) {
        match (&self.data, &mut self.sampler) {
            (Some(d), Some(s)) => (Some(d), s.batch(index).to_vec()),
            _ => (None, Vec::new()),
        }
    }
}

fn as_batch<'a>(data: Option<&'a Dataset>, rows: &'a [usize]) -> Batch<'a> {
    match data {
        Some(d) => Batch::new(d, rows),
        None => Batch::none(),
    }
}

fn build_clients(cfg: &ExperimentConfig, problem: &Problem, spec: &AttackSpec) -> Result<Vec<Client>> {
    let Some(train) = &problem.train else {
        return Ok((0..cfg.m).map(|_| Client { data: None, sampler: None }).collect());
    };
    let partition: Partition = match cfg.distribution {
        Distribution::Iid => partition_iid(train, cfg.m, cfg.data_seed())?,
        Distribution::NonIid => partition_noniid(train, cfg.m, cfg.data_seed())?,
    };
    let flipped = if spec.kind == AttackKind::LabelFlipping && spec.byzantine > 0 {
        Some(label_flip(train)?)
    } else {
        None
    };
    Ok(partition
        .shards
        .into_iter()
        .enumerate()
        .map(|(i, shard)| {
            let data = match (&flipped, spec.is_byzantine(i)) {
                (Some(f), true) => f.clone(),
                _ => train.clone(),
            };
            let sampler = if cfg.full_local_data {
                BatchSampler::full_shard(shard, i)
            } else {
                BatchSampler::new(shard, i, cfg.data_seed(), cfg.batch_size)
            };
            Client {
                data: Some(data),
                sampler: Some(sampler),
            }
        })
        .collect())
}

fn divergence(e: Error, step: usize, direction: usize, client: usize) -> Error {
    match e {
        Error::NonFinite { context } => Error::Divergence {
            step,
            direction,
            client,
            detail: context,
        },
        other => other,
    }
}

fn check_model(w: &ParamVector, step: usize) -> Result<()> {
    match w.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Divergence {
            step,
            direction: usize::MAX,
            client: usize::MAX,
            detail: format!("model entry {i} is {}", w[i]),
        }),
    }
}

/// Shared logging state of one run.
struct Logger<'a> {
    cfg: &'a ExperimentConfig,
    problem: &'a Problem,
    spec: &'a AttackSpec,
    start: Instant,
    logs: Vec<RoundLog>,
}

impl Logger<'_> {
    fn due(&self, t: usize) -> bool {
        t == 0 || t.is_multiple_of(self.cfg.eval_every) || t == self.cfg.steps
    }

    /// Mean honest batch loss at `w` on the batches of step `t`; `F(w)`
    /// for data-free models.
    fn record(&mut self, t: usize, w: &ParamVector, clients: &mut [Client]) -> Result<()> {
        let model = self.problem.model.as_loss();
        let honest = self.spec.honest();
        let batch_index = t * self.cfg.local_epochs;
        let mut total = 0.0;
        for (i, c) in clients[..honest].iter_mut().enumerate() {
            let (data, rows) = c.batch(batch_index);
            total += model.loss(w, &as_batch(data, &rows)).map_err(|e| divergence(e, t, 0, i))?;
        }
        let test_acc = self.problem.test.as_ref().and_then(|d| model.accuracy(w, d));
        let (up, down) = comm_cost(self.cfg, model.dim(), t);
        self.logs.push(RoundLog {
            step: t,
            train_loss: total / honest as f64,
            test_acc,
            uplink_scalars: up,
            downlink_scalars: down,
            wall_ms: if self.cfg.log_wall_time {
                self.start.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        Ok(())
    }
}

/// Runs the configured engine, building the problem from the config.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let problem = Problem::build(cfg)?;
    run_with(cfg, &problem)
}

/// Runs the configured engine on a prepared problem.
pub fn run_with(cfg: &ExperimentConfig, problem: &Problem) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.engine {
        Engine::Cyber0 => run_cyber0(cfg, problem),
        Engine::FedAvg | Engine::CoordwiseTm => run_first_order(cfg, problem),
    }
}

/// [`run_with`] on a dedicated pool of `threads` workers.
pub fn run_with_threads(cfg: &ExperimentConfig, problem: &Problem, threads: usize) -> Result<RunOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| run_with(cfg, problem))
}

/// One client's uploaded coefficients for step `t`, ordered by `(e, r)`.
#[allow(clippy::too_many_arguments)]
fn client_report(
    model: &dyn LossModel,
    zo: &ZoConfig,
    w: &ParamVector,
    client: &mut Client,
    dirs: &[DirectionSet],
    t: usize,
    eta: f64,
    id: usize,
) -> Result<Vec<f64>> {
    let epochs = dirs.len();
    let mut local = w.clone();
    let mut coeffs = Vec::with_capacity(epochs * zo.k);
    for (e, set) in dirs.iter().enumerate() {
        let (data, rows) = client.batch(t * epochs + e);
        let batch = as_batch(data, &rows);
        let start = coeffs.len();
        if zo.mu_zero {
            let grad = model.grad(&local, &batch).map_err(|err| divergence(err, t, 0, id))?;
            for r in 0..zo.k {
                coeffs.push(projected(&grad, set.get(r), zo).map_err(|err| divergence(err, t, r, id))?);
            }
        } else {
            for r in 0..zo.k {
                let g = zo_coefficient_with(model, &mut local, &batch, zo, set.get(r))
                    .map_err(|err| divergence(err, t, r, id))?;
                coeffs.push(g);
            }
        }
        if epochs > 1 {
            apply_update_with(&mut local, &coeffs[start..], eta, set).map_err(|err| divergence(err, t, 0, id))?;
        }
    }
    if epochs > 1 && zo.restore == Restore::Replay {
        // Undo the local epochs by replaying them backwards. The result is
        // discarded; only its agreement with the snapshot is interesting.
        let k = zo.k as f64;
        for (e, set) in dirs.iter().enumerate().rev() {
            for r in (0..zo.k).rev() {
                perturb_with(&mut local, eta * coeffs[e * zo.k + r] / k, set.get(r));
            }
        }
    }
    Ok(coeffs)
}

fn run_cyber0(cfg: &ExperimentConfig, problem: &Problem) -> Result<RunOutput> {
    let model = problem.model.as_loss();
    let d = model.dim();
    let zo = cfg.zo()?;
    let spec = cfg.attack_spec()?;
    let eta = cfg.learning_rate()?;
    let mut clients = build_clients(cfg, problem, &spec)?;
    let mut w = problem.w0.clone();
    let mut replicas = vec![w.clone(); cfg.m];
    let mut logger = Logger {
        cfg,
        problem,
        spec: &spec,
        start: Instant::now(),
        logs: Vec::new(),
    };
    logger.record(0, &w, &mut clients)?;

    for t in 0..cfg.steps {
        let dirs: Vec<DirectionSet> = (0..cfg.local_epochs)
            .map(|e| DirectionSet::generate(cfg.seed, t, e, zo.k, d, zo.mode))
            .collect();

        let computes = |i: usize| !(spec.kind.is_value_attack() && spec.is_byzantine(i));
        let mut reports: Vec<ClientReport> = clients
            .par_iter_mut()
            .zip(replicas.par_iter())
            .enumerate()
            .map(|(i, (client, w_i))| {
                let coefficients = if computes(i) {
                    client_report(model, &zo, w_i, client, &dirs, t, eta, i)?
                } else {
                    vec![0.0; dirs.len() * zo.k]
                };
                Ok(ClientReport { client: i, coefficients })
            })
            .collect::<Result<_>>()?;

        inject(&spec, &mut reports, cfg.beta, cfg.seed, t)?;
        let agg = robust_direction_aggregate(&reports, cfg.beta)?;

        let step = |w: &mut ParamVector| -> Result<()> {
            for (e, set) in dirs.iter().enumerate() {
                apply_update_with(w, &agg[e * zo.k..(e + 1) * zo.k], eta, set)?;
            }
            if let Some(radius) = cfg.projection_radius {
                *w = project_ball(w, radius)?;
            }
            Ok(())
        };
        step(&mut w).map_err(|e| divergence(e, t, 0, usize::MAX))?;
        check_model(&w, t)?;
        match cfg.broadcast {
            Broadcast::Coefficients => {
                replicas
                    .par_iter_mut()
                    .try_for_each(|r| step(r).map_err(|e| divergence(e, t, 0, usize::MAX)))?;
                debug_assert!(replicas.iter().all(|r| *r == w), "replica drift at step {t}");
            }
            Broadcast::Model => replicas.iter_mut().for_each(|r| r.clone_from(&w)),
        }

        if logger.due(t + 1) {
            logger.record(t + 1, &w, &mut clients)?;
        }
    }
    Ok(RunOutput {
        logs: logger.logs,
        final_w: w,
    })
}

fn run_first_order(cfg: &ExperimentConfig, problem: &Problem) -> Result<RunOutput> {
    let model = problem.model.as_loss();
    let spec = cfg.attack_spec()?;
    let eta = cfg.learning_rate()?;
    let mut clients = build_clients(cfg, problem, &spec)?;
    let mut w = problem.w0.clone();
    let mut logger = Logger {
        cfg,
        problem,
        spec: &spec,
        start: Instant::now(),
        logs: Vec::new(),
    };
    logger.record(0, &w, &mut clients)?;
    let h = spec.honest();

    for t in 0..cfg.steps {
        let computes = |i: usize| !(spec.kind.is_value_attack() && spec.is_byzantine(i));
        let mut grads: Vec<Option<ParamVector>> = clients
            .par_iter_mut()
            .enumerate()
            .map(|(i, client)| {
                if !computes(i) {
                    return Ok(None);
                }
                let (data, rows) = client.batch(t);
                model
                    .grad(&w, &as_batch(data, &rows))
                    .map(Some)
                    .map_err(|e| divergence(e, t, 0, i))
            })
            .collect::<Result<_>>()?;
        if spec.kind.is_value_attack() && spec.byzantine > 0 {
            let honest: Vec<ParamVector> = grads[..h].iter().map(|g| g.clone().expect("honest")).collect();
            let bad = attack_vector(&spec, &honest, cfg.beta, cfg.seed, t)?;
            for g in &mut grads[h..] {
                *g = Some(bad.clone());
            }
        }
        let grads: Vec<ParamVector> = grads.into_iter().map(|g| g.expect("filled")).collect();
        let agg = match cfg.engine {
            Engine::FedAvg => mean_aggregate(&grads)?,
            _ => coordwise_trimmed_mean(&grads, cfg.beta)?,
        };
        for (wi, gi) in w.iter_mut().zip(agg.iter()) {
            *wi -= eta * gi;
        }
        if let Some(radius) = cfg.projection_radius {
            w = project_ball(&w, radius)?;
        }
        check_model(&w, t)?;
        if logger.due(t + 1) {
            logger.record(t + 1, &w, &mut clients)?;
        }
    }
    Ok(RunOutput {
        logs: logger.logs,
        final_w: w,
    })
}

/// Writes the frozen CSV schema.
pub fn write_csv(logs: &[RoundLog], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for l in logs {
        let acc = l.test_acc.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            l.step, l.train_loss, acc, l.uplink_scalars, l.downlink_scalars, l.wall_ms
        )?;
    }
    Ok(())
}

pub fn csv_string(logs: &[RoundLog]) -> String {
    let mut buf = Vec::new();
    write_csv(logs, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

pub fn write_csv_file(logs: &[RoundLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, csv_string(logs)).map_err(|e| Error::io(path, e))
}

/// Parses a CSV written by [`write_csv`].
pub fn read_csv(text: &str) -> Result<Vec<RoundLog>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Shape("CSV header does not match the log schema".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Shape(format!("CSV row {} malformed: {line}", i + 1));
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(RoundLog {
                step: f[0].parse().map_err(|_| bad())?,
                train_loss: f[1].parse().map_err(|_| bad())?,
                test_acc: if f[2].is_empty() {
                    None
                } else {
                    Some(f[2].parse().map_err(|_| bad())?)
                },
                uplink_scalars: f[3].parse().map_err(|_| bad())?,
                downlink_scalars: f[4].parse().map_err(|_| bad())?,
                wall_ms: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
