use cyber0::config::{DatasetKind, Distribution, Engine, LearningRate, ModelKind};
use cyber0::data::{partition_iid, BatchSampler};
use cyber0::federation::{csv_string, run, run_with, run_with_threads, Problem};
use cyber0::losses::Batch;
use cyber0::robust::robust_direction_aggregate;
use cyber0::seedstream::{direction, DirectionMode, RngStream, SeedTuple};
use cyber0::zo::ClientReport;
use cyber0::ExperimentConfig;

fn synthetic() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetKind::Synthetic,
        synth_train: 800,
        synth_test: 200,
        synth_features: 12,
        synth_classes: 10,
        m: 8,
        alpha: 0.25,
        beta: 0.25,
        attack: cyber0::adversary::AttackKind::FullKnowledge,
        distribution: Distribution::NonIid,
        k: 12,
        steps: 25,
        batch_size: 16,
        eta: LearningRate::Fixed(0.1),
        eval_every: 5,
        seed: 9,
        ..ExperimentConfig::default()
    }
}

#[test]
fn thread_count_does_not_change_logs() {
    let cfg = synthetic();
    let problem = Problem::build(&cfg).unwrap();
    let one = run_with_threads(&cfg, &problem, 1).unwrap();
    let four = run_with_threads(&cfg, &problem, 4).unwrap();
    assert_eq!(csv_string(&one.logs), csv_string(&four.logs));
    assert_eq!(one.final_w, four.final_w);
}

#[test]
fn independently_built_engines_agree() {
    let cfg = synthetic();
    let a = run(&cfg).unwrap();
    let b = run(&cfg.clone()).unwrap();
    assert_eq!(a.final_w, b.final_w);
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(run(&other).unwrap().final_w, a.final_w);
}

#[test]
fn local_epochs_change_the_trajectory_but_not_the_start() {
    let mut cfg = synthetic();
    cfg.attack = cyber0::adversary::AttackKind::None;
    cfg.local_epochs = 3;
    cfg.steps = 5;
    let out = run(&cfg).unwrap();
    assert_eq!(out.logs[0].train_loss, run(&synthetic()).unwrap().logs[0].train_loss);
    assert_eq!(out.final_log().uplink_scalars, 5 * 3 * 12);
    assert!(out.final_w.is_finite());
}

#[test]
fn aggregation_ignores_which_clients_attack() {
    let mut rng = RngStream::new(3);
    let reports: Vec<ClientReport> = (0..10)
        .map(|i| ClientReport {
            client: i,
            coefficients: (0..6).map(|_| rng.gaussian()).collect(),
        })
        .collect();
    let base = robust_direction_aggregate(&reports, 0.2).unwrap();
    for shift in 1..10 {
        let mut moved = reports.clone();
        moved.rotate_left(shift);
        assert_eq!(robust_direction_aggregate(&moved, 0.2).unwrap(), base);
    }
}

#[test]
fn fedavg_with_one_client_is_plain_sgd() {
    let cfg = ExperimentConfig {
        engine: Engine::FedAvg,
        m: 1,
        alpha: 0.0,
        beta: 0.0,
        attack: cyber0::adversary::AttackKind::None,
        distribution: Distribution::Iid,
        steps: 40,
        ..synthetic()
    };
    let problem = Problem::build(&cfg).unwrap();
    let out = run_with(&cfg, &problem).unwrap();

    let train = problem.train.as_ref().unwrap();
    let shard = partition_iid(train, 1, cfg.data_seed()).unwrap().shards.remove(0);
    let mut sampler = BatchSampler::new(shard, 0, cfg.data_seed(), cfg.batch_size);
    let model = problem.model.as_loss();
    let mut w = problem.w0.clone().into_vec();
    for t in 0..cfg.steps {
        let rows = sampler.batch(t).to_vec();
        let g = model.grad(&w, &Batch::new(train, &rows)).unwrap();
        for (wi, gi) in w.iter_mut().zip(g.iter()) {
            *wi -= 0.1 * gi;
        }
    }
    assert_eq!(out.final_w.as_slice(), w.as_slice());
}

#[test]
fn mu0_step_is_gradient_descent_in_expectation() {
    let d = 8;
    let base = ExperimentConfig {
        model: ModelKind::Quadratic,
        quad_dim: d,
        m: 2,
        alpha: 0.0,
        beta: 0.0,
        mu_zero: true,
        mu: 0.0,
        k: d,
        direction_mode: DirectionMode::Sphere,
        eta: LearningRate::Fixed(0.1),
        steps: 1,
        data_seed: Some(5),
        ..ExperimentConfig::default()
    };
    let problem = Problem::build(&base).unwrap();
    let grad = problem.model.as_loss().grad(&problem.w0, &Batch::none()).unwrap();
    let n = 4000;
    let mut mean = vec![0.0; d];
    for s in 0..n {
        let mut c = base.clone();
        c.seed = s;
        let out = run_with(&c, &problem).unwrap();
        for (acc, (w1, w0)) in mean.iter_mut().zip(out.final_w.iter().zip(problem.w0.iter())) {
            *acc += (w1 - w0) / n as f64;
        }
    }
    let err: f64 = (0..d).map(|i| (mean[i] + 0.1 * grad[i]).powi(2)).sum::<f64>().sqrt();
    let rel = err / (0.1 * grad.norm());
    assert!(rel < 0.05, "relative deviation {rel}");
}

#[test]
fn directions_differ_across_samples_and_steps() {
    let a = direction(SeedTuple::direction(1, 0, 0, 0).derive(), 32, DirectionMode::Gaussian);
    let b = direction(SeedTuple::direction(1, 0, 1, 0).derive(), 32, DirectionMode::Gaussian);
    let c = direction(SeedTuple::direction(1, 1, 0, 0).derive(), 32, DirectionMode::Gaussian);
    assert_ne!(a, b);
    assert_ne!(a, c);
}

#[test]
fn linear_model_separates_synthetic_blobs() {
    let cfg = ExperimentConfig {
        engine: Engine::FedAvg,
        m: 1,
        alpha: 0.0,
        beta: 0.0,
        attack: cyber0::adversary::AttackKind::None,
        distribution: Distribution::Iid,
        full_local_data: true,
        eta: LearningRate::Fixed(2.0),
        steps: 200,
        ..synthetic()
    };
    let problem = Problem::build(&cfg).unwrap();
    let out = run_with(&cfg, &problem).unwrap();
    let acc = problem
        .model
        .as_loss()
        .accuracy(&out.final_w, problem.train.as_ref().unwrap())
        .unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
}
