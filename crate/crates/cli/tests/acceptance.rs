//! Acceptance suite, criteria 1 to 12, one PASS/FAIL/SKIP line each.
//!
//! The MNIST criteria need `data/mnist` at the workspace root (see
//! `scripts/fetch_mnist.sh`) and report SKIP without it. Failures are
//! reported but do not fail `cargo test` unless `CYBER0_ACCEPTANCE_STRICT=1`.
//! `CYBER0_ACCEPTANCE=1,4,7` runs a subset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use cyber0::config::{DatasetKind, ModelKind};
use cyber0::data::synth_generate;
use cyber0::federation::{comm_cost, run_with, Problem, RunOutput};
use cyber0::losses::{Batch, LogisticRegression, LossModel, Quadratic};
use cyber0::robust::{robust_direction_aggregate, trim_count, trimmed_mean};
use cyber0::seedstream::{perturb_inplace, DirectionMode, RngStream};
use cyber0::verify::{
    check_cross_bound, check_isotropy, check_norm_factor, check_smoothed_gap, check_theorem2, check_theorem3,
};
use cyber0::zo::{zo_coefficient, ClientReport, ZoConfig};
use cyber0::{ExperimentConfig, ParamVector};

const SEED: u64 = 7;
const MNIST_D: usize = 7850;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome {
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
        detail,
    }
}

fn skip(detail: &str) -> Outcome {
    Outcome {
        verdict: Verdict::Skip,
        detail: detail.into(),
    }
}

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = root().join("data/mnist");
    dir.join("train-labels-idx1-ubyte").exists().then_some(dir)
}

fn uses_mnist(cfg: &ExperimentConfig) -> bool {
    cfg.model == ModelKind::Logreg && cfg.dataset == DatasetKind::Mnist
}

/// Loads a bundled profile with its data path anchored at the workspace.
fn profile(name: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(root().join("profiles").join(format!("{name}.cfg")))
        .unwrap_or_else(|e| panic!("profile {name}: {e}"));
    if uses_mnist(&cfg) {
        cfg.set("data_dir", root().join("data/mnist").to_str().unwrap()).unwrap();
    }
    cfg
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed().as_secs_f64())
}

fn final_acc(out: &RunOutput) -> f64 {
    out.final_log().test_acc.expect("classifier runs log accuracy")
}

// Runs shared between criteria 7 and 10.
#[derive(Default)]
struct Shared {
    fig1b: Option<(RunOutput, RunOutput)>,
}

fn criterion_1() -> Outcome {
    let (c, secs) = timed(|| check_isotropy(SEED));
    outcome(
        c.pass && secs < 10.0,
        format!("max |E[zz^T] - I/d| = {:.2e} (< 2e-3), {secs:.1} s (< 10 s)", c.estimate),
    )
}

fn criterion_2() -> Outcome {
    let ((a, b), secs) = timed(|| (check_norm_factor(8, 1, 0.03, SEED), check_norm_factor(8, 512, 0.02, SEED)));
    outcome(
        a.pass && b.pass && secs < 30.0,
        format!(
            "k=1: {:.5} vs {:.1}; k=512: {:.5} vs {:.5}; {secs:.1} s (< 30 s)",
            a.estimate, a.target, b.estimate, b.target
        ),
    )
}

fn criterion_3() -> Outcome {
    let c = check_cross_bound(SEED);
    let margin = 1.0 - c.estimate / c.target;
    outcome(c.pass, format!("E|z1.x z2.x| = {:.3e}, bound {:.3e}, margin {:.1}% ({})", c.estimate, c.target, 100.0 * margin, c.tolerance))
}

fn criterion_4() -> Outcome {
    let c = check_smoothed_gap(SEED);
    outcome(c.pass, format!("F_mu - F = {:.4e} vs {:.4e}, {}", c.estimate, c.target, c.tolerance))
}

fn criterion_5() -> Outcome {
    match timed(check_theorem2) {
        (Ok(c), secs) => outcome(
            c.pass && secs < 60.0,
            format!("fitted rate {:.4} vs bound {:.4} + 0.02, {secs:.1} s (< 60 s)", c.estimate, c.target),
        ),
        (Err(e), _) => outcome(false, format!("run failed: {e}")),
    }
}

fn criterion_6() -> Outcome {
    match check_theorem3() {
        Ok(c) => outcome(c.pass, format!("ratio {:.2} (>= 5), {}", c.estimate, c.tolerance)),
        Err(e) => outcome(false, format!("run failed: {e}")),
    }
}

fn run_profile(cfg: &ExperimentConfig) -> cyber0::Result<RunOutput> {
    let problem = Problem::build(cfg)?;
    run_with(cfg, &problem)
}

fn criterion_7(shared: &mut Shared) -> Outcome {
    if mnist_dir().is_none() {
        return skip("MNIST not found under data/mnist");
    }
    let (zo, zo_secs) = timed(|| run_profile(&profile("mnist_fig1b_k64")));
    let (fa, fa_secs) = timed(|| run_profile(&profile("mnist_fedavg")));
    let (zo, fa) = match (zo, fa) {
        (Ok(z), Ok(f)) => (z, f),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("run failed: {e}")),
    };
    let (a_zo, a_fa) = (final_acc(&zo), final_acc(&fa));
    let gap = 100.0 * (a_fa - a_zo).abs();
    let pass = gap <= 3.0 && a_fa >= 0.88 && zo_secs < 600.0 && fa_secs < 600.0;
    let detail = format!(
        "k=64 {:.2}% vs FedAvg {:.2}% (gap {gap:.2} <= 3, FedAvg >= 88%), {zo_secs:.0} s / {fa_secs:.0} s",
        100.0 * a_zo,
        100.0 * a_fa
    );
    shared.fig1b = Some((zo, fa));
    outcome(pass, detail)
}

fn criterion_8() -> Outcome {
    if mnist_dir().is_none() {
        return skip("MNIST not found under data/mnist");
    }
    let rows = [("a0125", 87.1, 3.0), ("a025", 80.8, 3.0), ("a0375", 60.3, 6.0)];
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, paper, tol) in rows {
        let base = profile(&format!("mnist_table1_{name}"));
        let problem = match Problem::build(&base) {
            Ok(p) => p,
            Err(e) => return outcome(false, format!("data: {e}")),
        };
        let mut accs = Vec::new();
        for seed in 1..=3 {
            let mut cfg = base.clone();
            cfg.seed = seed;
            match run_with(&cfg, &problem) {
                Ok(out) => accs.push(100.0 * final_acc(&out)),
                Err(e) => return outcome(false, format!("alpha {}: {e}", base.alpha)),
            }
        }
        let mean = accs.iter().sum::<f64>() / 3.0;
        let sd = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        pass &= (mean - paper).abs() <= tol;
        parts.push(format!("alpha {}: {mean:.1}+-{sd:.1} vs {paper} (+-{tol})", base.alpha));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 3600.0;
    outcome(pass, format!("{}; {secs:.0} s (< 3600 s)", parts.join("; ")))
}

fn criterion_9() -> Outcome {
    if mnist_dir().is_none() {
        return skip("MNIST not found under data/mnist");
    }
    let attacks = ["full_knowledge", "always_small", "always_large", "random_choice", "label_flipping"];
    let mut means = BTreeMap::new();
    for name in attacks {
        let base = profile(&format!("mnist_fig1c_{name}"));
        let problem = match Problem::build(&base) {
            Ok(p) => p,
            Err(e) => return outcome(false, format!("data: {e}")),
        };
        let mut total = 0.0;
        for seed in 1..=3 {
            let mut cfg = base.clone();
            cfg.seed = seed;
            match run_with(&cfg, &problem) {
                Ok(out) => total += final_acc(&out),
                Err(e) => return outcome(false, format!("{name}: {e}")),
            }
        }
        means.insert(name, 100.0 * total / 3.0);
    }
    let fk = means["full_knowledge"];
    let pass = means.values().all(|&a| fk <= a);
    let table: Vec<String> = attacks.iter().map(|a| format!("{a} {:.1}%", means[a])).collect();
    outcome(pass, format!("step-100 accuracy, 3 seeds: {}", table.join(", ")))
}

fn criterion_10(shared: &Shared) -> Outcome {
    let mut failures = Vec::new();
    let mut expect = |what: &str, got: u64, want: u64| {
        if got != want {
            failures.push(format!("{what}: {got} != {want}"));
        }
    };
    let k64 = profile("mnist_fig1b_k64");
    let fedavg = profile("mnist_fedavg");
    let e5 = profile("mnist_epochs_e5");
    expect("cyber0 per step", comm_cost(&k64, MNIST_D, 1).0, 64);
    expect("cyber0 E=5 per step", comm_cost(&e5, MNIST_D, 1).0, 5 * 64);
    expect("fedavg per step", comm_cost(&fedavg, MNIST_D, 1).0, 7850);
    expect("cyber0 T=400", comm_cost(&k64, MNIST_D, 400).0, 25_600);
    expect("fedavg T=400", comm_cost(&fedavg, MNIST_D, 400).0, 3_140_000);
    let logged = match &shared.fig1b {
        Some((zo, fa)) => {
            for (out, per_step, what) in [(zo, 64, "cyber0 log"), (fa, 7850, "fedavg log")] {
                for row in &out.logs {
                    expect(what, row.uplink_scalars, per_step * row.step as u64);
                }
            }
            expect("cyber0 logged T=400", zo.final_log().uplink_scalars, 25_600);
            expect("fedavg logged T=400", fa.final_log().uplink_scalars, 3_140_000);
            "formula and logged MNIST runs"
        }
        None => {
            let mut cfg = profile("smoke_synthetic");
            cfg.local_epochs = 2;
            let out = run_profile(&cfg).expect("synthetic run");
            for row in &out.logs {
                expect("synthetic log", row.uplink_scalars, (2 * cfg.k * row.step) as u64);
            }
            "formula and a synthetic log (MNIST runs unavailable)"
        }
    };
    let ratio = 7850.0 / 64.0;
    if failures.is_empty() {
        outcome(true, format!("{logged}: 64 / 320 / 7850 per step, 25600 / 3140000 at T=400, ratio {ratio:.1}"))
    } else {
        outcome(false, failures.join("; "))
    }
}

fn cyber0_run(config: &Path, out: &Path, threads: Option<&str>) -> Result<Vec<u8>, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cyber0"));
    cmd.args(["run", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    match threads {
        Some(n) => cmd.env("CYBER0_THREADS", n),
        None => cmd.env_remove("CYBER0_THREADS"),
    };
    let res = cmd.output().map_err(|e| e.to_string())?;
    if !res.status.success() {
        return Err(String::from_utf8_lossy(&res.stderr).into_owned());
    }
    fs::read(out.join("log.csv")).map_err(|e| e.to_string())
}

/// Every bundled profile runs through the binary twice on the default pool
/// and once each with 1 and 8 client threads. MNIST profiles are cut to
/// their first 10 steps; the others run in full.
fn criterion_11() -> Outcome {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut names: Vec<String> = fs::read_dir(root().join("profiles"))
        .expect("profiles directory")
        .filter_map(|e| e.ok()?.file_name().into_string().ok()?.strip_suffix(".cfg").map(String::from))
        .collect();
    names.sort();
    let (mut checked, mut truncated, mut skipped) = (0, 0, 0);
    for name in &names {
        let mut cfg = profile(name);
        if uses_mnist(&cfg) {
            if mnist_dir().is_none() {
                skipped += 1;
                continue;
            }
            cfg.steps = cfg.steps.min(10);
            truncated += 1;
        }
        let path = tmp.path().join(format!("{name}.cfg"));
        fs::write(&path, cfg.to_text()).expect("write config");
        let mut logs = Vec::new();
        for (tag, threads) in [("a", None), ("b", None), ("t1", Some("1")), ("t8", Some("8"))] {
            match cyber0_run(&path, &tmp.path().join(format!("{name}-{tag}")), threads) {
                Ok(log) => logs.push(log),
                Err(e) => return outcome(false, format!("{name}: {e}")),
            }
        }
        if logs.iter().any(|l| l != &logs[0]) {
            return outcome(false, format!("{name}: logs differ across repeats or thread counts"));
        }
        checked += 1;
    }
    outcome(
        checked > 0,
        format!("{checked} profiles byte-identical over repeats and 1/8 threads ({truncated} MNIST cut to 10 steps, {skipped} skipped)"),
    )
}

fn replay_inverse(rng: &mut RngStream, trials: usize) -> (usize, usize) {
    let mut exact = 0;
    let mut restored = 0;
    let quad = Quadratic::new(1.0, ParamVector::zeros(64)).unwrap();
    for t in 0..trials {
        let d = 1 + rng.below(64) as usize;
        let mode = if t % 2 == 0 { DirectionMode::Gaussian } else { DirectionMode::Sphere };
        let scale = [1e-4, 1e-3, 0.1, 1.0][t % 4];
        let w: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let seed = rng.next_u64();
        let mut v = w.clone();
        perturb_inplace(&mut v, scale, seed, mode);
        perturb_inplace(&mut v, -scale, seed, mode);
        exact += usize::from(v == w);

        // What the engines rely on: a coefficient call leaves w untouched.
        let mut w64: Vec<f64> = (0..64).map(|_| rng.gaussian()).collect();
        let before = w64.clone();
        let cfg = ZoConfig::new(scale, 1, mode).unwrap();
        zo_coefficient(&quad, &mut w64, &Batch::none(), &cfg, seed).unwrap();
        restored += usize::from(w64 == before);
    }
    (exact, restored)
}

fn brute_trimmed(values: &[f64], b: usize) -> f64 {
    let mut v = values.to_vec();
    for _ in 0..b {
        let lo = (0..v.len()).fold(0, |i, j| if v[j] < v[i] { j } else { i });
        v.swap_remove(lo);
        let hi = (0..v.len()).fold(0, |i, j| if v[j] > v[i] { j } else { i });
        v.swap_remove(hi);
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn trimmed_vs_oracle(rng: &mut RngStream, cases: usize) -> usize {
    let mut bad = 0;
    for c in 0..cases {
        let m = 1 + rng.below(40) as usize;
        let beta = 0.49 * rng.uniform();
        if m <= 2 * trim_count(beta, m) {
            continue;
        }
        // Every third case draws from a few values to exercise ties.
        let values: Vec<f64> = (0..m)
            .map(|_| if c % 3 == 0 { rng.below(4) as f64 } else { 100.0 * rng.gaussian() })
            .collect();
        let got = trimmed_mean(&values, beta).unwrap();
        let want = brute_trimmed(&values, trim_count(beta, m));
        let scale = values.iter().fold(1.0f64, |s, v| s.max(v.abs()));
        if (got - want).abs() > 1e-12 * scale {
            bad += 1;
        }
    }
    bad
}

fn containment(rng: &mut RngStream, cases: usize) -> usize {
    let mut escaped = 0;
    for c in 0..cases {
        let m = 4 + rng.below(37) as usize;
        let beta = 0.1 + 0.39 * rng.uniform();
        let b = trim_count(beta, m);
        if b == 0 || m <= 2 * b {
            continue;
        }
        let byz = 1 + rng.below(b as u64) as usize;
        let k = 1 + rng.below(8) as usize;
        let reports: Vec<ClientReport> = (0..m)
            .map(|i| ClientReport {
                client: i,
                coefficients: (0..k)
                    .map(|_| {
                        if i < m - byz {
                            rng.gaussian()
                        } else if c % 2 == 0 || rng.below(2) == 0 {
                            1e300
                        } else {
                            -1e300
                        }
                    })
                    .collect(),
            })
            .collect();
        let agg = robust_direction_aggregate(&reports, beta).unwrap();
        for (r, g) in agg.iter().enumerate() {
            let honest = reports[..m - byz].iter().map(|rep| rep.coefficients[r]);
            let (lo, hi) = honest.fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v), h.max(v)));
            if !(lo <= *g && *g <= hi) {
                escaped += 1;
            }
        }
    }
    escaped
}

fn gradient_fd(rng: &mut RngStream) -> f64 {
    let data = synth_generate(SEED, 40, 12, 5).unwrap();
    let rows: Vec<usize> = (0..40).collect();
    let batch = Batch::new(&data, &rows);
    let logreg = LogisticRegression::new(12, 5).unwrap();
    let quad = Quadratic::new(2.0, ParamVector::new((0..9).map(|_| rng.gaussian()).collect()).unwrap()).unwrap();
    let mut worst: f64 = 0.0;
    let models: [(&dyn LossModel, Batch<'_>); 2] = [(&logreg, batch), (&quad, Batch::none())];
    for (model, batch) in models {
        let d = model.dim();
        let w: Vec<f64> = (0..d).map(|_| 0.3 * rng.gaussian()).collect();
        let g = model.grad(&w, &batch).unwrap();
        let h = 1e-5;
        for i in 0..d {
            let mut up = w.clone();
            let mut down = w.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (model.loss(&up, &batch).unwrap() - model.loss(&down, &batch).unwrap()) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / g.norm().max(1e-12));
        }
    }
    worst
}

fn criterion_12() -> Outcome {
    let mut rng = RngStream::new(SEED);
    let n = 10_000;
    let (exact, restored) = replay_inverse(&mut rng, n);
    let mismatched = trimmed_vs_oracle(&mut rng, n);
    let escaped = containment(&mut rng, n);
    let fd = gradient_fd(&mut rng);
    let pass = exact == n && restored == n && mismatched == 0 && escaped == 0 && fd < 1e-6;
    outcome(
        pass,
        format!(
            "(w + s z) - s z == w bit-exact in {exact}/{n}; coefficient calls restore w in {restored}/{n}; \
             trimmed mean vs oracle {mismatched} mismatches; 1e300 escapes {escaped}; gradient vs FD {fd:.1e} (< 1e-6)"
        ),
    )
}

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("CYBER0_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |i: usize| selected.as_ref().is_none_or(|s| s.contains(&i));
    let mut shared = Shared::default();
    let mut failed = 0;
    let start = Instant::now();
    for i in 1..=12 {
        if !wanted(i) {
            continue;
        }
        let (o, secs) = timed(|| match i {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(&mut shared),
            8 => criterion_8(),
            9 => criterion_9(),
            10 => criterion_10(&shared),
            11 => criterion_11(),
            _ => criterion_12(),
        });
        let tag = match o.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("{tag} {i:>2}  {}  [{secs:.1} s]", o.detail);
    }
    println!("acceptance: {failed} failed, {:.0} s", start.elapsed().as_secs_f64());
    if failed > 0 && std::env::var("CYBER0_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
