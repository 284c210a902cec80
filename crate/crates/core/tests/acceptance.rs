//! Acceptance gate: criteria 1–11 at their stated tolerances and runtime
//! budgets. Prints one PASS/FAIL line per criterion and exits nonzero when
//! any criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use timechange_bsde::control::mv_coefficients;
use timechange_bsde::{
    load_config, run_experiment, Check, ExperimentConfig, ExperimentKind, MeanVarianceModel,
    NoiseBatch, Outcome,
};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(file: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = load_config(&configs().join(file), None, None)
        .unwrap_or_else(|e| panic!("{file}: {e}"));
    cfg.out = out.to_path_buf();
    cfg
}

struct Criterion {
    id: usize,
    title: &'static str,
    budget: Duration,
    elapsed: Duration,
    failures: Vec<String>,
    details: Vec<String>,
}

impl Criterion {
    fn new(id: usize, title: &'static str, budget_s: u64) -> Self {
        Self {
            id,
            title,
            budget: Duration::from_secs(budget_s),
            elapsed: Duration::ZERO,
            failures: Vec::new(),
            details: Vec::new(),
        }
    }

    /// Runs `cfg`, keeping the checks selected by `keep`.
    fn run(&mut self, cfg: &ExperimentConfig, keep: impl Fn(&Check) -> bool) -> Option<Outcome> {
        let t0 = Instant::now();
        let res = run_experiment(cfg);
        self.elapsed += t0.elapsed();
        match res {
            Ok(out) => {
                for c in out.checks.iter().filter(|c| keep(c)) {
                    self.details.push(c.summary());
                    if !c.pass {
                        self.failures.push(c.name.clone());
                    }
                }
                Some(out)
            }
            Err(e) => {
                self.failures.push(format!("{}: {e}", cfg.kind));
                None
            }
        }
    }

    fn require(&mut self, ok: bool, what: String) {
        self.details.push(format!("{} {what}", if ok { "PASS" } else { "FAIL" }));
        if !ok {
            self.failures.push(what);
        }
    }

    fn finish(mut self) -> bool {
        if self.elapsed > self.budget {
            self.failures.push(format!("runtime {:.1}s over budget", self.elapsed.as_secs_f64()));
        }
        let pass = self.failures.is_empty();
        println!(
            "{} criterion {:>2} {}: {:.1}s / {}s{}",
            if pass { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs(),
            if pass { String::new() } else { format!(" [{}]", self.failures.join("; ")) }
        );
        for d in &self.details {
            println!("       {d}");
        }
        pass
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let out = tmp.path();
    let mut results = Vec::new();

    // 1. Isometry, three integrands, M = 1e5, N = 50.
    let mut c = Criterion::new(1, "isometry", 10);
    let cfg = config("isometry.toml", out);
    assert_eq!((cfg.scenarios, cfg.steps), (100_000, 50));
    if let Some(o) = c.run(&cfg, |ch| ch.name.starts_with("isometry[")) {
        c.require(
            o.checks.iter().filter(|ch| ch.name.starts_with("isometry[")).count() == 3,
            "three integrands checked".into(),
        );
    }
    results.push(c.finish());

    // 2. Characteristic functions, M = 1e5.
    let mut c = Criterion::new(2, "characteristic functions", 10);
    let cfg = config("char_function.toml", out);
    assert_eq!(cfg.scenarios, 100_000);
    if let Some(o) = c.run(&cfg, |_| true) {
        c.require(o.checks.len() == 12, format!("{} (component, c, t) cells", o.checks.len()));
    }
    results.push(c.finish());

    // 3. Doubly stochastic moments. Oracle: H(T) given λ is Poisson(λT);
    // law of total variance over λ ∈ {1, 3} equiprobable.
    let mut c = Criterion::new(3, "doubly stochastic moments", 10);
    let mut cfg = config("simulate_noise.toml", out);
    let (levels, p) = ([1.0_f64, 3.0], [0.5, 0.5]);
    let mean: f64 = levels.iter().zip(&p).map(|(l, q)| l * q).sum();
    let second: f64 = levels.iter().zip(&p).map(|(l, q)| l * l * q).sum();
    cfg.checks.expected_mean = Some(mean);
    cfg.checks.expected_variance = Some(mean + (second - mean * mean));
    c.require(
        mean == 2.0 && mean + second - mean * mean == 3.0,
        "oracle mean 2, variance 3".into(),
    );
    c.run(&cfg, |ch| ch.name.starts_with("moments"));
    results.push(c.finish());

    // 4. Factor property, M = 1e4.
    let mut c = Criterion::new(4, "factor property", 5);
    let mut cfg = config("isometry.toml", out);
    cfg.scenarios = 10_000;
    c.run(&cfg, |ch| ch.name == "factor");
    results.push(c.finish());

    // 5. Linear-BSDE oracle, N = 50 and 100, M = 1e4.
    let mut c = Criterion::new(5, "linear oracle agreement", 60);
    let cfg = config("linear_oracle.toml", out);
    assert_eq!((cfg.scenarios, cfg.steps), (10_000, 50));
    c.run(&cfg, |_| true);
    results.push(c.finish());

    // 6 and 7 share one solve.
    let cfg = config("solve_bsde.toml", out);
    let mut c6 = Criterion::new(6, "Picard contraction", 60);
    let mut c7 = Criterion::new(7, "terminal exactness and Y0 measurability", 10);
    let t0 = Instant::now();
    let res = run_experiment(&cfg);
    let dt = t0.elapsed();
    c6.elapsed = dt;
    c7.elapsed = dt;
    match res {
        Ok(o) => {
            for ch in &o.checks {
                let target = if ch.name.starts_with("contraction") || ch.name.starts_with("fixed point") {
                    &mut c6
                } else {
                    &mut c7
                };
                target.details.push(ch.summary());
                if !ch.pass {
                    target.failures.push(ch.name.clone());
                }
            }
            c7.require(
                o.checks.iter().any(|ch| ch.name == "Y0 measurability"),
                "Y0 check ran on deterministic intensity".into(),
            );
        }
        Err(e) => {
            c6.failures.push(e.to_string());
            c7.failures.push(e.to_string());
        }
    }
    results.push(c6.finish());
    results.push(c7.finish());

    // 8. Comparison theorem.
    let mut c = Criterion::new(8, "comparison theorem", 60);
    c.run(&config("comparison.toml", out), |_| true);
    results.push(c.finish());

    // 9. Mean-variance first-order condition on the worked example.
    let mut c = Criterion::new(9, "mean-variance first-order condition", 60);
    let cfg = config("mean_variance.toml", out);
    let model = MeanVarianceModel::constant(cfg.steps, 0.0, 0.1, &[0.2], 1.2, 1.0);
    let small = NoiseBatch::simulate(&cfg.intensity, &make(&cfg), &cfg.levy, 2, 1).expect("batch");
    let co = mv_coefficients(&model, &small.scenarios[0].intensity, &small.grid, &small.levy).expect("A, C");
    // (α − ρ)²/(ψ(0)²λ^B) = 0.01/0.04 = 0.25.
    let worst = (0..=cfg.steps)
        .map(|i| {
            let t = i as f64 / cfg.steps as f64;
            let a = -(-0.25 * (1.0 - t)).exp();
            (co.a[i] - a).abs().max((co.c[i] + 1.2 * a).abs())
        })
        .fold(0.0, f64::max);
    c.require(worst < 1e-12, format!("A = -exp(-0.25(1-t)), C = -kA: max error {worst:.2e}"));
    c.run(&cfg, |ch| !ch.name.starts_with("dominance"));
    results.push(c.finish());

    // 10. Dominance, deterministic and random intensity.
    let mut c = Criterion::new(10, "dominance and information", 120);
    c.run(&config("max_principle_deterministic.toml", out), |_| true);
    c.run(&config("max_principle.toml", out), |_| true);
    results.push(c.finish());

    // 11. Determinism across runs and thread counts.
    // Each run stays within the budget of the criterion it belongs to.
    let files = [
        ("simulate_noise.toml", 10),
        ("isometry.toml", 10),
        ("char_function.toml", 10),
        ("solve_bsde.toml", 60),
        ("linear_oracle.toml", 60),
        ("comparison.toml", 60),
        ("mean_variance.toml", 60),
        ("utility.toml", 60),
        ("max_principle.toml", 120),
    ];
    let total: u64 = files.iter().map(|(_, b)| 2 * b).sum();
    let mut c = Criterion::new(11, "determinism", total);
    let mut kinds = Vec::new();
    for (f, budget) in files {
        let mut bytes = Vec::new();
        let before = c.elapsed;
        for (run, threads) in [(0, 1), (1, 4)] {
            let dir = out.join(format!("det{run}"));
            let mut cfg = config(f, &dir);
            cfg.threads = Some(threads);
            let t0 = Instant::now();
            let o = run_experiment(&cfg);
            c.elapsed += t0.elapsed();
            match o {
                Ok(o) => bytes.push((std::fs::read(&o.csv).ok(), std::fs::read(&o.jsonl).ok())),
                Err(e) => c.failures.push(format!("{f}: {e}")),
            }
        }
        let pair = c.elapsed - before;
        c.require(
            pair <= Duration::from_secs(2 * budget),
            format!("{f}: two runs in {:.1}s (budget {budget}s each)", pair.as_secs_f64()),
        );
        if let [a, b] = &bytes[..] {
            let same = a.0.is_some() && a == b;
            c.require(same, format!("{f}: byte-identical CSV and JSONL at 1 and 4 threads"));
        }
        kinds.push(load_config(&configs().join(f), None, None).map(|c| c.kind).ok());
    }
    c.require(
        ExperimentKind::ALL.iter().all(|k| kinds.contains(&Some(*k))),
        "every experiment kind covered".into(),
    );
    results.push(c.finish());

    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn make(cfg: &ExperimentConfig) -> timechange_bsde::TimeGrid {
    timechange_bsde::make_grid(cfg.horizon, cfg.steps).expect("grid")
}
