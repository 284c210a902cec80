//! Experiment orchestration: one runner per [`ExperimentKind`].
//!
//! Every run writes `<kind>_<seed>.csv` and `<kind>_<seed>.jsonl` into the
//! output directory. Neither contains timings, so identical configs give
//! byte-identical artifacts at any thread count.

use std::io::Write;
use std::path::PathBuf;

use serde::Serialize;
use serde_json::{json, Value};

use crate::bsde::{
    picard_contraction_probe, validate_standard_parameters, BackwardSolver, Driver, Iterate,
    SolverSettings, TerminalCondition,
};
use crate::config::{ControlChoice, ExperimentConfig, ExperimentKind, Selection};
use crate::control::{
    coefficient_field_f, coefficient_field_g, maximum_principle_check, mv_rule, simulate_state,
    standard_challengers, terminal_rewards, utility_foc_report, ControlRule, MeanVarianceModel,
    Utility,
};
use crate::error::{ConfigIssue, Error, Result};
use crate::grid::make_grid;
use crate::linear::{comparison_harness, linear_solution, LinearCoefficients, OracleMode, StructuralDriver};
use crate::noise::{doubly_stochastic_moments, empirical_char_function, NoiseBatch, NoiseComponent};
use crate::regression::Filtration;
use crate::stats::{fmt_f64, MeanAccumulator};
use crate::stochint::{factor_check, isometry_check, PrefixView};

/// One acceptance check with its measured value and threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub metric: String,
    pub measured: f64,
    pub relation: String,
    pub tolerance: f64,
    pub pass: bool,
    pub note: String,
}

impl Check {
    fn compare(name: impl Into<String>, metric: &str, measured: f64, relation: &str, tolerance: f64) -> Self {
        let pass = match relation {
            "<=" => measured <= tolerance,
            "<" => measured < tolerance,
            ">=" => measured >= tolerance,
            ">" => measured > tolerance,
            "==" => measured == tolerance,
            _ => false,
        };
        Self {
            name: name.into(),
            metric: metric.to_string(),
            measured,
            relation: relation.to_string(),
            tolerance,
            pass,
            note: String::new(),
        }
    }

    fn at_most(name: impl Into<String>, metric: &str, measured: f64, tolerance: f64) -> Self {
        Self::compare(name, metric, measured, "<=", tolerance)
    }

    fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    pub fn summary(&self) -> String {
        let mut line = format!(
            "{} {}: {} = {:.4e} {} {:.4e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.metric,
            self.measured,
            self.relation,
            self.tolerance
        );
        if !self.note.is_empty() {
            line.push_str(" (");
            line.push_str(&self.note);
            line.push(')');
        }
        line
    }
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct Outcome {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub csv: PathBuf,
    pub jsonl: PathBuf,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// 0 when every check passes, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            1
        }
    }

    pub fn summary_lines(&self) -> Vec<String> {
        self.checks.iter().map(Check::summary).collect()
    }
}

/// 2 for configuration problems, 3 for everything raised while running.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Context { source, .. } => exit_code_for(source),
        _ => 3,
    }
}

fn config_error(message: impl Into<String>) -> Error {
    Error::Config(vec![ConfigIssue {
        line: None,
        message: message.into(),
    }])
}

/// In-memory CSV with locale-free formatting.
struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn bytes(&self) -> Vec<u8> {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out.into_bytes()
    }
}

fn num(x: f64) -> String {
    fmt_f64(x)
}

#[derive(Default)]
struct Report {
    checks: Vec<Check>,
    records: Vec<Value>,
    csv: Vec<u8>,
}

impl Report {
    fn check(&mut self, c: Check) {
        self.checks.push(c);
    }

    fn record(&mut self, v: Value) {
        self.records.push(v);
    }
}

/// Runs the experiment, writes its artifacts and returns the checks.
///
/// With `threads` set, the work runs inside a dedicated pool of that size.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    match cfg.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            pool.install(|| run_in_pool(cfg))
        }
        None => run_in_pool(cfg),
    }
}

fn run_in_pool(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut rep = Report::default();
    match cfg.kind {
        ExperimentKind::SimulateNoise => simulate_noise(cfg, &mut rep),
        ExperimentKind::Isometry => isometry(cfg, &mut rep),
        ExperimentKind::CharFunction => char_function(cfg, &mut rep),
        ExperimentKind::SolveBsde => solve_bsde(cfg, &mut rep),
        ExperimentKind::LinearOracle => linear_oracle(cfg, &mut rep),
        ExperimentKind::Comparison => comparison(cfg, &mut rep),
        ExperimentKind::MeanVariance => mean_variance(cfg, &mut rep),
        ExperimentKind::Utility => utility(cfg, &mut rep),
        ExperimentKind::MaxPrinciple => max_principle(cfg, &mut rep),
    }
    .map_err(|e| e.context(cfg.kind.name()))?;

    std::fs::create_dir_all(&cfg.out)?;
    let stem = format!("{}_{}", cfg.kind, cfg.seed);
    let csv = cfg.out.join(format!("{stem}.csv"));
    let jsonl = cfg.out.join(format!("{stem}.jsonl"));
    std::fs::write(&csv, &rep.csv)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(&jsonl)?);
    writeln!(f, "{}", json!({"kind": cfg.kind.name(), "seed": cfg.seed, "steps": cfg.steps, "scenarios": cfg.scenarios, "horizon": cfg.horizon}))?;
    for r in &rep.records {
        writeln!(f, "{r}")?;
    }
    for c in &rep.checks {
        writeln!(f, "{}", serde_json::to_string(c).map_err(|e| Error::InvalidArgument(e.to_string()))?)?;
    }
    f.flush()?;
    Ok(Outcome {
        kind: cfg.kind,
        seed: cfg.seed,
        checks: rep.checks,
        csv,
        jsonl,
    })
}

fn batch_with_steps(cfg: &ExperimentConfig, steps: usize) -> Result<NoiseBatch> {
    let grid = make_grid(cfg.horizon, steps)?;
    NoiseBatch::simulate(&cfg.intensity, &grid, &cfg.levy, cfg.scenarios, cfg.seed)
        .map_err(|e| e.context("noise"))
}

fn batch(cfg: &ExperimentConfig) -> Result<NoiseBatch> {
    batch_with_steps(cfg, cfg.steps)
}

fn settings(cfg: &ExperimentConfig) -> SolverSettings {
    SolverSettings::new(cfg.regression.clone(), cfg.solver.tol, cfg.solver.max_iter)
}

// Registries

/// Coefficients of the `linear` driver; `e` defaults to `0.4·z_j`.
pub fn linear_coefficients(sel: &Selection, cfg: &ExperimentConfig) -> Result<LinearCoefficients> {
    if sel.name != "linear" {
        return Err(config_error(format!(
            "{} needs driver \"linear\", got \"{}\"",
            cfg.kind, sel.name
        )));
    }
    let mut e = vec![sel.scalar("e0", 0.2)];
    match sel.list("e") {
        Some(v) if v.len() == cfg.levy.len() => e.extend_from_slice(v),
        Some(v) => {
            return Err(config_error(format!(
                "driver e has {} values for {} atoms",
                v.len(),
                cfg.levy.len()
            )))
        }
        None => e.extend(cfg.levy.atoms().iter().map(|a| 0.4 * a.size)),
    }
    Ok(LinearCoefficients::constant(sel.scalar("a", 0.3), sel.scalar("c", 0.1), &e))
}

pub fn build_driver(cfg: &ExperimentConfig) -> Result<Driver> {
    let sel = &cfg.driver;
    Ok(match sel.name.as_str() {
        "zero" => Driver::zero(),
        "linear" => linear_coefficients(sel, cfg)?.driver(&cfg.levy),
        "scaled-y" => {
            let a = sel.scalar("a", 0.5);
            Driver::new(a.abs(), format!("{a}·y"), move |g| a * g.y)
        }
        "sine" => {
            let (a, b) = (sel.scalar("a", 0.5), sel.scalar("b", 0.5));
            Driver::new(a.abs().max(b.abs()), format!("{a}·sin y + {b}·φ(0)√λB"), move |g| {
                a * g.y.sin() + b * g.phi[0] * g.lam_b.sqrt()
            })
        }
        "mean-variance-adjoint" | "exp-utility" => {
            let rho = cfg.control.rho;
            Driver::new(rho.abs(), format!("{rho}·y"), move |g| rho * g.y)
        }
        other => return Err(config_error(format!("unknown driver \"{other}\""))),
    })
}

fn eta(s: &crate::noise::NoiseScenario, levy: &crate::levy::LevyMeasure) -> f64 {
    levy.atoms()
        .iter()
        .enumerate()
        .map(|(j, a)| a.size * (0..s.steps()).map(|i| s.d_htilde(i, j)).sum::<f64>())
        .sum()
}

pub fn build_terminal(cfg: &ExperimentConfig) -> Result<TerminalCondition> {
    let sel = &cfg.terminal;
    let b_t = |s: &crate::noise::NoiseScenario| s.d_b.iter().sum::<f64>();
    Ok(match sel.name.as_str() {
        "zero" => TerminalCondition::constant(0.0),
        "constant" => TerminalCondition::constant(sel.scalar("c", 1.0)),
        "brownian" => {
            let a = sel.scalar("a", 1.0);
            TerminalCondition::new(f64::INFINITY, format!("{a}·B_T"), move |_, s| a * b_t(s))
        }
        "affine" => {
            let (a, b, c) = (sel.scalar("a", 1.0), sel.scalar("b", 0.5), sel.scalar("c", 1.0));
            let levy = cfg.levy.clone();
            TerminalCondition::new(f64::INFINITY, format!("{a}·B_T + {b}·η_T + {c}"), move |_, s| {
                a * b_t(s) + b * eta(s, &levy) + c
            })
        }
        "square" => {
            let a = sel.scalar("a", 1.0);
            TerminalCondition::new(f64::INFINITY, format!("{a}·B_T²"), move |_, s| a * b_t(s).powi(2))
        }
        other => {
            return Err(config_error(format!(
                "terminal \"{other}\" depends on wealth and is only available in control experiments"
            )))
        }
    })
}

fn mv_model(cfg: &ExperimentConfig, steps: usize) -> MeanVarianceModel {
    let c = &cfg.control;
    let mut psi = vec![c.psi0];
    psi.extend_from_slice(&c.psi);
    MeanVarianceModel::constant(steps, c.rho, c.alpha, &psi, c.k, c.x0)
}

// Kinds

fn simulate_noise(cfg: &ExperimentConfig, rep: &mut Report) -> Result<()> {
    let b = batch(cfg)?;
    b.write_csv_head(&mut rep.csv, cfg.csv_scenarios)?;
    let k = cfg.checks.se_multiplier;
    for j in 0..b.levy.len() {
        let m = doubly_stochastic_moments(&b, 0..b.steps(), j)?;
        let ref_mean = cfg.checks.expected_mean.unwrap_or(m.reference_mean);
        let ref_var = cfg.checks.expected_variance.unwrap_or(m.reference_variance);
        rep.record(json!({
            "atom": j, "mean": m.mean, "variance": m.variance, "mean_se": m.mean_se,
            "variance_se": m.variance_se, "reference_mean": ref_mean, "reference_variance": ref_var,
        }));
        rep.check(
            Check::at_most(format!("moments[atom {j}] mean"), "|mean-ref|", (m.mean - ref_mean).abs(), k * m.mean_se)
                .with_note(format!("mean {:.4}, reference {:.4}", m.mean, ref_mean)),
        );
        rep.check(
            Check::at_most(
                format!("moments[atom {j}] variance"),
                "|var-ref|",
                (m.variance - ref_var).abs(),
                k * m.variance_se,
            )
            .with_note(format!("variance {:.4}, reference {:.4}", m.variance, ref_var)),
        );
    }
    // B_T and the compensated counts are centred.
    let mut acc = MeanAccumulator::default();
    b.scenarios.iter().for_each(|s| acc.push(s.d_b.iter().sum()));
    rep.check(Check::at_most("martingale[B_T]", "|mean|", acc.mean().abs(), k * acc.se()));
    for j in 0..b.levy.len() {
        let mut acc = MeanAccumulator::default();
        b.scenarios
            .iter()
            .for_each(|s| acc.push((0..s.steps()).map(|i| s.d_htilde(i, j)).sum()));
        rep.check(Check::at_most(format!("martingale[H~ atom {j}]"), "|mean|", acc.mean().abs(), k * acc.se()));
    }
    Ok(())
}

type Builder = fn(&PrefixView<'_>, &mut [f64]);

fn integrands(atoms: usize) -> Vec<(&'static str, Builder)> {
    let mut v: Vec<(&'static str, Builder)> = vec![("constant-diffusion", |_, row| row[0] = 1.0)];
    if atoms > 0 {
        v.push(("constant-jump", |_, row| row[1..].iter_mut().for_each(|x| *x = 1.0)));
    }
    v.push(("path-dependent-B", |p, row| row[0] = p.brownian()));
    v
}

fn isometry(cfg: &ExperimentConfig, rep: &mut Report) -> Result<()> {
    let b = batch(cfg)?;
    let mut table = Table::new(&["integrand", "lhs", "rhs", "se", "gap"]);
    for (name, f) in integrands(b.levy.len()) {
        let r = isometry_check(f, &b)?;
        table.push(vec![name.into(), num(r.lhs), num(r.rhs), num(r.se), num(r.gap())]);
        rep.check(
            Check::at_most(format!("isometry[{name}]"), "|lhs-rhs|", r.gap(), cfg.checks.se_multiplier * r.se)
                .with_note(format!("lhs {:.5}, rhs {:.5}", r.lhs, r.rhs)),
        );
    }
    let xi = |p: &crate::intensity::IntensityPath| {
        let n = p.steps();
        1.0 + p.cum_b()[n] + (-p.cum_h()[n]).exp()
    };
    let mixed = |p: &PrefixView<'_>, row: &mut [f64]| {
        row[0] = p.brownian();
        row[1..].iter_mut().for_each(|x| *x = 1.0 + p.step() as f64);
    };
    let fr = factor_check(xi, mixed, &b)?;
    rep.record(json!({"factor_max_abs": fr.max_abs, "factor_max_rel": fr.max_rel, "factor_max_rel_to_value": fr.max_rel_to_value}));
    rep.check(
        Check::at_most("factor", "max |xI(phi)-I(x phi)| / (|x| sum|phi mu|)", fr.max_rel, cfg.checks.factor_rel)
            .with_note(format!("relative to |xI(phi)|: {:.2e}", fr.max_rel_to_value)),
    );
    rep.csv = table.bytes();
    Ok(())
}

fn char_function(cfg: &ExperimentConfig, rep: &mut Report) -> Result<()> {
    let b = batch(cfg)?;
    let times = if cfg.checks.char_t.is_empty() {
        vec![cfg.horizon / 2.0, cfg.horizon]
    } else {
        cfg.checks.char_t.clone()
    };
    let mut comps = vec![(NoiseComponent::Brownian, "B")];
    if !b.levy.is_empty() {
        comps.push((NoiseComponent::Jump, "eta"));
    }
    let mut table = Table::new(&["component", "c", "t", "re_empirical", "im_empirical", "re_reference", "im_reference", "se", "gap"]);
    for &(comp, label) in &comps {
        for &t in &times {
            for &c in &cfg.checks.char_c {
                let e = empirical_char_function(&b, c, t, comp)?;
                table.push(vec![
                    label.into(),
                    num(c),
                    num(t),
                    num(e.empirical.re),
                    num(e.empirical.im),
                    num(e.reference.re),
                    num(e.reference.im),
                    num(e.se),
                    num(e.gap()),
                ]);
                let tol = cfg.checks.char_floor.max(cfg.checks.se_multiplier * e.se);
                rep.check(Check::at_most(format!("char-function[{label}, c={c}, t={t}]"), "|gap|", e.gap(), tol));
            }
        }
    }
    rep.csv = table.bytes();
    Ok(())
}

fn solve_bsde(cfg: &ExperimentConfig, rep: &mut Report) -> Result<()> {
    let b = batch(cfg)?;
    let g = build_driver(cfg)?;
    let xi = build_terminal(cfg)?;
    let params = validate_standard_parameters(&g, &xi, &b).map_err(|e| e.context("bsde"))?;
    rep.record(json!({"standard_parameters": params}));

    let mut solver = BackwardSolver::new(&g, &xi, &b, settings(cfg)).map_err(|e| e.context("bsde"))?;
    let sol = solver.solve().map_err(|e| e.context("bsde"))?;
    sol.write_csv_head(&mut rep.csv, cfg.csv_scenarios)?;
    rep.record(json!({"iterations": sol.diagnostics.iterations, "distances": sol.diagnostics.distances}));

    let n = b.steps();
    let xi_v = xi.evaluate(&b);
    let mismatched = sol.y_at(n).iter().zip(&xi_v).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    rep.check(Check::compare("terminal exactness", "scenarios with Y(T) != xi", mismatched as f64, "==", 0.0));

    if b.has_deterministic_intensity() {
        let y0 = MeanAccumulator::from_slice(sol.y0_by_scenario());
        let next = MeanAccumulator::from_slice(sol.y_at(1.min(n)));
        let se = (next.variance() / b.len() as f64).sqrt();
        rep.check(
            Check::at_most("Y0 measurability", "sd(Y0)", y0.variance().max(0.0).sqrt(), cfg.checks.se_multiplier * se)
                .with_note("deterministic intensity"),
        );
    }

    let k_g = params.declared_lipschitz.max(params.sampled_ratio);
    let kt = k_g * cfg.horizon;
    rep.check(Check::at_most("contraction horizon", "K_g*T", kt, cfg.checks.contraction_kt));
    let atoms = b.levy.len();
    let starts = [
        Iterate::zeros(n, b.len(), atoms),
        Iterate::constant(n, b.len(), atoms, 3.0, -1.0),
    ];
    let probe = picard_contraction_probe(&mut solver, starts, cfg.checks.contraction_iters, cfg.checks.contraction_final)
        .map_err(|e| e.context("bsde"))?;
    let max_ratio = probe.ratios.iter().copied().fold(0.0, f64::max);
    let final_dist = probe.traces.iter().filter_map(|t| t.last().copied()).fold(0.0, f64::max);
    rep.record(json!({"contraction": probe}));
    rep.check(Check::compare("contraction ratios", "max ratio", max_ratio, "<", 1.0));
    rep.check(
        Check::at_most("contraction final distance", "distance", final_dist, cfg.checks.contraction_final)
            .with_note(format!("{} iterations", probe.traces[0].len())),
    );
    rep.check(Check::at_most("fixed point uniqueness", "RMS(Ya-Yb)", probe.final_y_rms_gap, cfg.checks.fixed_point_gap));
    Ok(())
}

/// RMS over `(scenario, point)` of `|Y_solver − Y_oracle| / (1 + |Y_oracle|)`.
fn oracle_gap(cfg: &ExperimentConfig, b: &NoiseBatch) -> Result<(f64, f64, f64, usize)> {
    let coef = linear_coefficients(&cfg.driver, cfg)?;
    coef.validate(b).map_err(|e| e.context("linear"))?;
    let xi = build_terminal(cfg)?;
    let oracle = linear_solution(&coef, &xi, b, &cfg.regression, OracleMode::Recursive).map_err(|e| e.context("linear"))?;
    let mut solver = BackwardSolver::new(&coef.driver(&b.levy), &xi, b, settings(cfg)).map_err(|e| e.context("bsde"))?;
    let sol = solver.solve().map_err(|e| e.context("bsde"))?;
    let mut acc = MeanAccumulator::default();
    for (i, row) in oracle.iter().enumerate() {
        for (k, o) in row.iter().enumerate() {
            acc.push(((sol.y(k, i) - o) / (1.0 + o.abs())).powi(2));
        }
    }
    let y0o = MeanAccumulator::from_slice(&oracle[0]).mean();
    let y0s = MeanAccumulator::from_slice(sol.y_at(0)).mean();
    Ok((acc.mean().sqrt(), y0o, y0s, sol.diagnostics.iterations))
}

fn linear_oracle(cfg: &ExperimentConfig, rep: &mut Report) -> Result<()> {
    let mut table = Table::new(&["steps", "rms_relative_gap", "oracle_y0_mean", "solver_y0_mean", "iterations"]);
    let mut gaps = Vec::new();
    for steps in [cfg.steps, 2 * cfg.steps] {
        let b = batch_with_steps(cfg, steps)?;
        let (rms, y0o, y0s, it) = oracle_gap(cfg, &b)?;
        table.push(vec![steps.to_string(), num(rms), num(y0o), num(y0s), it.to_string()]);
        gaps.push(rms);
    }
    rep.check(Check::at_most(format!("oracle agreement N={}", cfg.steps), "RMS rel gap", gaps[0], cfg.checks.oracle_rms));
    rep.check(
        Check::compare(format!("oracle refinement N={}", 2 * cfg.steps), "RMS rel gap", gaps[1], "<", gaps[0])
            .with_note("must fall below the coarse-grid gap"),
    );
    rep.csv = table.bytes();
    Ok(())
}

fn comparison(cfg: &ExperimentConfig, rep: &mut Report) -> Result<()> {
    let b = batch(cfg)?;
    let coef = linear_coefficients(&cfg.driver, cfg)?;
    coef.validate(&b).map_err(|e| e.context("linear"))?;
    let (oracle_rms, ..) = oracle_gap(cfg, &b)?;
    let eps = 3.0 * oracle_rms;
    rep.record(json!({"oracle_rms": oracle_rms, "eps_tol": eps}));

    let (a, c) = (cfg.driver.scalar("a", 0.3), cfg.driver.scalar("c", 0.1));
    let kappa: Vec<f64> = coef
        .e
        .iter()
        .map(|f| f.at(0, 0))
        .collect();
    let g1 = coef.driver(&b.levy);
    let same = StructuralDriver::new(kappa.clone(), 1.0, "linear", move |_, y, bb, h| a * y + c + bb + h);
    let plus = StructuralDriver::new(kappa, 1.0, "linear + 1", move |_, y, bb, h| a * y + c + 1.0 + bb + h);
    let xi = build_terminal(cfg)?;
    let shifted = {
        let base = build_terminal(cfg)?;
        let values: Vec<f64> = base.evaluate(&b).iter().map(|v| v + 1.0).collect();
        TerminalCondition::from_values(values, "xi + 1")
    };
    let cases: [(&str, &StructuralDriver, &TerminalCondition); 3] = [
        ("identical", &same, &xi),
        ("terminal+1", &same, &shifted),
        ("driver+1", &plus, &xi),
    ];
    let mut table = Table::new(&["example", "eps_tol", "violation_fraction", "max_exceedance", "min_gap", "mean_gap", "preconditions"]);
    for (name, g2, xi2) in cases {
        let (r, _, _) = comparison_harness(&g1, &xi, g2, xi2, &b, &cfg.regression, cfg.solver.tol, eps)
            .map_err(|e| e.context("linear"))?;
        let pre = if r.precondition_violations.is_empty() {
            "ok".to_string()
        } else {
            r.precondition_violations.join("; ").replace(',', ";")
        };
        table.push(vec![
            name.into(),
            num(r.eps_tol),
            num(r.violation_fraction),
            num(r.max_exceedance),
            num(r.min_gap),
            num(r.mean_gap),
            pre.clone(),
        ]);
        rep.check(
            Check::at_most(format!("comparison[{name}]"), "violation fraction", r.violation_fraction, cfg.checks.violation_fraction)
                .with_note(format!("eps {eps:.3e}")),
        );
        rep.check(Check::compare(
            format!("comparison[{name}] preconditions"),
            "violations",
            r.precondition_violations.len() as f64,
            "==",
            0.0,
        ));
    }
    rep.csv = table.bytes();
    Ok(())
}

fn field_for(
    cfg: &ExperimentConfig,
    model: &MeanVarianceModel,
    b: &NoiseBatch,
    filtration: Filtration,
) -> Result<crate::control::CoefficientField> {
    match filtration {
        Filtration::G => coefficient_field_g(model, b),
        Filtration::F => coefficient_field_f(model, &cfg.intensity, b, cfg.control.inner_paths, cfg.control.inner_budget),
    }
    .map_err(|e| e.context("control"))
}

const MV_HEADER: [&str; 6] = ["experiment_id", "control_name", "J_estimate", "J_se", "foc_rms", "affine_rms"];

fn mean_variance(cfg: &ExperimentConfig, rep: &mut Report) -> Result<()> {
    let mut table = Table::new(&MV_HEADER);
    let mut foc = Vec::new();
    for (round, steps) in [cfg.steps, 2 * cfg.steps].into_iter().enumerate() {
        let b = batch_with_steps(cfg, steps)?;
        let model = mv_model(cfg, steps);
        let field = field_for(cfg, &model, &b, cfg.control.filtration)?;
        let opt = mv_rule("optimal", &model, &field, &b.levy);
        let challengers = if round == 0 { standard_challengers(&opt) } else { Vec::new() };
        let r = maximum_principle_check(&model, &opt, &field, &challengers, &b, &cfg.regression, cfg.solver.tol, cfg.solver.max_iter)
            .map_err(|e| e.context("control"))?;
        let id = format!("{}_{}_N{}", cfg.kind, cfg.seed, steps);
        table.push(vec![id.clone(), r.control.clone(), num(r.candidate.j), num(r.candidate.se), num(r.foc_rms), num(r.affine_rms)]);
        for c in &r.challengers {
            table.push(vec![id.clone(), c.control.clone(), num(c.j), num(c.se), String::new(), String::new()]);
        }
        rep.record(json!({"steps": steps, "report": r, "field_warning": field.warning}));
        foc.push(r.foc_relative());
        if round == 0 {
            rep.check(Check::at_most(format!("foc residual N={steps}"), "foc_rms/scale(Y)", r.foc_relative(), cfg.checks.foc_rel));
            rep.check(Check::at_most(format!("affine identity N={steps}"), "affine_rms/scale(Y)", r.affine_relative(), cfg.checks.affine_rel));
            for c in &r.challengers {
                rep.check(
                    Check::compare(format!("dominance[{}]", c.control), "J(u*)-J(u)", c.gap_to_candidate, ">=", -cfg.checks.se_multiplier * c.gap_se)
                        .with_note(format!("E[X_T] {:.4}", r.candidate.mean_terminal)),
                );
            }
            if cfg.control.rho == 0.0 && cfg.control.filtration == Filtration::G {
                let gap = feedback_identity_gap(&model, &opt, &b)?;
                rep.check(Check::at_most("feedback u = (a-r)/den (k-X)", "max abs gap", gap, 1e-12));
            }
        }
    }
    rep.check(
        Check::compare(format!("foc residual N={}", 2 * cfg.steps), "foc_rms/scale(Y)", foc[1], "<", foc[0])
            .with_note("must decrease as N doubles"),
    );
    rep.csv = table.bytes();
    Ok(())
}

/// With `ρ ≡ 0`, `C = −kA` and the feedback collapses to `(α/den)(k − X)`.
fn feedback_identity_gap(model: &MeanVarianceModel, rule: &ControlRule, b: &NoiseBatch) -> Result<f64> {
    let paths = simulate_state(&model.problem(), rule, b)?;
    let mut worst: f64 = 0.0;
    for (k, s) in b.scenarios.iter().enumerate() {
        for i in 0..b.steps() {
            let p = &s.intensity;
            let den = model.denominator(i, p.lam_b()[i], p.lam_h()[i], &b.levy);
            let expect = (model.alpha[i] - model.rho[i]) / den * (model.k - paths.x[k][i]);
            worst = worst.max((paths.u[k][i] - expect).abs() / (1.0 + expect.abs()));
        }
    }
    Ok(worst)
}

fn utility(cfg: &ExperimentConfig, rep: &mut Report) -> Result<()> {
    let b = batch(cfg)?;
    let model = mv_model(cfg, cfg.steps);
    model.validate(&b).map_err(|e| e.context("control"))?;
    let u = match cfg.terminal.name.as_str() {
        "mean-variance" => Utility::quadratic(cfg.control.k),
        "exp-utility" => Utility::exponential(cfg.terminal.scalar("gamma", cfg.control.gamma)),
        other => return Err(config_error(format!("utility experiments need terminal \"mean-variance\" or \"exp-utility\", got \"{other}\""))),
    };
    let rule = match cfg.control.control {
        ControlChoice::Optimal => {
            let field = field_for(cfg, &model, &b, cfg.control.filtration)?;
            mv_rule("mean-variance feedback", &model, &field, &b.levy)
        }
        ControlChoice::Zero => ControlRule::constant("zero", 0.0),
        ControlChoice::Constant => ControlRule::constant(format!("constant_{}", cfg.control.constant), cfg.control.constant),
    };
    let r = utility_foc_report(&model, &u, &rule, &b, settings(cfg)).map_err(|e| e.context("control"))?;
    let mut table = Table::new(&["experiment_id", "utility", "control_name", "EU_estimate", "EU_se", "mean_terminal", "foc_rms", "scale_y"]);
    table.push(vec![
        format!("{}_{}_N{}", cfg.kind, cfg.seed, cfg.steps),
        u.name.clone(),
        rule.name().to_string(),
        num(r.expected_utility),
        num(r.expected_utility_se),
        num(r.mean_terminal),
        num(r.foc_rms),
        num(r.scale_y),
    ]);
    rep.record(json!({"utility": u.name, "control": rule.name(), "report": r}));
    rep.check(Check::at_most(
        format!("utility foc[{}, {}]", u.name, rule.name()),
        "foc_rms/scale(Y)",
        r.foc_rms / r.scale_y.max(f64::MIN_POSITIVE),
        cfg.checks.foc_rel,
    ));
    rep.csv = table.bytes();
    Ok(())
}

fn max_principle(cfg: &ExperimentConfig, rep: &mut Report) -> Result<()> {
    let b = batch(cfg)?;
    let model = mv_model(cfg, cfg.steps);
    let field_g = field_for(cfg, &model, &b, Filtration::G)?;
    let opt_g = mv_rule("optimal_G", &model, &field_g, &b.levy);
    let r = maximum_principle_check(&model, &opt_g, &field_g, &standard_challengers(&opt_g), &b, &cfg.regression, cfg.solver.tol, cfg.solver.max_iter)
        .map_err(|e| e.context("control"))?;
    let id = format!("{}_{}_N{}", cfg.kind, cfg.seed, cfg.steps);
    let mut table = Table::new(&MV_HEADER);
    table.push(vec![id.clone(), r.control.clone(), num(r.candidate.j), num(r.candidate.se), num(r.foc_rms), num(r.affine_rms)]);
    for c in &r.challengers {
        table.push(vec![id.clone(), c.control.clone(), num(c.j), num(c.se), String::new(), String::new()]);
        rep.check(Check::compare(
            format!("dominance[{}]", c.control),
            "J(u_G)-J(u)",
            c.gap_to_candidate,
            ">=",
            -cfg.checks.se_multiplier * c.gap_se,
        ));
    }
    rep.record(json!({"report_G": r}));

    let field_f = field_for(cfg, &model, &b, Filtration::F)?;
    let opt_f = mv_rule("optimal_F", &model, &field_f, &b.levy);
    let problem = model.problem();
    let paths_g = simulate_state(&problem, &opt_g, &b)?;
    let paths_f = simulate_state(&problem, &opt_f, &b)?;
    if b.has_deterministic_intensity() {
        let diff = paths_g
            .u
            .iter()
            .zip(&paths_f.u)
            .flat_map(|(a, c)| a.iter().zip(c).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        rep.check(Check::compare("F equals G on deterministic intensity", "max |u_F-u_G|", diff, "==", 0.0));
    } else {
        let lg = terminal_rewards(&problem, &paths_g);
        let lf = terminal_rewards(&problem, &paths_f);
        let d: Vec<f64> = lg.iter().zip(&lf).map(|(a, c)| a - c).collect();
        let acc = MeanAccumulator::from_slice(&d);
        let jf = MeanAccumulator::from_slice(&lf);
        table.push(vec![id, opt_f.name().to_string(), num(jf.mean()), num(jf.se()), String::new(), String::new()]);
        let note = field_f.warning.clone().unwrap_or_else(|| format!("{} inner paths", field_f.inner_paths));
        rep.check(
            Check::compare("information value J(u_G) >= J(u_F)", "J(u_G)-J(u_F)", acc.mean(), ">=", -cfg.checks.se_multiplier * acc.se())
                .with_note(note),
        );
    }
    rep.record(json!({"f_field_warning": field_f.warning, "inner_paths": field_f.inner_paths}));
    rep.csv = table.bytes();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn run(text: &str) -> Outcome {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = parse_config(text).unwrap();
        cfg.out = dir.path().to_path_buf();
        let out = run_experiment(&cfg).unwrap();
        assert!(out.csv.exists() && out.jsonl.exists());
        out
    }

    #[test]
    fn isometry_small_batch_passes() {
        let out = run("kind = \"isometry\"\nseed = 3\n[grid]\nsteps = 10\n[batch]\nscenarios = 4000\n");
        assert!(out.passed(), "{:?}", out.summary_lines());
        assert_eq!(out.checks.len(), 4);
        assert!(out.csv.ends_with("isometry_3.csv"));
    }

    #[test]
    fn registry_mismatch_is_a_config_error() {
        let mut cfg = parse_config("kind = \"linear-oracle\"\nseed = 1\n[batch]\nscenarios = 10\n[driver]\nname = \"zero\"\n").unwrap();
        cfg.out = tempfile::tempdir().unwrap().path().to_path_buf();
        let err = run_experiment(&cfg).unwrap_err();
        assert_eq!(exit_code_for(&err), 2, "{err}");
    }

    #[test]
    fn check_summary_format() {
        let c = Check::at_most("x", "|d|", 0.5, 1.0);
        assert!(c.pass);
        assert!(c.summary().starts_with("PASS x: |d| = 5.0000e-1 <= 1.0000e0"));
        assert!(!Check::at_most("x", "m", f64::NAN, 1.0).pass);
    }
}
