//! Stochastic control driven by time-changed Lévy noise: state dynamics,
//! Hamiltonian, adjoint BSDE, and the mean-variance portfolio problem.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{
    validate_standard_parameters, BackwardSolver, BsdeSolution, Driver, SolverSettings,
    TerminalCondition,
};
use crate::error::{invalid, Error, Result};
use crate::grid::TimeGrid;
use crate::intensity::{IntensityModel, IntensityPath};
use crate::levy::LevyMeasure;
use crate::noise::{NoiseBatch, NoiseScenario};
use crate::regression::{conditional_expectation, Filtration, RegressionSpec, StateMatrix};
use crate::rng::{mix64, stream, Purpose};
use crate::stats::MeanAccumulator;
use crate::stochint::Integrand;

/// Where a coefficient callback is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub step: usize,
    pub t: f64,
    pub lam_b: f64,
    pub lam_h: f64,
    pub u: f64,
    pub x: f64,
}

pub type PointFn = Arc<dyn Fn(&Point) -> f64 + Send + Sync>;
/// Slot 0 is the Brownian loading, slot `j + 1` the loading at atom `j`.
pub type LoadingFn = Arc<dyn Fn(&Point, usize) -> f64 + Send + Sync>;
/// `(x, scenario) ↦ l`.
pub type RewardFn = Arc<dyn Fn(f64, usize) -> f64 + Send + Sync>;

/// `J(u) = E[∫ f dt + l(X_T)]` for
/// `dX = b dt + κ(0) dB + Σ_j κ(z_j) dH̃_j`.
#[derive(Clone)]
pub struct ControlProblem {
    pub drift: PointFn,
    pub drift_dx: PointFn,
    pub loading: LoadingFn,
    pub loading_dx: LoadingFn,
    pub reward: PointFn,
    pub reward_dx: PointFn,
    pub terminal: RewardFn,
    pub terminal_dx: RewardFn,
    /// Closed interval of admissible control values.
    pub controls: (f64, f64),
    /// Bound `K₁` on the x-derivatives of `b` and `κ`.
    pub k1: f64,
    pub x0: f64,
    pub description: String,
}

impl std::fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlProblem")
            .field("controls", &self.controls)
            .field("k1", &self.k1)
            .field("x0", &self.x0)
            .field("description", &self.description)
            .finish()
    }
}

fn zero_point() -> PointFn {
    Arc::new(|_| 0.0)
}

impl ControlProblem {
    /// All callbacks zero, unconstrained controls.
    pub fn new(x0: f64, description: impl Into<String>) -> Self {
        Self {
            drift: zero_point(),
            drift_dx: zero_point(),
            loading: Arc::new(|_, _| 0.0),
            loading_dx: Arc::new(|_, _| 0.0),
            reward: zero_point(),
            reward_dx: zero_point(),
            terminal: Arc::new(|_, _| 0.0),
            terminal_dx: Arc::new(|_, _| 0.0),
            controls: (f64::NEG_INFINITY, f64::INFINITY),
            k1: 0.0,
            x0,
            description: description.into(),
        }
    }

    pub fn with_drift<F, D>(mut self, b: F, db: D) -> Self
    where
        F: Fn(&Point) -> f64 + Send + Sync + 'static,
        D: Fn(&Point) -> f64 + Send + Sync + 'static,
    {
        self.drift = Arc::new(b);
        self.drift_dx = Arc::new(db);
        self
    }

    pub fn with_loading<F, D>(mut self, kappa: F, dkappa: D) -> Self
    where
        F: Fn(&Point, usize) -> f64 + Send + Sync + 'static,
        D: Fn(&Point, usize) -> f64 + Send + Sync + 'static,
    {
        self.loading = Arc::new(kappa);
        self.loading_dx = Arc::new(dkappa);
        self
    }

    pub fn with_reward<F, D>(mut self, f: F, df: D) -> Self
    where
        F: Fn(&Point) -> f64 + Send + Sync + 'static,
        D: Fn(&Point) -> f64 + Send + Sync + 'static,
    {
        self.reward = Arc::new(f);
        self.reward_dx = Arc::new(df);
        self
    }

    pub fn with_terminal<F, D>(mut self, l: F, dl: D) -> Self
    where
        F: Fn(f64, usize) -> f64 + Send + Sync + 'static,
        D: Fn(f64, usize) -> f64 + Send + Sync + 'static,
    {
        self.terminal = Arc::new(l);
        self.terminal_dx = Arc::new(dl);
        self
    }

    pub fn with_controls(mut self, lo: f64, hi: f64) -> Self {
        self.controls = (lo, hi);
        self
    }

    pub fn with_k1(mut self, k1: f64) -> Self {
        self.k1 = k1;
        self
    }

    pub fn admissible(&self, u: f64) -> bool {
        u.is_finite() && u >= self.controls.0 && u <= self.controls.1
    }

    /// `f + b·y + κ(0)φ(0)λ^B + Σ_j κ(z_j)φ(z_j)λ^H w_j`.
    pub fn hamiltonian(&self, p: &Point, y: f64, phi: &[f64], levy: &LevyMeasure) -> f64 {
        combine(&*self.reward, &*self.drift, &*self.loading, p, y, phi, levy)
    }

    /// `∂_x` of the Hamiltonian; the adjoint driver.
    pub fn hamiltonian_dx(&self, p: &Point, y: f64, phi: &[f64], levy: &LevyMeasure) -> f64 {
        combine(&*self.reward_dx, &*self.drift_dx, &*self.loading_dx, p, y, phi, levy)
    }

    /// Central-difference check of every derivative callback at `points`.
    /// Fails when a relative gap exceeds `1e-6`.
    pub fn derivative_check(&self, points: &[Point], slots: usize) -> Result<DerivativeReport> {
        let mut worst: f64 = 0.0;
        let mut bad = Vec::new();
        let mut check = |name: &str, p: &Point, f: &dyn Fn(f64) -> f64, analytic: f64| {
            let h = 1e-5 * p.x.abs().max(1.0);
            let fd = (f(p.x + h) - f(p.x - h)) / (2.0 * h);
            let rel = (fd - analytic).abs() / analytic.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
            if rel > 1e-6 || !rel.is_finite() {
                bad.push(format!(
                    "∂x {name} at step {} x = {:.6}: analytic {analytic:.9e} vs difference {fd:.9e}",
                    p.step, p.x
                ));
            }
        };
        for p in points {
            let at = |x: f64| Point { x, ..*p };
            check("b", p, &|x| (self.drift)(&at(x)), (self.drift_dx)(p));
            check("f", p, &|x| (self.reward)(&at(x)), (self.reward_dx)(p));
            for s in 0..slots {
                check("κ", p, &|x| (self.loading)(&at(x), s), (self.loading_dx)(p, s));
            }
            check("l", p, &|x| (self.terminal)(x, 0), (self.terminal_dx)(p.x, 0));
        }
        if !bad.is_empty() {
            bad.truncate(8);
            return Err(Error::Validation(bad));
        }
        Ok(DerivativeReport {
            max_relative_gap: worst,
            samples: points.len(),
        })
    }

    /// `|∂_x b| ≤ K₁`, `|∂_x κ(0)| ≤ K₁` and `|∂_x κ(z_j)| ≤ K₁|z_j|` at `points`.
    pub fn bounds_check(&self, points: &[Point], levy: &LevyMeasure) -> Vec<String> {
        let mut out = Vec::new();
        let tol = self.k1 * (1.0 + 1e-12) + 1e-15;
        for p in points {
            let db = (self.drift_dx)(p).abs();
            if db > tol {
                out.push(format!("|∂x b| = {db:.6} > K1 at step {}", p.step));
            }
            let dk0 = (self.loading_dx)(p, 0).abs();
            if dk0 > tol {
                out.push(format!("|∂x κ(0)| = {dk0:.6} > K1 at step {}", p.step));
            }
            for (j, a) in levy.atoms().iter().enumerate() {
                let dk = (self.loading_dx)(p, j + 1).abs();
                if dk > self.k1 * a.size.abs() * (1.0 + 1e-12) + 1e-15 {
                    out.push(format!("|∂x κ(z_{})| = {dk:.6} > K1|z| at step {}", j + 1, p.step));
                }
            }
            if out.len() >= 8 {
                break;
            }
        }
        out
    }
}

fn combine(
    f: &(dyn Fn(&Point) -> f64 + Send + Sync),
    b: &(dyn Fn(&Point) -> f64 + Send + Sync),
    kappa: &(dyn Fn(&Point, usize) -> f64 + Send + Sync),
    p: &Point,
    y: f64,
    phi: &[f64],
    levy: &LevyMeasure,
) -> f64 {
    let mut h = f(p) + b(p) * y + kappa(p, 0) * phi[0] * p.lam_b;
    for (j, a) in levy.atoms().iter().enumerate() {
        h += kappa(p, j + 1) * phi[j + 1] * p.lam_h * a.mass;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeReport {
    pub max_relative_gap: f64,
    pub samples: usize,
}

/// What a feedback rule sees at `t_i`.
#[derive(Debug, Clone, Copy)]
pub struct ControlContext<'a> {
    pub step: usize,
    pub t: f64,
    pub scenario: usize,
    /// The whole scenario; rules must only read increments before `step`
    /// and the intensity path.
    pub noise: &'a NoiseScenario,
    /// `X_{t_0}, …, X_{t_i}`.
    pub x_path: &'a [f64],
}

impl ControlContext<'_> {
    pub fn x(&self) -> f64 {
        *self.x_path.last().expect("x_path holds at least X_0")
    }
}

type RuleFn = dyn Fn(&ControlContext<'_>) -> f64 + Send + Sync;

/// A named feedback control, piecewise constant on grid cells.
#[derive(Clone)]
pub struct ControlRule {
    name: String,
    f: Arc<RuleFn>,
}

impl std::fmt::Debug for ControlRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlRule").field("name", &self.name).finish()
    }
}

impl ControlRule {
    pub fn new<F>(name: impl Into<String>, f: F) -> Self
    where
        F: Fn(&ControlContext<'_>) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn constant(name: impl Into<String>, u: f64) -> Self {
        Self::new(name, move |_| u)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn evaluate(&self, ctx: &ControlContext<'_>) -> f64 {
        (self.f)(ctx)
    }

    /// `c · u`.
    pub fn scaled(&self, name: impl Into<String>, c: f64) -> Self {
        let inner = Arc::clone(&self.f);
        Self::new(name, move |ctx| c * inner(ctx))
    }

    /// The rule applied to the previous grid value of the state.
    pub fn lagged(&self, name: impl Into<String>) -> Self {
        let inner = Arc::clone(&self.f);
        Self::new(name, move |ctx| {
            let keep = ctx.step.max(1);
            inner(&ControlContext {
                x_path: &ctx.x_path[..keep],
                ..*ctx
            })
        })
    }
}

/// Controlled trajectories, `x[scenario][point]` and `u[scenario][step]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePaths {
    pub control: String,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

impl StatePaths {
    pub fn terminal(&self, scenario: usize) -> f64 {
        *self.x[scenario].last().expect("non-empty path")
    }

    pub fn state_matrix(&self) -> StateMatrix {
        StateMatrix::from_paths(&self.x)
    }

    /// Callback arguments along the first `scenarios` trajectories.
    pub fn points(&self, batch: &NoiseBatch, scenarios: usize) -> Vec<Point> {
        let mut out = Vec::new();
        for k in 0..scenarios.min(self.x.len()) {
            let p = &batch.scenarios[k].intensity;
            for i in 0..batch.steps() {
                out.push(Point {
                    step: i,
                    t: batch.grid.time(i),
                    lam_b: p.lam_b()[i],
                    lam_h: p.lam_h()[i],
                    u: self.u[k][i],
                    x: self.x[k][i],
                });
            }
        }
        out
    }
}

/// Euler scheme for the controlled state on every scenario.
pub fn simulate_state(
    problem: &ControlProblem,
    rule: &ControlRule,
    batch: &NoiseBatch,
) -> Result<StatePaths> {
    let n = batch.steps();
    let slots = batch.levy.len() + 1;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = batch
        .scenarios
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let mut x = Vec::with_capacity(n + 1);
            let mut u = Vec::with_capacity(n);
            x.push(problem.x0);
            for i in 0..n {
                let ctx = ControlContext {
                    step: i,
                    t: batch.grid.time(i),
                    scenario: k,
                    noise: s,
                    x_path: &x,
                };
                let ui = rule.evaluate(&ctx);
                if !problem.admissible(ui) {
                    return Err(invalid(format!(
                        "control '{}' returned {ui} outside the admissible set at step {i}, scenario {k}",
                        rule.name()
                    )));
                }
                let p = Point {
                    step: i,
                    t: batch.grid.time(i),
                    lam_b: s.intensity.lam_b()[i],
                    lam_h: s.intensity.lam_h()[i],
                    u: ui,
                    x: x[i],
                };
                let mut next = x[i] + (problem.drift)(&p) * batch.grid.dt(i);
                for slot in 0..slots {
                    let m = s.mu(i, slot);
                    if m != 0.0 {
                        next += (problem.loading)(&p, slot) * m;
                    }
                }
                if !next.is_finite() {
                    return Err(Error::Numerical(format!(
                        "state is not finite at step {} of scenario {k}",
                        i + 1
                    )));
                }
                u.push(ui);
                x.push(next);
            }
            Ok((x, u))
        })
        .collect::<Result<_>>()?;
    let (x, u) = rows.into_iter().unzip();
    Ok(StatePaths {
        control: rule.name().to_string(),
        x,
        u,
    })
}

/// Solves `Y_t = ∂_x l(X_T) + ∫_t^T ∂_x H ds − ∫_t^T φ dμ` along `paths`.
///
/// Regression features use the controlled state unless `settings` names
/// another state matrix.
pub fn adjoint_solve(
    problem: &ControlProblem,
    paths: &StatePaths,
    batch: &NoiseBatch,
    settings: SolverSettings,
) -> Result<BsdeSolution> {
    let (g, xi) = adjoint_parameters(problem, paths, batch)?;
    validate_standard_parameters(&g, &xi, batch)?;
    let settings = match settings.state {
        Some(_) => settings,
        None => settings.with_state(Arc::new(paths.state_matrix())),
    };
    BackwardSolver::new(&g, &xi, batch, settings)?.solve()
}

/// The pair `(∂_x H, ∂_x l(X_T))` as a driver and terminal condition.
pub fn adjoint_parameters(
    problem: &ControlProblem,
    paths: &StatePaths,
    batch: &NoiseBatch,
) -> Result<(Driver, TerminalCondition)> {
    let n = batch.steps();
    if paths.x.len() != batch.len() || paths.x.iter().any(|p| p.len() != n + 1) {
        return Err(invalid("state paths do not match the batch"));
    }
    let points: Arc<Vec<Vec<Point>>> = Arc::new(
        (0..batch.len())
            .map(|k| {
                let p = &batch.scenarios[k].intensity;
                (0..n)
                    .map(|i| Point {
                        step: i,
                        t: batch.grid.time(i),
                        lam_b: p.lam_b()[i],
                        lam_h: p.lam_h()[i],
                        u: paths.u[k][i],
                        x: paths.x[k][i],
                    })
                    .collect()
            })
            .collect(),
    );
    // Linear in (y, φ): the Lipschitz constant is the largest coefficient
    // in the metric |Δy| + |Δφ(0)|√λ^B + ‖Δφ‖_w √λ^H.
    let mut lip: f64 = 0.0;
    for row in points.iter() {
        for p in row {
            let jump: f64 = batch
                .levy
                .atoms()
                .iter()
                .enumerate()
                .map(|(j, a)| (problem.loading_dx)(p, j + 1).powi(2) * a.mass)
                .sum();
            lip = lip
                .max((problem.drift_dx)(p).abs())
                .max((problem.loading_dx)(p, 0).abs() * p.lam_b.sqrt())
                .max(jump.sqrt() * p.lam_h.sqrt());
        }
    }
    let pr = problem.clone();
    let levy = batch.levy.clone();
    let pts = Arc::clone(&points);
    let g = Driver::new(lip, format!("∂x H for {}", problem.description), move |a| {
        pr.hamiltonian_dx(&pts[a.scenario][a.step], a.y, a.phi, &levy)
    });
    let terminal: Vec<f64> = (0..batch.len())
        .map(|k| (problem.terminal_dx)(paths.terminal(k), k))
        .collect();
    let xi = TerminalCondition::from_values(terminal, "∂x l(X_T)");
    Ok((g, xi))
}

/// Market data of the portfolio problem, with per-step `ρ`, `α` and
/// deterministic loadings `ψ(0), ψ(z_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanVarianceModel {
    pub rho: Vec<f64>,
    pub alpha: Vec<f64>,
    pub psi: Integrand,
    pub k: f64,
    pub x0: f64,
}

impl MeanVarianceModel {
    pub fn constant(steps: usize, rho: f64, alpha: f64, psi: &[f64], k: f64, x0: f64) -> Self {
        Self {
            rho: vec![rho; steps],
            alpha: vec![alpha; steps],
            psi: Integrand::constant(steps, psi),
            k,
            x0,
        }
    }

    pub fn steps(&self) -> usize {
        self.rho.len()
    }

    /// Shapes and finiteness only.
    pub fn check_shapes(&self, batch: &NoiseBatch) -> Result<()> {
        let n = batch.steps();
        if self.rho.len() != n || self.alpha.len() != n || self.psi.steps() != n {
            return Err(invalid(format!("market model needs {n} steps")));
        }
        if self.psi.atoms() != batch.levy.len() {
            return Err(invalid("ψ needs one slot per Lévy atom plus the Brownian slot"));
        }
        let finite = self.rho.iter().chain(&self.alpha).chain(self.psi.values()).all(|v| v.is_finite());
        if !finite || !self.k.is_finite() || !self.x0.is_finite() {
            return Err(invalid("market model has non-finite entries"));
        }
        Ok(())
    }

    /// Shapes, `α > ρ` and a positive denominator along every path.
    pub fn validate(&self, batch: &NoiseBatch) -> Result<()> {
        self.check_shapes(batch)?;
        if let Some(i) = (0..self.steps()).find(|&i| self.alpha[i] <= self.rho[i]) {
            return Err(Error::Domain(format!(
                "α must exceed ρ; step {i} has α = {} and ρ = {}",
                self.alpha[i], self.rho[i]
            )));
        }
        for s in &batch.scenarios {
            let p = &s.intensity;
            for i in 0..self.steps() {
                self.ratio(i, p.lam_b()[i], p.lam_h()[i], &batch.levy)?;
            }
        }
        Ok(())
    }

    /// `|ψ(0)|²λ^B + Σ_j ψ(z_j)² w_j λ^H`.
    pub fn denominator(&self, step: usize, lam_b: f64, lam_h: f64, levy: &LevyMeasure) -> f64 {
        let row = self.psi.row(step);
        let jump: f64 = levy
            .atoms()
            .iter()
            .enumerate()
            .map(|(j, a)| row[j + 1] * row[j + 1] * a.mass)
            .sum();
        row[0] * row[0] * lam_b + jump * lam_h
    }

    /// `(α − ρ)² / denominator`.
    pub fn ratio(&self, step: usize, lam_b: f64, lam_h: f64, levy: &LevyMeasure) -> Result<f64> {
        let den = self.denominator(step, lam_b, lam_h, levy);
        if !(den > 0.0) {
            return Err(Error::Domain(format!(
                "zero risk denominator at step {step} (λ^B = {lam_b}, λ^H = {lam_h})"
            )));
        }
        let ex = self.alpha[step] - self.rho[step];
        Ok(ex * ex / den)
    }

    /// The control problem with terminal reward `l`.
    pub fn problem_with_terminal<F, D>(&self, description: &str, l: F, dl: D) -> ControlProblem
    where
        F: Fn(f64, usize) -> f64 + Send + Sync + 'static,
        D: Fn(f64, usize) -> f64 + Send + Sync + 'static,
    {
        let (rho, alpha) = (Arc::new(self.rho.clone()), Arc::new(self.alpha.clone()));
        let psi = Arc::new(self.psi.clone());
        let k1 = self.rho.iter().fold(0.0_f64, |a, r| a.max(r.abs()));
        let (r1, a1, r2) = (Arc::clone(&rho), alpha, rho);
        ControlProblem::new(self.x0, description)
            .with_drift(
                move |p| r1[p.step] * p.x + (a1[p.step] - r1[p.step]) * p.u,
                move |p| r2[p.step],
            )
            .with_loading(move |p, slot| p.u * psi.get(p.step, slot), |_, _| 0.0)
            .with_terminal(l, dl)
            .with_k1(k1)
    }

    /// `l(x) = −½(x − k)²`.
    pub fn problem(&self) -> ControlProblem {
        let (k1, k2) = (self.k, self.k);
        self.problem_with_terminal(
            "mean-variance",
            move |x, _| -0.5 * (x - k1) * (x - k1),
            move |x, _| k2 - x,
        )
    }
}

/// `A_t`, `C_t` at grid points `0..=N` along one intensity path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanVarianceCoefficients {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
}

/// `A_t = −exp{−∫_t^T (R_s − 2ρ_s) ds}`, `C_t = k·exp{−∫_t^T (R_s − ρ_s) ds}`
/// with `R = (α − ρ)²/denominator`, by the left-point rule on the grid.
pub fn mv_coefficients(
    model: &MeanVarianceModel,
    path: &IntensityPath,
    grid: &TimeGrid,
    levy: &LevyMeasure,
) -> Result<MeanVarianceCoefficients> {
    coefficients_from_values(model, path.lam_b(), path.lam_h(), 0, grid, levy)
}

/// Coefficients at points `from..=N` for intensity values given on that range.
fn coefficients_from_values(
    model: &MeanVarianceModel,
    lam_b: &[f64],
    lam_h: &[f64],
    from: usize,
    grid: &TimeGrid,
    levy: &LevyMeasure,
) -> Result<MeanVarianceCoefficients> {
    let n = grid.steps();
    let len = n + 1 - from;
    let mut a = vec![0.0; len];
    let mut c = vec![0.0; len];
    let (mut ea, mut ec) = (0.0, 0.0);
    a[len - 1] = -1.0;
    c[len - 1] = model.k;
    for i in (from..n).rev() {
        let r = model.ratio(i, lam_b[i - from], lam_h[i - from], levy)?;
        let dt = grid.dt(i);
        ea += (r - 2.0 * model.rho[i]) * dt;
        ec += (r - model.rho[i]) * dt;
        a[i - from] = -(-ea).exp();
        c[i - from] = model.k * (-ec).exp();
    }
    Ok(MeanVarianceCoefficients { a, c })
}

/// `û = −(α − ρ)(A x + C) / (A · denominator)`.
pub fn mv_feedback(
    model: &MeanVarianceModel,
    a: f64,
    c: f64,
    step: usize,
    x: f64,
    lam_b: f64,
    lam_h: f64,
    levy: &LevyMeasure,
) -> Result<f64> {
    let den = model.denominator(step, lam_b, lam_h, levy);
    if !(den > 0.0) {
        return Err(Error::Domain(format!("zero risk denominator at step {step}")));
    }
    if a == 0.0 {
        return Err(Error::Domain(format!("A vanishes at step {step}")));
    }
    Ok(-(model.alpha[step] - model.rho[step]) * (a * x + c) / (a * den))
}

/// The G-control at `t_i` using the scenario's own intensity path.
pub fn mv_control_g(
    model: &MeanVarianceModel,
    coef: &MeanVarianceCoefficients,
    step: usize,
    x: f64,
    path: &IntensityPath,
    levy: &LevyMeasure,
) -> Result<f64> {
    mv_feedback(model, coef.a[step], coef.c[step], step, x, path.lam_b()[step], path.lam_h()[step], levy)
}

/// `A`, `C` (or their `F`-projections) per `[scenario][point]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    pub filtration: Filtration,
    pub a: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    /// Inner Monte Carlo standard error of the `A` projection (zero when exact).
    pub a_se: Vec<Vec<f64>>,
    pub c_se: Vec<Vec<f64>>,
    pub inner_paths: usize,
    pub warning: Option<String>,
}

/// Pathwise `A`, `C` for every scenario.
pub fn coefficient_field_g(model: &MeanVarianceModel, batch: &NoiseBatch) -> Result<CoefficientField> {
    model.validate(batch)?;
    let rows: Vec<MeanVarianceCoefficients> = batch
        .scenarios
        .par_iter()
        .map(|s| mv_coefficients(model, &s.intensity, &batch.grid, &batch.levy))
        .collect::<Result<_>>()?;
    let zeros = vec![vec![0.0; batch.steps() + 1]; batch.len()];
    let (a, c) = rows.into_iter().map(|r| (r.a, r.c)).unzip();
    Ok(CoefficientField {
        filtration: Filtration::G,
        a,
        c,
        a_se: zeros.clone(),
        c_se: zeros,
        inner_paths: 0,
        warning: None,
    })
}

/// Default number of inner intensity paths per conditioning value.
pub const DEFAULT_INNER_PATHS: usize = 256;
/// Default cap on simulated inner path-steps.
pub const DEFAULT_INNER_BUDGET: u64 = 400_000_000;

/// `E[A_t | F_t]`, `E[C_t | F_t]` by inner simulation of the intensity beyond
/// `t` from its current value; exact when the intensity is deterministic.
///
/// Results are cached per `(step, λ_t)`, so finite-state intensity models
/// cost one inner simulation per state and step.
pub fn coefficient_field_f(
    model: &MeanVarianceModel,
    intensity: &IntensityModel,
    batch: &NoiseBatch,
    inner_paths: usize,
    budget: u64,
) -> Result<CoefficientField> {
    if batch.has_deterministic_intensity() {
        let mut field = coefficient_field_g(model, batch)?;
        field.filtration = Filtration::F;
        return Ok(field);
    }
    model.validate(batch)?;
    if inner_paths == 0 {
        return Err(invalid("inner path count must be positive"));
    }
    let n = batch.steps();
    let mut keys: BTreeMap<(usize, u64, u64), usize> = BTreeMap::new();
    for s in &batch.scenarios {
        for i in 0..n {
            let key = (i, s.intensity.lam_b()[i].to_bits(), s.intensity.lam_h()[i].to_bits());
            let next = keys.len();
            keys.entry(key).or_insert(next);
        }
    }
    let work: u64 = keys.keys().map(|(i, _, _)| (n - i) as u64).sum();
    let mut inner = inner_paths;
    let mut warning = None;
    if work.saturating_mul(inner as u64) > budget {
        inner = ((budget / work.max(1)) as usize).max(8).min(inner_paths);
        warning = Some(format!(
            "inner simulation budget exhausted: {} conditioning values, {inner} inner paths each instead of {inner_paths}",
            keys.len()
        ));
    }
    let list: Vec<((usize, u64, u64), usize)> = keys.iter().map(|(k, v)| (*k, *v)).collect();
    let master = batch.master_seed;
    let values: Vec<(usize, [f64; 4])> = list
        .par_iter()
        .map(|&((i, bb, bh), idx)| {
            let id = mix64(mix64(mix64(i as u64) ^ bb) ^ bh);
            let mut rng = stream(master, id, Purpose::InnerIntensity);
            let (lb, lh) = (f64::from_bits(bb), f64::from_bits(bh));
            let mut acc_a = MeanAccumulator::default();
            let mut acc_c = MeanAccumulator::default();
            for _ in 0..inner {
                let (pb, ph) = intensity.continue_from(&batch.grid, i, lb, lh, &mut rng);
                let co = coefficients_from_values(model, &pb, &ph, i, &batch.grid, &batch.levy)?;
                acc_a.push(co.a[0]);
                acc_c.push(co.c[0]);
            }
            Ok((idx, [acc_a.mean(), acc_c.mean(), acc_a.se(), acc_c.se()]))
        })
        .collect::<Result<_>>()?;
    let mut table = vec![[0.0; 4]; keys.len()];
    for (idx, v) in values {
        table[idx] = v;
    }
    let m = batch.len();
    let mut field = CoefficientField {
        filtration: Filtration::F,
        a: vec![vec![0.0; n + 1]; m],
        c: vec![vec![0.0; n + 1]; m],
        a_se: vec![vec![0.0; n + 1]; m],
        c_se: vec![vec![0.0; n + 1]; m],
        inner_paths: inner,
        warning,
    };
    for (k, s) in batch.scenarios.iter().enumerate() {
        for i in 0..n {
            let key = (i, s.intensity.lam_b()[i].to_bits(), s.intensity.lam_h()[i].to_bits());
            let v = table[keys[&key]];
            field.a[k][i] = v[0];
            field.c[k][i] = v[1];
            field.a_se[k][i] = v[2];
            field.c_se[k][i] = v[3];
        }
        field.a[k][n] = -1.0;
        field.c[k][n] = model.k;
    }
    Ok(field)
}

/// The F-control at `t_i` for one scenario from a projected field.
pub fn mv_control_f(
    model: &MeanVarianceModel,
    field: &CoefficientField,
    scenario: usize,
    step: usize,
    x: f64,
    batch: &NoiseBatch,
) -> Result<f64> {
    let p = &batch.scenarios[scenario].intensity;
    mv_feedback(
        model,
        field.a[scenario][step],
        field.c[scenario][step],
        step,
        x,
        p.lam_b()[step],
        p.lam_h()[step],
        &batch.levy,
    )
}

/// Feedback rule `û` built from a coefficient field.
pub fn mv_rule(
    name: impl Into<String>,
    model: &MeanVarianceModel,
    field: &CoefficientField,
    levy: &LevyMeasure,
) -> ControlRule {
    let model = Arc::new(model.clone());
    let a = Arc::new(field.a.clone());
    let c = Arc::new(field.c.clone());
    let levy = levy.clone();
    ControlRule::new(name, move |ctx| {
        let p = &ctx.noise.intensity;
        let (i, k) = (ctx.step, ctx.scenario);
        mv_feedback(&model, a[k][i], c[k][i], i, ctx.x(), p.lam_b()[i], p.lam_h()[i], &levy)
            .unwrap_or(f64::NAN)
    })
}

/// `{u ≡ 0, u ≡ 0.5, 1.1·û, 0.9·û, û on the lagged state}`.
pub fn standard_challengers(optimal: &ControlRule) -> Vec<ControlRule> {
    vec![
        ControlRule::constant("zero", 0.0),
        ControlRule::constant("constant_0.5", 0.5),
        optimal.scaled("scaled_1.1", 1.1),
        optimal.scaled("scaled_0.9", 0.9),
        optimal.lagged("lagged"),
    ]
}

/// Monte Carlo estimate of `J(u) = E[l(X_T)]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerformanceEstimate {
    pub control: String,
    pub j: f64,
    pub se: f64,
    pub mean_terminal: f64,
    /// Paired `J(û) − J(u)` and its standard error; zero for `û` itself.
    pub gap_to_candidate: f64,
    pub gap_se: f64,
}

pub fn terminal_rewards(problem: &ControlProblem, paths: &StatePaths) -> Vec<f64> {
    (0..paths.x.len())
        .map(|k| (problem.terminal)(paths.terminal(k), k))
        .collect()
}

fn estimate(
    problem: &ControlProblem,
    paths: &StatePaths,
    reference: Option<&[f64]>,
) -> PerformanceEstimate {
    let l = terminal_rewards(problem, paths);
    let acc = MeanAccumulator::from_slice(&l);
    let term = MeanAccumulator::from_slice(&paths.x.iter().map(|p| *p.last().unwrap()).collect::<Vec<_>>());
    let (gap, gap_se) = match reference {
        Some(r) => {
            let d: Vec<f64> = r.iter().zip(&l).map(|(a, b)| a - b).collect();
            let g = MeanAccumulator::from_slice(&d);
            (g.mean(), g.se())
        }
        None => (0.0, 0.0),
    };
    PerformanceEstimate {
        control: paths.control.clone(),
        j: acc.mean(),
        se: acc.se(),
        mean_terminal: term.mean(),
        gap_to_candidate: gap,
        gap_se,
    }
}

/// `J` for `rule` on the batch.
pub fn performance(
    problem: &ControlProblem,
    rule: &ControlRule,
    batch: &NoiseBatch,
) -> Result<PerformanceEstimate> {
    let paths = simulate_state(problem, rule, batch)?;
    Ok(estimate(problem, &paths, None))
}

/// Findings of the sufficient maximum principle for a candidate control.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxPrincipleReport {
    pub control: String,
    pub filtration: String,
    /// Batch RMS of the coefficient of `u` in the Hamiltonian.
    pub foc_rms: f64,
    /// RMS of `Ŷ` over `(scenario, grid)`.
    pub scale_y: f64,
    /// RMS of `Ŷ − (A X̂ + C)`.
    pub affine_rms: f64,
    /// RMS of `φ̂(z) − A û ψ(z)` relative to the RMS of `A û ψ`.
    pub phi_identity_rel: f64,
    pub concavity: String,
    /// Sample second moment of the integrability quantity against each challenger.
    pub integrability: f64,
    pub candidate: PerformanceEstimate,
    pub challengers: Vec<PerformanceEstimate>,
    pub solver_iterations: usize,
}

impl MaxPrincipleReport {
    pub fn foc_relative(&self) -> f64 {
        self.foc_rms / self.scale_y.max(f64::MIN_POSITIVE)
    }

    pub fn affine_relative(&self) -> f64 {
        self.affine_rms / self.scale_y.max(f64::MIN_POSITIVE)
    }

    /// Challengers with `J(û) < J(u) − 3·SE` of the paired difference.
    pub fn dominance_failures(&self) -> Vec<&PerformanceEstimate> {
        self.challengers
            .iter()
            .filter(|c| c.gap_to_candidate < -3.0 * c.gap_se)
            .collect()
    }
}

/// `(α − ρ)y + ψ(0)φ(0)λ^B + Σ_j ψ(z_j)φ(z_j)λ^H w_j`.
pub fn foc_coefficient(
    model: &MeanVarianceModel,
    step: usize,
    y: f64,
    phi: &[f64],
    lam_b: f64,
    lam_h: f64,
    levy: &LevyMeasure,
) -> f64 {
    let psi = model.psi.row(step);
    let mut v = (model.alpha[step] - model.rho[step]) * y + psi[0] * phi[0] * lam_b;
    for (j, a) in levy.atoms().iter().enumerate() {
        v += psi[j + 1] * phi[j + 1] * lam_h * a.mass;
    }
    v
}

/// `(Y, φ)` per `[point][scenario]` and `[step][scenario][slot]`, projected
/// on `F` when asked.
fn adjoint_views(
    sol: &BsdeSolution,
    batch: &NoiseBatch,
    paths: &StatePaths,
    spec: &RegressionSpec,
    filtration: Filtration,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
    let (n, m) = (batch.steps(), batch.len());
    let slots = batch.levy.len() + 1;
    let mut y: Vec<Vec<f64>> = (0..=n).map(|i| sol.y_at(i).to_vec()).collect();
    let mut phi: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| (0..m).map(|k| sol.phi(k).row(i).to_vec()).collect())
        .collect();
    if filtration == Filtration::F {
        let fspec = RegressionSpec {
            filtration: Filtration::F,
            features: RegressionSpec::for_filtration(Filtration::F).features,
            ..spec.clone()
        };
        let state = paths.state_matrix();
        for i in 0..n {
            y[i] = conditional_expectation(&y[i], i, &fspec, batch, &state)?;
            for slot in 0..slots {
                let col: Vec<f64> = (0..m).map(|k| phi[i][k][slot]).collect();
                let proj = conditional_expectation(&col, i, &fspec, batch, &state)?;
                for k in 0..m {
                    phi[i][k][slot] = proj[k];
                }
            }
        }
    }
    Ok((y, phi))
}

/// Solves the adjoint along `û`, then reports the first-order residual, the
/// affine identity `Ŷ = A X̂ + C`, concavity and dominance against `challengers`.
#[allow(clippy::too_many_arguments)]
pub fn maximum_principle_check(
    model: &MeanVarianceModel,
    candidate: &ControlRule,
    field: &CoefficientField,
    challengers: &[ControlRule],
    batch: &NoiseBatch,
    spec: &RegressionSpec,
    tol: f64,
    max_iter: usize,
) -> Result<MaxPrincipleReport> {
    model.validate(batch)?;
    let problem = model.problem();
    let paths = simulate_state(&problem, candidate, batch)?;
    let gspec = RegressionSpec {
        filtration: Filtration::G,
        features: RegressionSpec::default().features,
        ..spec.clone()
    };
    let sol = adjoint_solve(&problem, &paths, batch, SolverSettings::new(gspec, tol, max_iter))?;
    let (y, phi) = adjoint_views(&sol, batch, &paths, spec, field.filtration)?;
    let (n, m) = (batch.steps(), batch.len());
    let slots = batch.levy.len() + 1;

    let mut foc = MeanAccumulator::default();
    let mut phi_gap = MeanAccumulator::default();
    let mut phi_ref = MeanAccumulator::default();
    let mut y_sq = MeanAccumulator::default();
    let mut aff = MeanAccumulator::default();
    for k in 0..m {
        let p = &batch.scenarios[k].intensity;
        for i in 0..=n {
            y_sq.push(y[i][k] * y[i][k]);
            let r = y[i][k] - (field.a[k][i] * paths.x[k][i] + field.c[k][i]);
            aff.push(r * r);
            if i == n {
                continue;
            }
            let (lb, lh) = (p.lam_b()[i], p.lam_h()[i]);
            let v = foc_coefficient(model, i, y[i][k], &phi[i][k], lb, lh, &batch.levy);
            foc.push(v * v);
            for slot in 0..slots {
                let want = field.a[k][i] * paths.u[k][i] * model.psi.get(i, slot);
                phi_gap.push((phi[i][k][slot] - want).powi(2));
                phi_ref.push(want * want);
            }
        }
    }

    let reference = terminal_rewards(&problem, &paths);
    let cand = estimate(&problem, &paths, None);
    let mut others = Vec::with_capacity(challengers.len());
    let mut integrability: f64 = 0.0;
    for ch in challengers {
        let cp = simulate_state(&problem, ch, batch)?;
        others.push(estimate(&problem, &cp, Some(&reference)));
        integrability = integrability.max(integrability_moment(model, &sol, &paths, &cp, batch));
    }
    Ok(MaxPrincipleReport {
        control: candidate.name().to_string(),
        filtration: format!("{:?}", field.filtration),
        foc_rms: foc.mean().sqrt(),
        scale_y: y_sq.mean().sqrt(),
        affine_rms: aff.mean().sqrt(),
        phi_identity_rel: (phi_gap.mean() / phi_ref.mean().max(f64::MIN_POSITIVE)).sqrt(),
        concavity: "Hamiltonian is affine in x, so h_t is concave".to_string(),
        integrability,
        candidate: cand,
        challengers: others,
        solver_iterations: sol.diagnostics.iterations,
    })
}

/// Sample mean of `Σ_i [Ŷ²|Δκ(0)|²λ^B + |ΔX|²φ̂(0)²λ^B + Σ_j(…)λ^H w_j]Δt`.
fn integrability_moment(
    model: &MeanVarianceModel,
    sol: &BsdeSolution,
    hat: &StatePaths,
    other: &StatePaths,
    batch: &NoiseBatch,
) -> f64 {
    let n = batch.steps();
    let mut acc = MeanAccumulator::default();
    for k in 0..batch.len() {
        let p = &batch.scenarios[k].intensity;
        let mut total = 0.0;
        for i in 0..n {
            let y = sol.y(k, i);
            let du = hat.u[k][i] - other.u[k][i];
            let dx = hat.x[k][i] - other.x[k][i];
            let phi = sol.phi(k).row(i);
            let psi = model.psi.row(i);
            let mut v = ((y * du * psi[0]).powi(2) + (dx * phi[0]).powi(2)) * p.lam_b()[i];
            for (j, a) in batch.levy.atoms().iter().enumerate() {
                v += ((y * du * psi[j + 1]).powi(2) + (dx * phi[j + 1]).powi(2)) * p.lam_h()[i] * a.mass;
            }
            total += v * batch.grid.dt(i);
        }
        acc.push(total);
    }
    acc.mean()
}

/// An increasing concave utility with its derivative.
#[derive(Clone)]
pub struct Utility {
    pub name: String,
    pub value: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub derivative: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for Utility {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Utility").field("name", &self.name).finish()
    }
}

impl Utility {
    /// `−½(x − k)²`.
    pub fn quadratic(k: f64) -> Self {
        Self {
            name: format!("quadratic(k={k})"),
            value: Arc::new(move |x| -0.5 * (x - k) * (x - k)),
            derivative: Arc::new(move |x| k - x),
        }
    }

    /// `−e^{−γx}`.
    pub fn exponential(gamma: f64) -> Self {
        Self {
            name: format!("exponential(γ={gamma})"),
            value: Arc::new(move |x| -(-gamma * x).exp()),
            derivative: Arc::new(move |x| gamma * (-gamma * x).exp()),
        }
    }
}

/// Batch RMS over `(scenario, t_i)` of
/// `(α − ρ)Ŷ + ψ(0)φ̂(0)λ^B + Σ_j ψ(z_j)φ̂(z_j)λ^H w_j` for the adjoint with
/// `Y_T = U'(X_T)`.
pub fn utility_foc_residual(
    model: &MeanVarianceModel,
    utility: &Utility,
    rule: &ControlRule,
    batch: &NoiseBatch,
    settings: SolverSettings,
) -> Result<f64> {
    utility_foc_report(model, utility, rule, batch, settings).map(|r| r.foc_rms)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UtilityFocReport {
    pub foc_rms: f64,
    /// RMS of `Ŷ` over `(scenario, grid)`.
    pub scale_y: f64,
    pub mean_terminal: f64,
    pub expected_utility: f64,
    pub expected_utility_se: f64,
}

/// [`utility_foc_residual`] together with the scale of `Ŷ` and `E[U(X_T)]`.
pub fn utility_foc_report(
    model: &MeanVarianceModel,
    utility: &Utility,
    rule: &ControlRule,
    batch: &NoiseBatch,
    settings: SolverSettings,
) -> Result<UtilityFocReport> {
    model.check_shapes(batch)?;
    let (v, d) = (Arc::clone(&utility.value), Arc::clone(&utility.derivative));
    let problem = model.problem_with_terminal(&utility.name, move |x, _| v(x), move |x, _| d(x));
    let paths = simulate_state(&problem, rule, batch)?;
    let sol = adjoint_solve(&problem, &paths, batch, settings)?;
    let mut acc = MeanAccumulator::default();
    for k in 0..batch.len() {
        let p = &batch.scenarios[k].intensity;
        for i in 0..batch.steps() {
            let r = foc_coefficient(
                model,
                i,
                sol.y(k, i),
                sol.phi(k).row(i),
                p.lam_b()[i],
                p.lam_h()[i],
                &batch.levy,
            );
            acc.push(r * r);
        }
    }
    let mut ys = MeanAccumulator::default();
    for i in 0..=batch.steps() {
        sol.y_at(i).iter().for_each(|y| ys.push(y * y));
    }
    let est = estimate(&problem, &paths, None);
    Ok(UtilityFocReport {
        foc_rms: acc.mean().sqrt(),
        scale_y: ys.mean().sqrt(),
        mean_terminal: est.mean_terminal,
        expected_utility: est.j,
        expected_utility_se: est.se,
    })
}

/// Wealth from the Ornstein–Uhlenbeck representation
/// `X_t = e^{∫_0^t ρ}(x₀ + ∫ e^{−∫_0^s ρ}(α − ρ)u ds + ∫ e^{−∫_0^s ρ} u ψ dμ)`
/// with the control path of `paths`, `[scenario][point]`.
pub fn ou_wealth(model: &MeanVarianceModel, paths: &StatePaths, batch: &NoiseBatch) -> Vec<Vec<f64>> {
    let n = batch.steps();
    let slots = batch.levy.len() + 1;
    batch
        .scenarios
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let mut out = Vec::with_capacity(n + 1);
            out.push(model.x0);
            let mut r = 0.0_f64;
            let mut inner = model.x0;
            for i in 0..n {
                let u = paths.u[k][i];
                let dt = batch.grid.dt(i);
                let mut d = (model.alpha[i] - model.rho[i]) * u * dt;
                for slot in 0..slots {
                    d += u * model.psi.get(i, slot) * s.mu(i, slot);
                }
                inner += (-r).exp() * d;
                r += model.rho[i] * dt;
                out.push(r.exp() * inner);
            }
            out
        })
        .collect()
}

/// RMS over `(scenario, point)` of the Euler and OU wealth paths.
pub fn euler_ou_gap(model: &MeanVarianceModel, paths: &StatePaths, batch: &NoiseBatch) -> f64 {
    let ou = ou_wealth(model, paths, batch);
    let mut acc = MeanAccumulator::default();
    for (e, o) in paths.x.iter().zip(&ou) {
        for (a, b) in e.iter().zip(o) {
            acc.push((a - b).powi(2));
        }
    }
    acc.mean().sqrt()
}
