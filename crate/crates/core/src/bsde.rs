//! Regression-based Picard solver for
//! `Y_t = ξ + ∫_t^T g(s, λ_s, Y_s, φ_s) ds − ∫_t^T ∫ φ_s(z) μ(ds, dz)`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::grid::TimeGrid;
use crate::levy::LevyMeasure;
use crate::noise::{NoiseBatch, NoiseScenario};
use crate::regression::{raw_features, PhiEstimator, Projector, RegressionSpec, StateMatrix};
use crate::rng::{stream, Purpose};
use crate::stats::{fmt_f64, ordered_sum, MeanAccumulator};
use crate::stochint::{integrate, Integrand};

/// Arguments handed to a driver at one `(scenario, step)`.
#[derive(Debug, Clone, Copy)]
pub struct DriverArgs<'a> {
    pub scenario: usize,
    pub step: usize,
    pub t: f64,
    pub lam_b: f64,
    pub lam_h: f64,
    pub y: f64,
    /// `φ(0)` then `φ(z_j)` per atom.
    pub phi: &'a [f64],
}

pub type DriverFn = dyn Fn(&DriverArgs<'_>) -> f64 + Send + Sync;

/// The generator `g` with its declared Lipschitz constant.
#[derive(Clone)]
pub struct Driver {
    eval: Arc<DriverFn>,
    lipschitz: f64,
    description: String,
}

impl Driver {
    pub fn new<F>(lipschitz: f64, description: impl Into<String>, f: F) -> Self
    where
        F: Fn(&DriverArgs<'_>) -> f64 + Send + Sync + 'static,
    {
        Self {
            eval: Arc::new(f),
            lipschitz,
            description: description.into(),
        }
    }

    pub fn zero() -> Self {
        Self::new(0.0, "zero", |_| 0.0)
    }

    pub fn evaluate(&self, args: &DriverArgs<'_>) -> f64 {
        (self.eval)(args)
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn description(&self) -> &str {
        &self.description
    }
}

impl fmt::Debug for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Driver")
            .field("lipschitz", &self.lipschitz)
            .field("description", &self.description)
            .finish()
    }
}

pub type TerminalFn = dyn Fn(usize, &NoiseScenario) -> f64 + Send + Sync;

/// `ξ` as a function of the scenario (and its index in the batch).
#[derive(Clone)]
pub struct TerminalCondition {
    eval: Arc<TerminalFn>,
    budget: f64,
    description: String,
}

impl TerminalCondition {
    pub fn new<F>(budget: f64, description: impl Into<String>, f: F) -> Self
    where
        F: Fn(usize, &NoiseScenario) -> f64 + Send + Sync + 'static,
    {
        Self {
            eval: Arc::new(f),
            budget,
            description: description.into(),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(f64::INFINITY, format!("constant {c}"), move |_, _| c)
    }

    /// Precomputed values indexed by scenario.
    pub fn from_values(values: Vec<f64>, description: impl Into<String>) -> Self {
        let values = Arc::new(values);
        Self::new(f64::INFINITY, description, move |k, _| values[k])
    }

    pub fn with_budget(mut self, budget: f64) -> Self {
        self.budget = budget;
        self
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn evaluate(&self, batch: &NoiseBatch) -> Vec<f64> {
        batch
            .scenarios
            .par_iter()
            .enumerate()
            .map(|(k, s)| (self.eval)(k, s))
            .collect()
    }
}

impl fmt::Debug for TerminalCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TerminalCondition")
            .field("budget", &self.budget)
            .field("description", &self.description)
            .finish()
    }
}

/// `|Δy| + |Δφ(0)|√λ^B + (Σ_j Δφ(z_j)² w_j)^{1/2} √λ^H`.
pub fn lipschitz_metric(dy: f64, dphi: &[f64], lam_b: f64, lam_h: f64, levy: &LevyMeasure) -> f64 {
    let jump: f64 = levy
        .atoms()
        .iter()
        .enumerate()
        .map(|(j, a)| dphi[j + 1] * dphi[j + 1] * a.mass)
        .sum();
    dy.abs() + dphi[0].abs() * lam_b.sqrt() + jump.sqrt() * lam_h.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StandardParameterReport {
    pub declared_lipschitz: f64,
    /// Largest sampled `|Δg| / metric`.
    pub sampled_ratio: f64,
    /// Batch mean of `Σ_i g(t_i, λ_i, 0, 0)² Δt`.
    pub zero_driver_square_integral: f64,
    pub terminal_second_moment: f64,
    pub samples: usize,
}

const LIPSCHITZ_SAMPLES: usize = 512;

/// Sampled check of the Lipschitz bound and square integrability of
/// `g(·, 0, 0)` and `ξ`.
pub fn validate_standard_parameters(
    g: &Driver,
    xi: &TerminalCondition,
    batch: &NoiseBatch,
) -> Result<StandardParameterReport> {
    let n = batch.steps();
    let slots = batch.levy.len() + 1;
    let zero_phi = vec![0.0; slots];
    let zero_sq = ordered_sum(batch.len(), |k| {
        let s = &batch.scenarios[k];
        (0..n)
            .map(|i| {
                let v = g.evaluate(&driver_args(batch, k, i, 0.0, &zero_phi, s));
                v * v * batch.grid.dt(i)
            })
            .sum()
    }) / batch.len() as f64;
    let xi_values = xi.evaluate(batch);
    let xi_sq = xi_values.iter().map(|v| v * v).sum::<f64>() / batch.len() as f64;

    let mut rng = stream(batch.master_seed, 0, Purpose::Lipschitz);
    let mut ratio: f64 = 0.0;
    let mut non_finite = false;
    let mut phi_a = vec![0.0; slots];
    let mut phi_b = vec![0.0; slots];
    for _ in 0..LIPSCHITZ_SAMPLES {
        let k = rng.random_range(0..batch.len());
        let i = rng.random_range(0..n);
        let scale = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let mut draw = || -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        };
        let ya = draw();
        let yb = draw();
        for v in phi_a.iter_mut().chain(phi_b.iter_mut()) {
            *v = draw();
        }
        let s = &batch.scenarios[k];
        let ga = g.evaluate(&driver_args(batch, k, i, ya, &phi_a, s));
        let gb = g.evaluate(&driver_args(batch, k, i, yb, &phi_b, s));
        if !ga.is_finite() || !gb.is_finite() {
            non_finite = true;
            continue;
        }
        let dphi: Vec<f64> = phi_a.iter().zip(&phi_b).map(|(a, b)| a - b).collect();
        let metric = lipschitz_metric(
            ya - yb,
            &dphi,
            s.intensity.lam_b()[i],
            s.intensity.lam_h()[i],
            &batch.levy,
        );
        if metric > 0.0 {
            ratio = ratio.max((ga - gb).abs() / metric);
        }
    }

    let mut violations = Vec::new();
    if non_finite {
        violations.push("driver returned a non-finite value on finite inputs".to_string());
    }
    if ratio > g.lipschitz() * (1.0 + 1e-9) + 1e-12 {
        violations.push(format!(
            "Lipschitz condition: sampled ratio {ratio:.6} exceeds declared K_g = {}",
            g.lipschitz()
        ));
    }
    if !zero_sq.is_finite() {
        violations.push("g(λ, 0, 0) is not square integrable on the sample".to_string());
    }
    if !xi_sq.is_finite() || xi_sq > xi.budget() {
        violations.push(format!(
            "terminal condition: sample E[ξ²] = {xi_sq:.6e} exceeds budget {:.6e}",
            xi.budget()
        ));
    }
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(StandardParameterReport {
        declared_lipschitz: g.lipschitz(),
        sampled_ratio: ratio,
        zero_driver_square_integral: zero_sq,
        terminal_second_moment: xi_sq,
        samples: LIPSCHITZ_SAMPLES,
    })
}

fn driver_args<'a>(
    batch: &NoiseBatch,
    scenario: usize,
    step: usize,
    y: f64,
    phi: &'a [f64],
    s: &NoiseScenario,
) -> DriverArgs<'a> {
    DriverArgs {
        scenario,
        step,
        t: batch.grid.time(step),
        lam_b: s.intensity.lam_b()[step],
        lam_h: s.intensity.lam_h()[step],
        y,
        phi,
    }
}

/// A full trajectory `(Y, φ)` on the batch, stored step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    /// `y[point][scenario]`.
    pub y: Vec<Vec<f64>>,
    /// `phi[step][scenario * slots + slot]`.
    pub phi: Vec<Vec<f64>>,
    slots: usize,
}

impl Iterate {
    pub fn constant(steps: usize, scenarios: usize, atoms: usize, y: f64, phi: f64) -> Self {
        Self {
            y: vec![vec![y; scenarios]; steps + 1],
            phi: vec![vec![phi; scenarios * (atoms + 1)]; steps],
            slots: atoms + 1,
        }
    }

    pub fn zeros(steps: usize, scenarios: usize, atoms: usize) -> Self {
        Self::constant(steps, scenarios, atoms, 0.0, 0.0)
    }

    pub fn phi_row(&self, step: usize, scenario: usize) -> &[f64] {
        &self.phi[step][scenario * self.slots..(scenario + 1) * self.slots]
    }
}

/// Squared distance: `max_i mean(ΔY_i²) + mean Σ_i Σ_slot Δφ² · (ΔΛ weight)`.
pub fn iterate_distance(a: &Iterate, b: &Iterate, batch: &NoiseBatch) -> f64 {
    let m = batch.len();
    let y_part = a
        .y
        .iter()
        .zip(&b.y)
        .map(|(ya, yb)| ordered_sum(m, |k| (ya[k] - yb[k]).powi(2)) / m as f64)
        .fold(0.0, f64::max);
    let phi_part = ordered_sum(m, |k| {
        let p = &batch.scenarios[k].intensity;
        let mut acc = 0.0;
        for i in 0..a.phi.len() {
            let (ra, rb) = (a.phi_row(i, k), b.phi_row(i, k));
            acc += (ra[0] - rb[0]).powi(2) * p.d_cum_b(i);
            for (j, atom) in batch.levy.atoms().iter().enumerate() {
                acc += (ra[j + 1] - rb[j + 1]).powi(2) * atom.mass * p.d_cum_h(i);
            }
        }
        acc
    }) / m as f64;
    y_part + phi_part
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolverDiagnostics {
    /// Distance between successive Picard iterates.
    pub distances: Vec<f64>,
    /// Gram-matrix condition number per step.
    pub condition_numbers: Vec<f64>,
    pub iterations: usize,
    /// Implicit-step solves that hit the inner iteration cap.
    pub inner_cap_hits: usize,
}

/// `(Y, φ)` on the batch.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub grid: TimeGrid,
    y: Vec<Vec<f64>>,
    phi: Vec<Integrand>,
    pub diagnostics: SolverDiagnostics,
}

impl BsdeSolution {
    fn from_iterate(grid: &TimeGrid, it: Iterate, diagnostics: SolverDiagnostics) -> Self {
        let m = it.y[0].len();
        let n = it.phi.len();
        let atoms = it.slots - 1;
        let phi = (0..m)
            .map(|k| {
                let mut p = Integrand::zeros(n, atoms);
                for i in 0..n {
                    p.row_mut(i).copy_from_slice(it.phi_row(i, k));
                }
                p
            })
            .collect();
        Self {
            grid: grid.clone(),
            y: it.y,
            phi,
            diagnostics,
        }
    }

    pub fn scenarios(&self) -> usize {
        self.phi.len()
    }

    pub fn y(&self, scenario: usize, point: usize) -> f64 {
        self.y[point][scenario]
    }

    /// `Y_{t_i}` across scenarios.
    pub fn y_at(&self, point: usize) -> &[f64] {
        &self.y[point]
    }

    pub fn phi(&self, scenario: usize) -> &Integrand {
        &self.phi[scenario]
    }

    /// `Y_0` per scenario; `F^Λ`-measurable by construction of the basis.
    pub fn y0_by_scenario(&self) -> &[f64] {
        &self.y[0]
    }

    /// Mean of `(ξ − Y_0 − I(φ))²`.
    pub fn reconstruction_mse(&self, batch: &NoiseBatch) -> Result<f64> {
        let n = self.grid.steps();
        let mut acc = MeanAccumulator::default();
        for (k, s) in batch.scenarios.iter().enumerate() {
            let r = self.y[n][k] - self.y[0][k] - integrate(&self.phi[k], s)?;
            acc.push(r * r);
        }
        Ok(acc.mean())
    }

    /// `scenario_id,t,Y,phi_0,phi_z1,...`; the `φ` columns are empty at `T`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        self.write_csv_head(w, self.scenarios())
    }

    /// [`write_csv`](Self::write_csv) restricted to the first `count` scenarios.
    pub fn write_csv_head<W: Write>(&self, mut w: W, count: usize) -> Result<()> {
        let atoms = self.phi.first().map_or(0, Integrand::atoms);
        write!(w, "scenario_id,t,Y,phi_0")?;
        for j in 0..atoms {
            write!(w, ",phi_z{}", j + 1)?;
        }
        writeln!(w)?;
        let n = self.grid.steps();
        for k in 0..count.min(self.scenarios()) {
            for i in 0..=n {
                write!(w, "{},{},{}", k, fmt_f64(self.grid.time(i)), fmt_f64(self.y[i][k]))?;
                for slot in 0..=atoms {
                    if i < n {
                        write!(w, ",{}", fmt_f64(self.phi[k].get(i, slot)))?;
                    } else {
                        write!(w, ",")?;
                    }
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    /// One JSON object per Picard iteration, then one per step.
    pub fn write_diagnostics<W: Write>(&self, mut w: W) -> Result<()> {
        for (k, d) in self.diagnostics.distances.iter().enumerate() {
            let line = serde_json::json!({"iteration": k + 1, "distance": d});
            writeln!(w, "{line}")?;
        }
        for (i, c) in self.diagnostics.condition_numbers.iter().enumerate() {
            let line = serde_json::json!({"step": i, "condition_number": c});
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Knobs for [`BackwardSolver`].
#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub spec: RegressionSpec,
    pub tol: f64,
    pub max_iter: usize,
    /// State coordinates for the `State` feature; defaults to the noise.
    pub state: Option<Arc<StateMatrix>>,
}

impl SolverSettings {
    pub fn new(spec: RegressionSpec, tol: f64, max_iter: usize) -> Self {
        Self {
            spec,
            tol,
            max_iter,
            state: None,
        }
    }

    pub fn with_state(mut self, state: Arc<StateMatrix>) -> Self {
        self.state = Some(state);
        self
    }
}

const INNER_MAX: usize = 50;

/// Holds the batch-dependent pieces of the scheme (terminal values, cached
/// projectors, normalized increments) so that `Θ` can be applied repeatedly.
pub struct BackwardSolver<'a> {
    g: Driver,
    batch: &'a NoiseBatch,
    settings: SolverSettings,
    state: Arc<StateMatrix>,
    xi: Vec<f64>,
    projectors: Vec<Option<Projector>>,
    /// Per step, `m × slots` normalized increments (zero on null cells).
    increments: Vec<Vec<f64>>,
    /// Per step, `m × slots` values of `√(weight)` for each slot.
    roots: Vec<Vec<f64>>,
    inner_cap_hits: usize,
}

impl<'a> BackwardSolver<'a> {
    pub fn new(
        g: &Driver,
        xi: &TerminalCondition,
        batch: &'a NoiseBatch,
        settings: SolverSettings,
    ) -> Result<Self> {
        settings.spec.validate()?;
        if !(settings.tol > 0.0) {
            return Err(invalid("tolerance must be positive"));
        }
        if settings.max_iter == 0 {
            return Err(invalid("max-iter must be at least 1"));
        }
        let dt = batch.grid.step_size();
        if g.lipschitz() * dt >= 1.0 {
            return Err(invalid(format!(
                "K_g·Δt = {:.3} ≥ 1; refine the grid",
                g.lipschitz() * dt
            )));
        }
        let state = match &settings.state {
            Some(s) => Arc::clone(s),
            None => Arc::new(StateMatrix::noise(batch)),
        };
        let n = batch.steps();
        let slots = batch.levy.len() + 1;
        let mut increments = Vec::with_capacity(n);
        let mut roots = Vec::with_capacity(n);
        for i in 0..n {
            let mut inc = vec![0.0; batch.len() * slots];
            let mut rt = vec![0.0; batch.len() * slots];
            for (k, s) in batch.scenarios.iter().enumerate() {
                let p = &s.intensity;
                let wb = p.d_cum_b(i);
                if wb > 0.0 {
                    rt[k * slots] = wb.sqrt();
                    inc[k * slots] = s.d_b[i] / wb.sqrt();
                }
                for (j, a) in batch.levy.atoms().iter().enumerate() {
                    let wh = a.mass * p.d_cum_h(i);
                    if wh > 0.0 {
                        rt[k * slots + j + 1] = wh.sqrt();
                        inc[k * slots + j + 1] = s.d_htilde(i, j) / wh.sqrt();
                    }
                }
            }
            increments.push(inc);
            roots.push(rt);
        }
        Ok(Self {
            g: g.clone(),
            batch,
            xi: xi.evaluate(batch),
            settings,
            state,
            projectors: vec![None; n],
            increments,
            roots,
            inner_cap_hits: 0,
        })
    }

    fn slots(&self) -> usize {
        self.batch.levy.len() + 1
    }

    pub fn terminal_values(&self) -> &[f64] {
        &self.xi
    }

    fn ensure_projector(&mut self, step: usize, proxy: &[f64]) -> Result<()> {
        let rebuild = self.settings.spec.uses_y_proxy() || self.projectors[step].is_none();
        if rebuild {
            let spec = &self.settings.spec;
            let (raw, d) = raw_features(self.batch, &self.state, Some(proxy), step, spec)?;
            let extra = match spec.phi {
                PhiEstimator::Joint => Some((self.increments[step].as_slice(), self.slots())),
                PhiEstimator::Covariation => None,
            };
            let p = Projector::build(step, self.batch.len(), &raw, d, spec.degree, spec.ridge, extra)?;
            self.projectors[step] = Some(p);
        }
        Ok(())
    }

    /// One application of `Θ`: backward sweep with the driver evaluated at
    /// `φ` of `prev` and implicitly in `Y`.
    pub fn theta(&mut self, prev: &Iterate) -> Result<Iterate> {
        let n = self.batch.steps();
        let m = self.batch.len();
        let slots = self.slots();
        let mut out = Iterate::zeros(n, m, slots - 1);
        out.y[n].copy_from_slice(&self.xi);
        let estimator = self.settings.spec.phi;
        let inner_tol = self.settings.tol / 10.0;
        for i in (0..n).rev() {
            self.ensure_projector(i, &prev.y[i])?;
            let next = &out.y[i + 1];
            let increments = &self.increments[i];
            let roots = &self.roots[i];
            let proj = self.projectors[i].as_ref().expect("projector built");
            let (cond_mean, phi) = match estimator {
                PhiEstimator::Joint => {
                    let blocks = proj.fit_blocks(next);
                    let mut phi = vec![0.0; m * slots];
                    for k in 0..m {
                        for s in 0..slots {
                            let r = roots[k * slots + s];
                            if r > 0.0 {
                                phi[k * slots + s] = blocks[s + 1][k] / r;
                            }
                        }
                    }
                    (blocks.into_iter().next().expect("block 0"), phi)
                }
                PhiEstimator::Covariation => {
                    let cond_mean = proj.fit(next);
                    let mut phi = vec![0.0; m * slots];
                    for s in 0..slots {
                        let target: Vec<f64> = (0..m)
                            .map(|k| {
                                let r = roots[k * slots + s];
                                if r > 0.0 {
                                    next[k] * increments[k * slots + s] / r
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let fit = proj.fit(&target);
                        for k in 0..m {
                            if roots[k * slots + s] > 0.0 {
                                phi[k * slots + s] = fit[k];
                            }
                        }
                    }
                    (cond_mean, phi)
                }
            };
            let dt = self.batch.grid.dt(i);
            let g = &self.g;
            let batch = self.batch;
            let solved: Vec<(f64, bool)> = (0..m)
                .into_par_iter()
                .map(|k| {
                    let s = &batch.scenarios[k];
                    let psi = prev.phi_row(i, k);
                    let mut y = cond_mean[k];
                    for _ in 0..INNER_MAX {
                        let y_new = cond_mean[k] + g.evaluate(&driver_args(batch, k, i, y, psi, s)) * dt;
                        let done = (y_new - y).abs() <= inner_tol;
                        y = y_new;
                        if done {
                            return (y, false);
                        }
                    }
                    (y, true)
                })
                .collect();
            let mut capped_here = 0;
            for (k, (y, capped)) in solved.into_iter().enumerate() {
                if !y.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite Y at step {i}, scenario {k}"
                    )));
                }
                out.y[i][k] = y;
                capped_here += usize::from(capped);
            }
            self.inner_cap_hits += capped_here;
            out.phi[i] = phi;
        }
        Ok(out)
    }

    fn diagnostics(&self, distances: Vec<f64>) -> SolverDiagnostics {
        SolverDiagnostics {
            iterations: distances.len(),
            distances,
            condition_numbers: self
                .projectors
                .iter()
                .map(|p| p.as_ref().map_or(f64::NAN, Projector::condition_number))
                .collect(),
            inner_cap_hits: self.inner_cap_hits,
        }
    }

    /// Picard iteration from `initial` until the distance drops below `tol`.
    pub fn solve_from(&mut self, initial: Iterate) -> Result<BsdeSolution> {
        let mut prev = initial;
        let mut distances = Vec::new();
        for _ in 0..self.settings.max_iter {
            let next = self.theta(&prev)?;
            let d = iterate_distance(&next, &prev, self.batch);
            distances.push(d);
            prev = next;
            if d < self.settings.tol {
                let diag = self.diagnostics(distances);
                return Ok(BsdeSolution::from_iterate(&self.batch.grid, prev, diag));
            }
        }
        Err(Error::Convergence {
            iterations: distances.len(),
            last: *distances.last().unwrap_or(&f64::NAN),
            trace: distances,
        })
    }

    pub fn solve(&mut self) -> Result<BsdeSolution> {
        let b = self.batch;
        self.solve_from(Iterate::zeros(b.steps(), b.len(), b.levy.len()))
    }
}

/// Solves the BSDE with the default noise state features.
pub fn solve_backward(
    g: &Driver,
    xi: &TerminalCondition,
    batch: &NoiseBatch,
    spec: &RegressionSpec,
    tol: f64,
    max_iter: usize,
) -> Result<BsdeSolution> {
    let settings = SolverSettings::new(spec.clone(), tol, max_iter);
    BackwardSolver::new(g, xi, batch, settings)?.solve()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionProbe {
    /// Distance between `Θⁿ(a)` and `Θⁿ(b)` for `n = 1, 2, …`.
    pub distances: Vec<f64>,
    /// Successive ratios of `distances` while the earlier term exceeds the
    /// round-off floor.
    pub ratios: Vec<f64>,
    /// Successive-iterate distances of each sequence.
    pub traces: [Vec<f64>; 2],
    /// RMS over `(scenario, point)` of `Y^a − Y^b` after the last iteration.
    pub final_y_rms_gap: f64,
}

/// Round-off floor of the squared distance, relative to `1 + mean Y²`.
/// Ratios are formed only from distances above it.
pub const DISTANCE_FLOOR: f64 = 1e-18;

/// Applies `Θ` to two starting iterates in lockstep.
pub fn picard_contraction_probe(
    solver: &mut BackwardSolver<'_>,
    initial: [Iterate; 2],
    iterations: usize,
    stop_below: f64,
) -> Result<ContractionProbe> {
    let [mut a, mut b] = initial;
    let batch = solver.batch;
    let mut distances = Vec::new();
    let mut traces = [Vec::new(), Vec::new()];
    for _ in 0..iterations {
        let a2 = solver.theta(&a)?;
        let b2 = solver.theta(&b)?;
        traces[0].push(iterate_distance(&a2, &a, batch));
        traces[1].push(iterate_distance(&b2, &b, batch));
        distances.push(iterate_distance(&a2, &b2, batch));
        a = a2;
        b = b2;
        let last = |t: &Vec<f64>| *t.last().expect("pushed");
        if last(&traces[0]) < stop_below && last(&traces[1]) < stop_below {
            break;
        }
    }
    let m = batch.len() as f64;
    let y_sq = a.y.iter().flatten().map(|v| v * v).sum::<f64>() / (a.y.len() as f64 * m);
    let floor = DISTANCE_FLOOR * (1.0 + y_sq);
    let ratios = distances
        .windows(2)
        .take_while(|w| w[0] > floor)
        .map(|w| w[1] / w[0])
        .collect();
    let count = (a.y.len() * batch.len()) as f64;
    let sq: f64 = a
        .y
        .iter()
        .zip(&b.y)
        .flat_map(|(ya, yb)| ya.iter().zip(yb).map(|(x, y)| (x - y).powi(2)))
        .sum();
    Ok(ContractionProbe {
        distances,
        ratios,
        traces,
        final_y_rms_gap: (sq / count).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::intensity::IntensityModel;

    fn batch(m: usize, steps: usize, atoms: &[(f64, f64)]) -> NoiseBatch {
        let grid = make_grid(1.0, steps).unwrap();
        let model = IntensityModel::constant(1.0, 1.0).unwrap();
        let levy = LevyMeasure::from_pairs(atoms).unwrap();
        NoiseBatch::simulate(&model, &grid, &levy, m, 17).unwrap()
    }

    fn brownian_terminal() -> TerminalCondition {
        TerminalCondition::new(f64::INFINITY, "B_T", |_, s| s.d_b.iter().sum())
    }

    #[test]
    fn validation_examples() {
        let b = batch(50, 10, &[(1.0, 1.0)]);
        let zero = validate_standard_parameters(&Driver::zero(), &TerminalCondition::constant(0.0), &b)
            .unwrap();
        assert_eq!(zero.sampled_ratio, 0.0);
        let steep = Driver::new(1.0, "2y", |a| 2.0 * a.y);
        let err = validate_standard_parameters(&steep, &TerminalCondition::constant(0.0), &b);
        match err {
            Err(Error::Validation(v)) => assert!(v[0].contains("Lipschitz")),
            other => panic!("expected validation failure, got {other:?}"),
        }
        let edge = Driver::new(1.0, "y + φ(0)√λB", |a| a.y + a.phi[0] * a.lam_b.sqrt());
        let ok = validate_standard_parameters(&edge, &TerminalCondition::constant(0.0), &b).unwrap();
        assert!(ok.sampled_ratio <= 1.0 + 1e-12);
        let tight = TerminalCondition::constant(3.0).with_budget(1.0);
        assert!(validate_standard_parameters(&Driver::zero(), &tight, &b).is_err());
    }

    #[test]
    fn constant_terminal_value() {
        let b = batch(200, 8, &[(1.0, 1.0)]);
        let sol = solve_backward(
            &Driver::zero(),
            &TerminalCondition::constant(2.5),
            &b,
            &RegressionSpec::default(),
            1e-10,
            10,
        )
        .unwrap();
        for i in 0..=8 {
            let worst = sol.y_at(i).iter().map(|y| (y - 2.5).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-8, "step {i}: {worst:e} {:?}", sol.diagnostics);
        }
        for k in 0..200 {
            assert!(sol.phi(k).values().iter().all(|p| p.abs() < 1e-8));
        }
    }

    #[test]
    fn brownian_martingale_is_recovered() {
        let b = batch(2000, 10, &[(1.0, 1.0)]);
        let sol = solve_backward(
            &Driver::zero(),
            &brownian_terminal(),
            &b,
            &RegressionSpec::default(),
            1e-12,
            10,
        )
        .unwrap();
        let state = StateMatrix::noise(&b);
        for i in 0..10 {
            for k in 0..2000 {
                assert!((sol.y(k, i) - state.get(i, k)[0]).abs() < 1e-6);
                assert!((sol.phi(k).get(i, 0) - 1.0).abs() < 1e-6);
                assert!(sol.phi(k).get(i, 1).abs() < 1e-6);
            }
        }
        assert!(sol.reconstruction_mse(&b).unwrap() < 1e-10);
        assert_eq!(sol.y_at(10), &sol_terminal(&b)[..]);
    }

    fn sol_terminal(b: &NoiseBatch) -> Vec<f64> {
        brownian_terminal().evaluate(b)
    }

    #[test]
    fn covariation_estimator_is_close_on_brownian_terminal() {
        let b = batch(4000, 5, &[]);
        let spec = RegressionSpec::default().with_phi(PhiEstimator::Covariation);
        let sol = solve_backward(&Driver::zero(), &brownian_terminal(), &b, &spec, 1e-12, 10).unwrap();
        let mean_phi: f64 = (0..4000).map(|k| sol.phi(k).get(2, 0)).sum::<f64>() / 4000.0;
        assert!((mean_phi - 1.0).abs() < 0.1);
    }

    #[test]
    fn steep_driver_on_coarse_grid_is_rejected() {
        let b = batch(10, 2, &[(1.0, 1.0)]);
        let g = Driver::new(2.0, "2y", |a| 2.0 * a.y);
        let err = solve_backward(&g, &TerminalCondition::constant(1.0), &b, &RegressionSpec::default(), 1e-8, 5);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn convergence_failure_reports_trace() {
        let b = batch(100, 10, &[(1.0, 1.0)]);
        let g = Driver::new(0.5, "0.5 φ(0)", |a| 0.5 * a.phi[0]);
        let err = solve_backward(&g, &brownian_terminal(), &b, &RegressionSpec::default(), 1e-30, 2);
        match err {
            Err(Error::Convergence { trace, iterations, .. }) => {
                assert_eq!(iterations, 2);
                assert_eq!(trace.len(), 2);
            }
            other => panic!("expected convergence failure, got {other:?}"),
        }
    }

    #[test]
    fn zero_driver_probe_collapses_after_one_step() {
        let b = batch(200, 6, &[(1.0, 1.0)]);
        let settings = SolverSettings::new(RegressionSpec::default(), 1e-10, 10);
        let mut solver = BackwardSolver::new(&Driver::zero(), &brownian_terminal(), &b, settings).unwrap();
        let a = Iterate::zeros(6, 200, 1);
        let c = Iterate::constant(6, 200, 1, 3.0, -1.0);
        let probe = picard_contraction_probe(&mut solver, [a.clone(), c], 3, 0.0).unwrap();
        assert!(probe.distances.iter().all(|d| *d == 0.0));
        let same = picard_contraction_probe(&mut solver, [a.clone(), a], 3, 0.0).unwrap();
        assert!(same.distances.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn csv_and_diagnostics_layout() {
        let b = batch(3, 2, &[(1.0, 1.0)]);
        let sol = solve_backward(
            &Driver::zero(),
            &TerminalCondition::constant(1.0),
            &b,
            &RegressionSpec::default(),
            1e-10,
            5,
        )
        .unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("scenario_id,t,Y,phi_0,phi_z1\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 3);
        assert!(text.lines().nth(3).unwrap().ends_with(",,"));
        let mut diag = Vec::new();
        sol.write_diagnostics(&mut diag).unwrap();
        let first: serde_json::Value =
            serde_json::from_str(String::from_utf8(diag).unwrap().lines().next().unwrap()).unwrap();
        assert_eq!(first["iteration"], 1);
    }
}
