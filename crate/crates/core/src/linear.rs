//! Linear BSDEs
//! `−dY = [AY + C + E(0)φ(0)√λ^B + Σ_j E(z_j)φ(z_j)w_j√λ^H] dt − φ dμ`,
//! their stochastic-exponential representation and the comparison harness.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{solve_backward, BsdeSolution, Driver, DriverArgs, TerminalCondition};
use crate::error::{invalid, Error, Result};
use crate::levy::LevyMeasure;
use crate::noise::{NoiseBatch, NoiseScenario};
use crate::regression::{raw_features, PhiEstimator, Projector, RegressionSpec, StateMatrix};
use crate::stats::MeanAccumulator;

/// A coefficient process on the grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Constant(f64),
    /// One value per step, shared by all scenarios.
    Grid(Vec<f64>),
    /// `values[scenario][step]`.
    Full(Vec<Vec<f64>>),
}

impl Field {
    pub fn at(&self, scenario: usize, step: usize) -> f64 {
        match self {
            Field::Constant(v) => *v,
            Field::Grid(v) => v[step],
            Field::Full(v) => v[scenario][step],
        }
    }

    fn values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match self {
            Field::Constant(v) => Box::new(std::iter::once(*v)),
            Field::Grid(v) => Box::new(v.iter().copied()),
            Field::Full(v) => Box::new(v.iter().flatten().copied()),
        }
    }

    pub fn sup_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_shape(&self, steps: usize, scenarios: usize, name: &str) -> Result<()> {
        let ok = match self {
            Field::Constant(_) => true,
            Field::Grid(v) => v.len() == steps,
            Field::Full(v) => v.len() == scenarios && v.iter().all(|r| r.len() == steps),
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("coefficient {name} does not match the batch shape")))
        }
    }
}

/// `A`, `C` and `E` (slot 0 diffusion, slot `j+1` atom `j`).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCoefficients {
    pub a: Field,
    pub c: Field,
    pub e: Vec<Field>,
}

impl LinearCoefficients {
    pub fn constant(a: f64, c: f64, e: &[f64]) -> Self {
        Self {
            a: Field::Constant(a),
            c: Field::Constant(c),
            e: e.iter().map(|&v| Field::Constant(v)).collect(),
        }
    }

    fn e_at(&self, slot: usize, scenario: usize, step: usize) -> f64 {
        self.e[slot].at(scenario, step)
    }

    /// Checks shapes, boundedness and `0 ≤ E(z_j)` with `z_j > 0` wherever
    /// `E(z_j) ≠ 0`.
    pub fn validate(&self, batch: &NoiseBatch) -> Result<()> {
        let (n, m) = (batch.steps(), batch.len());
        if self.e.len() != batch.levy.len() + 1 {
            return Err(invalid(format!(
                "E needs {} slots, got {}",
                batch.levy.len() + 1,
                self.e.len()
            )));
        }
        self.a.check_shape(n, m, "A")?;
        self.c.check_shape(n, m, "C")?;
        for (s, e) in self.e.iter().enumerate() {
            e.check_shape(n, m, &format!("E[{s}]"))?;
        }
        let finite = |f: &Field| f.values().all(f64::is_finite);
        if !finite(&self.a) || !finite(&self.c) || !self.e.iter().all(finite) {
            return Err(invalid("linear coefficients must be finite"));
        }
        for (j, atom) in batch.levy.atoms().iter().enumerate() {
            for v in self.e[j + 1].values() {
                if v < 0.0 || (v > 0.0 && atom.size <= 0.0) {
                    return Err(Error::Domain(format!(
                        "E(z_{}) = {v} violates 0 ≤ E(z) < K_E·z at z = {}",
                        j + 1,
                        atom.size
                    )));
                }
            }
        }
        Ok(())
    }

    /// `max(sup|A|, sup|E(0)|, sup (Σ_j E(z_j)² w_j)^{1/2})`.
    pub fn lipschitz(&self, levy: &LevyMeasure) -> f64 {
        let jump = levy
            .atoms()
            .iter()
            .enumerate()
            .map(|(j, a)| self.e[j + 1].sup_abs().powi(2) * a.mass)
            .sum::<f64>()
            .sqrt();
        self.a.sup_abs().max(self.e[0].sup_abs()).max(jump)
    }

    /// The linear driver as a [`Driver`].
    pub fn driver(&self, levy: &LevyMeasure) -> Driver {
        let coef = Arc::new(self.clone());
        let masses: Vec<f64> = levy.masses().collect();
        let k = self.lipschitz(levy);
        Driver::new(k, "linear", move |a: &DriverArgs<'_>| {
            let (sc, st) = (a.scenario, a.step);
            let mut jump = 0.0;
            for (j, w) in masses.iter().enumerate() {
                jump += coef.e_at(j + 1, sc, st) * a.phi[j + 1] * w;
            }
            coef.a.at(sc, st) * a.y
                + coef.c.at(sc, st)
                + coef.e_at(0, sc, st) * a.phi[0] * a.lam_b.sqrt()
                + jump * a.lam_h.sqrt()
        })
    }
}

fn indicator_ratio(e: f64, lam: f64) -> f64 {
    if lam != 0.0 {
        e / lam.sqrt()
    } else {
        0.0
    }
}

/// `Γ_{t_i}` for `i = 0..=N` on one scenario (index `k` selects coefficient
/// rows), from the discrete exponent.
pub fn gamma_process(
    coef: &LinearCoefficients,
    s: &NoiseScenario,
    k: usize,
    levy: &LevyMeasure,
    grid_dt: &[f64],
) -> Result<Vec<f64>> {
    let n = s.steps();
    let p = &s.intensity;
    let mut out = Vec::with_capacity(n + 1);
    let mut log = 0.0;
    out.push(1.0);
    for i in 0..n {
        let (lb, lh) = (p.lam_b()[i], p.lam_h()[i]);
        let e0 = coef.e_at(0, k, i);
        let ind_b = if lb != 0.0 { 1.0 } else { 0.0 };
        log += (coef.a.at(k, i) - 0.5 * e0 * e0 * ind_b) * grid_dt[i];
        log += indicator_ratio(e0, lb) * s.d_b[i];
        for (j, atom) in levy.atoms().iter().enumerate() {
            let ej = indicator_ratio(coef.e_at(j + 1, k, i), lh);
            if ej == 0.0 {
                continue;
            }
            if 1.0 + ej <= 0.0 {
                return Err(Error::Domain(format!(
                    "1 + E(z_{})/√λ^H = {} ≤ 0 at step {i}",
                    j + 1,
                    1.0 + ej
                )));
            }
            let l = ej.ln_1p();
            log += (l - ej) * atom.mass * p.d_cum_h(i) + l * s.d_htilde(i, j);
        }
        out.push(log.exp());
    }
    Ok(out)
}

/// The Euler product `Γ_{i+1} = Γ_i (1 + AΔt + E(0)/√λ^B dB + Σ_j E(z_j)/√λ^H dH̃_j)`.
pub fn gamma_product_form(
    coef: &LinearCoefficients,
    s: &NoiseScenario,
    k: usize,
    levy: &LevyMeasure,
    grid_dt: &[f64],
) -> Vec<f64> {
    let p = &s.intensity;
    let mut out = vec![1.0];
    let mut g = 1.0;
    for i in 0..s.steps() {
        let mut f = 1.0 + coef.a.at(k, i) * grid_dt[i]
            + indicator_ratio(coef.e_at(0, k, i), p.lam_b()[i]) * s.d_b[i];
        for j in 0..levy.len() {
            f += indicator_ratio(coef.e_at(j + 1, k, i), p.lam_h()[i]) * s.d_htilde(i, j);
        }
        g *= f;
        out.push(g);
    }
    out
}

fn grid_dt(batch: &NoiseBatch) -> Vec<f64> {
    (0..batch.steps()).map(|i| batch.grid.dt(i)).collect()
}

/// `Γ` for every scenario, `[scenario][point]`.
pub fn gamma_batch(coef: &LinearCoefficients, batch: &NoiseBatch) -> Result<Vec<Vec<f64>>> {
    coef.validate(batch)?;
    let dt = grid_dt(batch);
    batch
        .scenarios
        .par_iter()
        .enumerate()
        .map(|(k, s)| gamma_process(coef, s, k, &batch.levy, &dt))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    /// Regress `ξΓ_T(t_i) + Σ_{s ≥ i} Γ_s(t_i)C_sΔt` at every step.
    FullPath,
    /// `Ỹ_i = C_iΔt + E[Γ_{i+1}(t_i) Ỹ_{i+1} | G_i]`.
    Recursive,
}

/// `Y` from the `Γ` representation, `[point][scenario]`.
pub fn linear_solution(
    coef: &LinearCoefficients,
    xi: &TerminalCondition,
    batch: &NoiseBatch,
    spec: &RegressionSpec,
    mode: OracleMode,
) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    if spec.uses_y_proxy() {
        return Err(invalid("the linear oracle has no Y-proxy"));
    }
    let gamma = gamma_batch(coef, batch)?;
    let xi_v = xi.evaluate(batch);
    let state = StateMatrix::noise(batch);
    let (n, m) = (batch.steps(), batch.len());
    let slots = batch.levy.len() + 1;
    let dt = grid_dt(batch);
    let mut y = vec![vec![0.0; m]; n + 1];
    y[n].clone_from(&xi_v);
    let mut carry = xi_v.clone();
    for i in (0..n).rev() {
        let (raw, d) = raw_features(batch, &state, None, i, spec)?;
        let incr: Vec<f64> = if spec.phi == PhiEstimator::Joint {
            normalized_increments(batch, i)
        } else {
            Vec::new()
        };
        let extra = (spec.phi == PhiEstimator::Joint).then_some((incr.as_slice(), slots));
        let proj = Projector::build(i, m, &raw, d, spec.degree, spec.ridge, extra)?;
        let target: Vec<f64> = match mode {
            OracleMode::FullPath => (0..m)
                .map(|k| {
                    let g = &gamma[k];
                    let running: f64 = (i..n).map(|s| g[s] * coef.c.at(k, s) * dt[s]).sum();
                    (xi_v[k] * g[n] + running) / g[i]
                })
                .collect(),
            OracleMode::Recursive => (0..m)
                .map(|k| gamma[k][i + 1] / gamma[k][i] * carry[k])
                .collect(),
        };
        let fit = proj.fit(&target);
        for k in 0..m {
            y[i][k] = match mode {
                OracleMode::FullPath => fit[k],
                OracleMode::Recursive => fit[k] + coef.c.at(k, i) * dt[i],
            };
        }
        carry.clone_from(&y[i]);
    }
    Ok(y)
}

fn normalized_increments(batch: &NoiseBatch, i: usize) -> Vec<f64> {
    let slots = batch.levy.len() + 1;
    let mut out = vec![0.0; batch.len() * slots];
    for (k, s) in batch.scenarios.iter().enumerate() {
        let p = &s.intensity;
        if p.d_cum_b(i) > 0.0 {
            out[k * slots] = s.d_b[i] / p.d_cum_b(i).sqrt();
        }
        for (j, a) in batch.levy.atoms().iter().enumerate() {
            let w = a.mass * p.d_cum_h(i);
            if w > 0.0 {
                out[k * slots + j + 1] = s.d_htilde(i, j) / w.sqrt();
            }
        }
    }
    out
}

/// Closed form for constant coefficients, deterministic constant intensity
/// and `ξ = a·B_T + b·η_T + c`:
/// `Y_t = e^{Aτ}(a(B_t + E(0)√λ^B τ) + b(η_t + Σ_j z_j E(z_j) w_j √λ^H τ) + c) + C(e^{Aτ} − 1)/A`.
pub fn affine_closed_form(
    coef: (f64, f64, &[f64]),
    terminal: (f64, f64, f64),
    lam: (f64, f64),
    levy: &LevyMeasure,
    tau: f64,
    b_t: f64,
    eta_t: f64,
) -> f64 {
    let (a_, c_, e) = coef;
    let (a, b, c) = terminal;
    let (lb, lh) = lam;
    let drift_eta: f64 = levy
        .atoms()
        .iter()
        .enumerate()
        .map(|(j, at)| at.size * e[j + 1] * at.mass)
        .sum::<f64>()
        * lh.sqrt();
    let growth = (a_ * tau).exp();
    let running = if a_ == 0.0 { c_ * tau } else { c_ * (growth - 1.0) / a_ };
    growth * (a * (b_t + e[0] * lb.sqrt() * tau) + b * (eta_t + drift_eta * tau) + c) + running
}

/// Batch mean and standard error of `Y_tΓ_t + Σ_{s<t} Γ_s C_s Δt` per point.
pub fn discounted_martingale(
    coef: &LinearCoefficients,
    y: &[Vec<f64>],
    batch: &NoiseBatch,
) -> Result<Vec<(f64, f64)>> {
    let gamma = gamma_batch(coef, batch)?;
    let dt = grid_dt(batch);
    let n = batch.steps();
    let mut out = Vec::with_capacity(n + 1);
    let mut running = vec![0.0; batch.len()];
    for i in 0..=n {
        let mut acc = MeanAccumulator::default();
        for k in 0..batch.len() {
            acc.push(y[i][k] * gamma[k][i] + running[k]);
        }
        out.push((acc.mean(), acc.se()));
        if i < n {
            for k in 0..batch.len() {
                running[k] += gamma[k][i] * coef.c.at(k, i) * dt[i];
            }
        }
    }
    Ok(out)
}

/// `g(y, φ) = f(y, φ(0)κ(0)√λ^B, Σ_j φ(z_j)κ(z_j)w_j√λ^H)`.
#[derive(Clone)]
pub struct StructuralDriver {
    pub f: Arc<dyn Fn(&DriverArgs<'_>, f64, f64, f64) -> f64 + Send + Sync>,
    /// `κ(0)` then `κ(z_j)`.
    pub kappa: Vec<f64>,
    /// Lipschitz constant of `f` in `(y, b, h)` under the sum norm.
    pub k_f: f64,
    pub description: String,
}

impl StructuralDriver {
    pub fn new<F>(kappa: Vec<f64>, k_f: f64, description: impl Into<String>, f: F) -> Self
    where
        F: Fn(&DriverArgs<'_>, f64, f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            f: Arc::new(f),
            kappa,
            k_f,
            description: description.into(),
        }
    }

    pub fn driver(&self, levy: &LevyMeasure) -> Driver {
        let kappa = self.kappa.clone();
        let masses: Vec<f64> = levy.masses().collect();
        let jump_norm = kappa
            .iter()
            .skip(1)
            .zip(&masses)
            .map(|(k, w)| k * k * w)
            .sum::<f64>()
            .sqrt();
        let k = self.k_f * 1f64.max(kappa[0].abs()).max(jump_norm);
        let f = Arc::clone(&self.f);
        Driver::new(k, self.description.clone(), move |a: &DriverArgs<'_>| {
            let b = a.phi[0] * kappa[0] * a.lam_b.sqrt();
            let h: f64 = masses
                .iter()
                .enumerate()
                .map(|(j, w)| a.phi[j + 1] * kappa[j + 1] * w)
                .sum::<f64>()
                * a.lam_h.sqrt();
            f(a, a.y, b, h)
        })
    }

    fn check(&self, levy: &LevyMeasure) -> Vec<String> {
        let mut issues = Vec::new();
        if self.kappa.len() != levy.len() + 1 {
            issues.push(format!(
                "κ needs {} slots, got {}",
                levy.len() + 1,
                self.kappa.len()
            ));
            return issues;
        }
        for (j, atom) in levy.atoms().iter().enumerate() {
            let kj = self.kappa[j + 1];
            if kj < 0.0 || (kj > 0.0 && atom.size <= 0.0) {
                issues.push(format!(
                    "κ(z_{}) = {kj} violates 0 ≤ κ(z) < K·z at z = {}",
                    j + 1,
                    atom.size
                ));
            }
        }
        issues
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub eps_tol: f64,
    /// Fraction of `(scenario, point)` with `Y¹ > Y² + ε`.
    pub violation_fraction: f64,
    /// `max (Y¹ − Y²)⁺`.
    pub max_exceedance: f64,
    pub min_gap: f64,
    pub mean_gap: f64,
    /// Preconditions found to fail; empty when all hold.
    pub precondition_violations: Vec<String>,
}

/// Solves both BSDEs and measures how often `Y¹ ≤ Y²` fails.
#[allow(clippy::too_many_arguments)]
pub fn comparison_harness(
    g1: &Driver,
    xi1: &TerminalCondition,
    g2: &StructuralDriver,
    xi2: &TerminalCondition,
    batch: &NoiseBatch,
    spec: &RegressionSpec,
    tol: f64,
    eps_tol: f64,
) -> Result<(ComparisonReport, BsdeSolution, BsdeSolution)> {
    let mut issues = g2.check(&batch.levy);
    let d2 = g2.driver(&batch.levy);
    let (x1, x2) = (xi1.evaluate(batch), xi2.evaluate(batch));
    let bad_terminal = x1.iter().zip(&x2).filter(|(a, b)| a > b).count();
    if bad_terminal > 0 {
        issues.push(format!("ξ¹ > ξ² on {bad_terminal} scenarios"));
    }
    let s1 = solve_backward(g1, xi1, batch, spec, tol, 100)?;
    let s2 = solve_backward(&d2, xi2, batch, spec, tol, 100)?;
    let mut bad_driver = 0usize;
    for (k, s) in batch.scenarios.iter().enumerate() {
        let phi = s1.phi(k);
        for i in 0..batch.steps() {
            let args = DriverArgs {
                scenario: k,
                step: i,
                t: batch.grid.time(i),
                lam_b: s.intensity.lam_b()[i],
                lam_h: s.intensity.lam_h()[i],
                y: s1.y(k, i),
                phi: phi.row(i),
            };
            if g1.evaluate(&args) > d2.evaluate(&args) + 1e-12 {
                bad_driver += 1;
            }
        }
    }
    if bad_driver > 0 {
        issues.push(format!("g¹ > g² along (Y¹, φ¹) at {bad_driver} cells"));
    }
    let mut violations = 0usize;
    let mut max_exc: f64 = 0.0;
    let mut gaps = MeanAccumulator::default();
    let mut min_gap = f64::INFINITY;
    for i in 0..=batch.steps() {
        for k in 0..batch.len() {
            let gap = s2.y(k, i) - s1.y(k, i);
            if -gap > eps_tol {
                violations += 1;
            }
            max_exc = max_exc.max(-gap);
            min_gap = min_gap.min(gap);
            gaps.push(gap);
        }
    }
    let total = ((batch.steps() + 1) * batch.len()) as f64;
    Ok((
        ComparisonReport {
            eps_tol,
            violation_fraction: violations as f64 / total,
            max_exceedance: max_exc,
            min_gap,
            mean_gap: gaps.mean(),
            precondition_violations: issues,
        },
        s1,
        s2,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::intensity::IntensityModel;

    fn batch(lam: (f64, f64), atoms: &[(f64, f64)], m: usize, n: usize) -> NoiseBatch {
        let grid = make_grid(1.0, n).unwrap();
        let model = IntensityModel::constant(lam.0, lam.1).unwrap();
        let levy = LevyMeasure::from_pairs(atoms).unwrap();
        NoiseBatch::simulate(&model, &grid, &levy, m, 23).unwrap()
    }

    #[test]
    fn deterministic_exponential() {
        let b = batch((1.0, 0.0), &[], 3, 10);
        let coef = LinearCoefficients::constant(0.7, 0.0, &[0.0]);
        let g = gamma_batch(&coef, &b).unwrap();
        for (i, v) in g[0].iter().enumerate() {
            assert!((v - (0.7 * i as f64 / 10.0).exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn brownian_doleans_exponential() {
        let b = batch((1.0, 0.0), &[], 5, 10);
        let coef = LinearCoefficients::constant(0.0, 0.0, &[0.3]);
        let g = gamma_batch(&coef, &b).unwrap();
        for (k, s) in b.scenarios.iter().enumerate() {
            let bt: f64 = s.d_b.iter().sum();
            let expect = (-0.5 * 0.09 + 0.3 * bt).exp();
            assert!((g[k][10] - expect).abs() < 1e-12 * expect);
        }
    }

    #[test]
    fn jump_exponent_closed_form() {
        let b = batch((0.0, 1.0), &[(1.0, 1.0)], 20, 10);
        let coef = LinearCoefficients::constant(0.0, 0.0, &[0.0, 0.5]);
        let g = gamma_batch(&coef, &b).unwrap();
        for (k, s) in b.scenarios.iter().enumerate() {
            let cum = s.intensity.cum_h()[10];
            let htilde: f64 = (0..10).map(|i| s.d_htilde(i, 0)).sum();
            let expect = ((1.5f64.ln() - 0.5) * cum + 1.5f64.ln() * htilde).exp();
            assert!((g[k][10] - expect).abs() < 1e-12 * expect);
        }
    }

    #[test]
    fn product_form_converges_to_exponential() {
        let gap = |n: usize| {
            let b = batch((0.0, 1.0), &[(1.0, 1.0)], 400, n);
            let coef = LinearCoefficients::constant(0.0, 0.0, &[0.0, 0.5]);
            let dt = grid_dt(&b);
            let mut acc = 0.0;
            for (k, s) in b.scenarios.iter().enumerate() {
                let e = gamma_process(&coef, s, k, &b.levy, &dt).unwrap()[n];
                let p = gamma_product_form(&coef, s, k, &b.levy, &dt)[n];
                acc += ((e - p) / e).powi(2);
            }
            (acc / 400.0).sqrt()
        };
        let (g20, g80) = (gap(20), gap(80));
        assert!(g80 < 0.7 * g20, "{g20} {g80}");
    }

    #[test]
    fn positivity_violation_is_a_domain_error() {
        let b = batch((1.0, 1.0), &[(1.0, 1.0)], 2, 4);
        let coef = LinearCoefficients::constant(0.0, 0.0, &[0.0, 0.5]);
        let dt = grid_dt(&b);
        let mut bad = coef.clone();
        bad.e[1] = Field::Constant(-2.0);
        assert!(matches!(
            gamma_process(&bad, &b.scenarios[0], 0, &b.levy, &dt),
            Err(Error::Domain(_))
        ));
        assert!(matches!(bad.validate(&b), Err(Error::Domain(_))));
    }

    #[test]
    fn trivial_linear_solutions() {
        let b = batch((1.0, 1.0), &[(1.0, 1.0)], 300, 10);
        let spec = RegressionSpec::default();
        let grow = LinearCoefficients::constant(0.4, 0.0, &[0.0, 0.0]);
        for mode in [OracleMode::FullPath, OracleMode::Recursive] {
            let y = linear_solution(&grow, &TerminalCondition::constant(1.0), &b, &spec, mode).unwrap();
            for i in 0..=10 {
                let expect = (0.4 * (1.0 - i as f64 / 10.0)).exp();
                assert!(y[i].iter().all(|v| (v - expect).abs() < 1e-9));
            }
        }
        let run = LinearCoefficients::constant(0.0, 0.3, &[0.0, 0.0]);
        let y = linear_solution(&run, &TerminalCondition::constant(0.0), &b, &spec, OracleMode::FullPath)
            .unwrap();
        for i in 0..=10 {
            let expect = 0.3 * (1.0 - i as f64 / 10.0);
            assert!(y[i].iter().all(|v| (v - expect).abs() < 1e-9));
        }
    }

    #[test]
    fn closed_form_matches_oracle_and_solver() {
        let n = 40;
        let b = batch((1.0, 1.0), &[(1.0, 1.0)], 4000, n);
        let e = [0.2, 0.4];
        let coef = LinearCoefficients::constant(0.3, 0.1, &e);
        let xi = TerminalCondition::new(f64::INFINITY, "affine", |_, s| {
            let bt: f64 = s.d_b.iter().sum();
            let eta: f64 = (0..s.steps()).map(|i| s.d_htilde(i, 0)).sum();
            bt + 0.5 * eta + 1.0
        });
        let spec = RegressionSpec::default();
        let oracle = linear_solution(&coef, &xi, &b, &spec, OracleMode::Recursive).unwrap();
        let sol = solve_backward(&coef.driver(&b.levy), &xi, &b, &spec, 1e-14, 50).unwrap();
        let state = StateMatrix::noise(&b);
        let mut sq_oracle = 0.0;
        let mut sq_solver = 0.0;
        let mut sq_gap = 0.0;
        for i in 0..=n {
            let tau = 1.0 - i as f64 / n as f64;
            for k in 0..b.len() {
                let st = state.get(i, k);
                let exact = affine_closed_form(
                    (0.3, 0.1, &e),
                    (1.0, 0.5, 1.0),
                    (1.0, 1.0),
                    &b.levy,
                    tau,
                    st[0],
                    st[1],
                );
                let rel = |v: f64| ((v - exact) / (1.0 + exact.abs())).powi(2);
                sq_oracle += rel(oracle[i][k]);
                sq_solver += rel(sol.y(k, i));
                sq_gap += ((sol.y(k, i) - oracle[i][k]) / (1.0 + oracle[i][k].abs())).powi(2);
            }
        }
        let cells = ((n + 1) * b.len()) as f64;
        let (ro, rs, rg) = ((sq_oracle / cells).sqrt(), (sq_solver / cells).sqrt(), (sq_gap / cells).sqrt());
        assert!(ro < 0.02 && rs < 0.02 && rg < 0.02, "oracle {ro} solver {rs} gap {rg}");
    }

    #[test]
    fn discounted_process_is_a_martingale() {
        let b = batch((1.0, 1.0), &[(1.0, 1.0)], 4000, 20);
        let coef = LinearCoefficients::constant(0.3, 0.1, &[0.2, 0.4]);
        let xi = TerminalCondition::new(f64::INFINITY, "B_T", |_, s| s.d_b.iter().sum());
        let y = linear_solution(&coef, &xi, &b, &RegressionSpec::default(), OracleMode::Recursive)
            .unwrap();
        let mart = discounted_martingale(&coef, &y, &b).unwrap();
        let (end, se_end) = mart[20];
        for (mean, se) in &mart {
            assert!((mean - end).abs() <= 3.0 * (se * se + se_end * se_end).sqrt() + 1e-3);
        }
    }

    #[test]
    fn comparison_identical_and_shifted() {
        let b = batch((1.0, 1.0), &[(1.0, 1.0)], 1000, 10);
        let spec = RegressionSpec::default();
        let xi = TerminalCondition::new(f64::INFINITY, "B_T", |_, s| s.d_b.iter().sum());
        let shifted = TerminalCondition::new(f64::INFINITY, "B_T + 1", |_, s| {
            s.d_b.iter().sum::<f64>() + 1.0
        });
        let g2 = StructuralDriver::new(vec![0.2, 0.4], 1.0, "0.3y + b + h", |_, y, b, h| 0.3 * y + b + h);
        let g1 = g2.driver(&b.levy);
        let (same, _, _) = comparison_harness(&g1, &xi, &g2, &xi, &b, &spec, 1e-14, 1e-9).unwrap();
        assert_eq!(same.violation_fraction, 0.0);
        assert!(same.precondition_violations.is_empty());
        let (up, _, _) = comparison_harness(&g1, &xi, &g2, &shifted, &b, &spec, 1e-14, 1e-9).unwrap();
        assert_eq!(up.violation_fraction, 0.0);
        assert!(up.min_gap > 0.9);
        let (rev, _, _) = comparison_harness(&g1, &shifted, &g2, &xi, &b, &spec, 1e-14, 1e-9).unwrap();
        assert!(!rev.precondition_violations.is_empty());
        assert!(rev.violation_fraction > 0.9);
    }
}
