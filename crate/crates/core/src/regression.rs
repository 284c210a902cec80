//! Least-squares conditional expectations on polynomial features.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::noise::NoiseBatch;
use crate::stats::ordered_vec_sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    /// Every coordinate of the supplied [`StateMatrix`].
    State,
    /// The previous Picard iterate of `Y` at the same step.
    YProxy,
    LamB,
    LamH,
    /// `∫_t^T λ^B ds`.
    TailB,
    /// `∫_t^T λ^H ds`.
    TailH,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filtration {
    /// Noise prefix plus the whole intensity path.
    G,
    /// Noise prefix only.
    F,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiEstimator {
    /// Regress `Y_{i+1}·dB_i / ΔΛ^B_i` (and the jump analogues) on the basis.
    Covariation,
    /// Regress `Y_{i+1}` jointly on the basis and the basis times normalized
    /// noise increments; the increment coefficients are `φ`.
    Joint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSpec {
    pub features: Vec<Feature>,
    pub degree: usize,
    /// `λ` in `Σ residual² + λ|β|²` over standardized features.
    pub ridge: f64,
    pub filtration: Filtration,
    pub phi: PhiEstimator,
}

impl RegressionSpec {
    pub fn for_filtration(filtration: Filtration) -> Self {
        let mut features = vec![Feature::State, Feature::LamB, Feature::LamH];
        if filtration == Filtration::G {
            features.extend([Feature::TailB, Feature::TailH]);
        }
        Self {
            features,
            degree: 2,
            ridge: 1e-8,
            filtration,
            phi: PhiEstimator::Joint,
        }
    }

    pub fn with_phi(mut self, phi: PhiEstimator) -> Self {
        self.phi = phi;
        self
    }

    pub fn with_degree(mut self, degree: usize) -> Self {
        self.degree = degree;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(invalid("ridge must be finite and nonnegative"));
        }
        let tails = [Feature::TailB, Feature::TailH];
        match self.filtration {
            Filtration::G if !tails.iter().all(|f| self.features.contains(f)) => Err(invalid(
                "filtration G needs both tail-integral features",
            )),
            Filtration::F if tails.iter().any(|f| self.features.contains(f)) => Err(invalid(
                "filtration F cannot see tail integrals of the intensity",
            )),
            _ => Ok(()),
        }
    }

    pub fn uses_y_proxy(&self) -> bool {
        self.features.contains(&Feature::YProxy)
    }
}

impl Default for RegressionSpec {
    fn default() -> Self {
        Self::for_filtration(Filtration::G)
    }
}

/// Per-scenario state coordinates at every grid point, laid out
/// `[point][scenario][coordinate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrix {
    points: usize,
    scenarios: usize,
    dim: usize,
    values: Vec<f64>,
}

impl StateMatrix {
    pub fn from_fn<F>(points: usize, scenarios: usize, dim: usize, f: F) -> Self
    where
        F: Fn(usize, &mut [f64]) + Sync,
    {
        // f(scenario, out) fills out[point * dim + c].
        let rows: Vec<Vec<f64>> = (0..scenarios)
            .into_par_iter()
            .map(|k| {
                let mut row = vec![0.0; points * dim];
                f(k, &mut row);
                row
            })
            .collect();
        let mut values = vec![0.0; points * scenarios * dim];
        for (k, row) in rows.iter().enumerate() {
            for p in 0..points {
                let dst = (p * scenarios + k) * dim;
                values[dst..dst + dim].copy_from_slice(&row[p * dim..(p + 1) * dim]);
            }
        }
        Self {
            points,
            scenarios,
            dim,
            values,
        }
    }

    /// `B_t` and the compensated count of each atom.
    pub fn noise(batch: &NoiseBatch) -> Self {
        let n = batch.steps();
        let dim = 1 + batch.levy.len();
        Self::from_fn(n + 1, batch.len(), dim, |k, row| {
            let s = &batch.scenarios[k];
            for i in 0..n {
                for c in 0..dim {
                    row[(i + 1) * dim + c] = row[i * dim + c] + s.mu(i, c);
                }
            }
        })
    }

    /// A single coordinate given per `[scenario][point]`.
    pub fn from_paths(paths: &[Vec<f64>]) -> Self {
        let points = paths.first().map_or(0, Vec::len);
        Self::from_fn(points, paths.len(), 1, |k, row| row.copy_from_slice(&paths[k]))
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn scenarios(&self) -> usize {
        self.scenarios
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, point: usize, scenario: usize) -> &[f64] {
        let at = (point * self.scenarios + scenario) * self.dim;
        &self.values[at..at + self.dim]
    }
}

/// Raw feature matrix (`scenarios × d`, row-major) at grid point `step`.
pub fn raw_features(
    batch: &NoiseBatch,
    state: &StateMatrix,
    y_proxy: Option<&[f64]>,
    step: usize,
    spec: &RegressionSpec,
) -> Result<(Vec<f64>, usize)> {
    if state.scenarios() != batch.len() || state.points() != batch.steps() + 1 {
        return Err(invalid("state matrix does not match the batch"));
    }
    let mut d = 0;
    for f in &spec.features {
        d += match f {
            Feature::State => state.dim(),
            Feature::YProxy if y_proxy.is_none() => {
                return Err(invalid("Y-proxy feature requested without a proxy"))
            }
            _ => 1,
        };
    }
    let mut out = Vec::with_capacity(batch.len() * d);
    for (k, s) in batch.scenarios.iter().enumerate() {
        let p = &s.intensity;
        for f in &spec.features {
            match f {
                Feature::State => out.extend_from_slice(state.get(step, k)),
                Feature::YProxy => out.push(y_proxy.map_or(0.0, |y| y[k])),
                Feature::LamB => out.push(p.lam_b()[step]),
                Feature::LamH => out.push(p.lam_h()[step]),
                Feature::TailB => out.push(p.cum_b()[p.steps()] - p.cum_b()[step]),
                Feature::TailH => out.push(p.cum_h()[p.steps()] - p.cum_h()[step]),
            }
        }
    }
    Ok((out, d))
}

/// Exponent vectors of all monomials of total degree at most `degree` in
/// `d` variables, constant first.
pub fn monomials(d: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; d]];
    let mut frontier = vec![(vec![0; d], 0usize)];
    for _ in 0..degree {
        let mut next = Vec::new();
        for (e, first) in &frontier {
            for v in *first..d {
                let mut e2 = e.clone();
                e2[v] += 1;
                out.push(e2.clone());
                next.push((e2, v));
            }
        }
        frontier = next;
    }
    out
}

/// A cached least-squares projector for one grid step.
///
/// The design has `blocks` groups of columns; group `b` is the polynomial
/// basis times a per-scenario multiplier (group 0 uses multiplier 1). The
/// ridge penalty skips the intercept.
#[derive(Debug, Clone)]
pub struct Projector {
    step: usize,
    m: usize,
    k: usize,
    blocks: usize,
    basis: Vec<f64>,
    multipliers: Vec<f64>,
    active: Vec<bool>,
    chol: Cholesky<f64, Dyn>,
    ridge: f64,
    condition: f64,
}

impl Projector {
    /// Builds the basis from raw features (`m × d`). `multipliers` holds the
    /// extra blocks as `m × (blocks − 1)`.
    pub fn build(
        step: usize,
        m: usize,
        raw: &[f64],
        d: usize,
        degree: usize,
        ridge: f64,
        multipliers: Option<(&[f64], usize)>,
    ) -> Result<Self> {
        if m == 0 || raw.len() != m * d {
            return Err(invalid("regression needs one feature row per scenario"));
        }
        let basis = polynomial_basis(raw, m, d, degree);
        let k = basis.len() / m;
        let extra = multipliers.map_or(0, |(_, e)| e);
        let blocks = 1 + extra;
        let mut mult = vec![1.0; m * blocks];
        let mut active = vec![true; blocks];
        if let Some((mu, e)) = multipliers {
            for b in 0..e {
                let mut any = false;
                for r in 0..m {
                    let v = mu[r * e + b];
                    mult[r * blocks + b + 1] = v;
                    any |= v != 0.0;
                }
                active[b + 1] = any;
            }
        }
        let cols: Vec<usize> = (0..blocks)
            .filter(|&b| active[b])
            .flat_map(|b| (0..k).map(move |c| b * k + c))
            .collect();
        let p = cols.len();
        let mut proj = Self {
            step,
            m,
            k,
            blocks,
            basis,
            multipliers: mult,
            active,
            chol: Cholesky::new(DMatrix::identity(1, 1)).expect("identity"),
            ridge,
            condition: 1.0,
        };
        let gram_flat = ordered_vec_sum(m, p * p, |r, acc| {
            let row = proj.active_row(r);
            for a in 0..p {
                let xa = row[a];
                if xa == 0.0 {
                    continue;
                }
                for b in a..p {
                    acc[a * p + b] += xa * row[b];
                }
            }
        });
        let mut gram = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in a..p {
                let v = gram_flat[a * p + b] / m as f64;
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
            if a > 0 || !proj.active[0] {
                gram[(a, a)] += ridge;
            }
        }
        let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
        let max = eig.iter().cloned().fold(f64::MIN, f64::max);
        let min = eig.iter().cloned().fold(f64::MAX, f64::min);
        proj.condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if ridge == 0.0 && proj.condition > 1e12 {
            return Err(Error::Numerical(format!(
                "rank-deficient regression at step {step} (condition number {:.3e})",
                proj.condition
            )));
        }
        proj.chol = Cholesky::new(gram).ok_or_else(|| {
            Error::Numerical(format!("rank-deficient regression at step {step}"))
        })?;
        Ok(proj)
    }

    fn normal_rhs(&self, values: &[f64]) -> DVector<f64> {
        let p = self.active.iter().filter(|a| **a).count() * self.k;
        let rhs = ordered_vec_sum(self.m, p, |r, acc| {
            let v = values[r];
            if v == 0.0 {
                return;
            }
            for (a, x) in self.active_row(r).iter().enumerate() {
                acc[a] += x * v;
            }
        });
        DVector::from_iterator(p, rhs.into_iter().map(|x| x / self.m as f64))
    }

    fn active_row(&self, r: usize) -> Vec<f64> {
        let base = &self.basis[r * self.k..(r + 1) * self.k];
        let mut row = Vec::with_capacity(self.k * self.blocks);
        for b in 0..self.blocks {
            if !self.active[b] {
                continue;
            }
            let mu = self.multipliers[r * self.blocks + b];
            row.extend(base.iter().map(|x| x * mu));
        }
        row
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn condition_number(&self) -> f64 {
        self.condition
    }

    pub fn basis_size(&self) -> usize {
        self.k
    }

    /// Fitted coefficients per block; inactive blocks are all zero.
    pub fn coefficients(&self, values: &[f64]) -> Vec<Vec<f64>> {
        assert_eq!(values.len(), self.m, "one regressand value per scenario");
        let p = self.active.iter().filter(|a| **a).count() * self.k;
        // Centering keeps the unpenalized intercept out of the solve, so
        // constant regressands are reproduced exactly.
        let centre = crate::stats::ordered_sum(self.m, |r| values[r]) / self.m as f64;
        let centred: Vec<f64> = values.iter().map(|v| v - centre).collect();
        let mut beta = self.chol.solve(&self.normal_rhs(&centred));
        // Near-collinear columns (counts with few distinct values) lose
        // digits in the normal equations; refine against the data residual.
        for _ in 0..3 {
            let resid: Vec<f64> = (0..self.m)
                .map(|r| {
                    let fit: f64 = self
                        .active_row(r)
                        .iter()
                        .zip(beta.iter())
                        .map(|(x, b)| x * b)
                        .sum();
                    centred[r] - fit
                })
                .collect();
            let mut g = self.normal_rhs(&resid);
            for a in 0..p {
                if a > 0 || !self.active[0] {
                    g[a] -= self.ridge * beta[a];
                }
            }
            let delta = self.chol.solve(&g);
            let small = delta.amax() <= 1e-15 * beta.amax().max(1e-300);
            beta += delta;
            if small {
                break;
            }
        }
        let mut out = vec![vec![0.0; self.k]; self.blocks];
        let mut at = 0;
        for (b, coef) in out.iter_mut().enumerate() {
            if self.active[b] {
                coef.copy_from_slice(&beta.as_slice()[at..at + self.k]);
                at += self.k;
            }
        }
        out[0][0] += centre;
        out
    }

    /// `basis(x_r)·β` for one block's coefficients.
    pub fn evaluate(&self, coef: &[f64]) -> Vec<f64> {
        (0..self.m)
            .map(|r| {
                self.basis[r * self.k..(r + 1) * self.k]
                    .iter()
                    .zip(coef)
                    .map(|(x, c)| x * c)
                    .sum()
            })
            .collect()
    }

    /// Fitted conditional mean (block 0 only).
    pub fn fit(&self, values: &[f64]) -> Vec<f64> {
        let coef = self.coefficients(values);
        self.evaluate(&coef[0])
    }

    /// Fitted value of each block.
    pub fn fit_blocks(&self, values: &[f64]) -> Vec<Vec<f64>> {
        self.coefficients(values)
            .iter()
            .map(|c| self.evaluate(c))
            .collect()
    }
}

/// Standardizes columns, drops constant ones and expands monomials.
fn polynomial_basis(raw: &[f64], m: usize, d: usize, degree: usize) -> Vec<f64> {
    let mut keep = Vec::new();
    let mut centre = Vec::new();
    let mut scale = Vec::new();
    for c in 0..d {
        let mean = (0..m).map(|r| raw[r * d + c]).sum::<f64>() / m as f64;
        let var = (0..m).map(|r| (raw[r * d + c] - mean).powi(2)).sum::<f64>() / m as f64;
        let sd = var.sqrt();
        if sd > 1e-10 * mean.abs().max(1.0) {
            keep.push(c);
            centre.push(mean);
            scale.push(sd);
        }
    }
    let exps = monomials(keep.len(), degree);
    let k = exps.len();
    let mut out = vec![0.0; m * k];
    let mut z = vec![0.0; keep.len()];
    for r in 0..m {
        for (v, &c) in keep.iter().enumerate() {
            z[v] = (raw[r * d + c] - centre[v]) / scale[v];
        }
        for (q, e) in exps.iter().enumerate() {
            out[r * k + q] = e
                .iter()
                .zip(&z)
                .map(|(&p, &x)| x.powi(p as i32))
                .product();
        }
    }
    out
}

/// `E[values | info at step]` under `spec`, one fitted value per scenario.
pub fn conditional_expectation(
    values: &[f64],
    step: usize,
    spec: &RegressionSpec,
    batch: &NoiseBatch,
    state: &StateMatrix,
) -> Result<Vec<f64>> {
    spec.validate()?;
    if values.len() != batch.len() {
        return Err(invalid("one value per scenario required"));
    }
    if spec.uses_y_proxy() {
        return Err(invalid("Y-proxy features are only available inside the solver"));
    }
    let (raw, d) = raw_features(batch, state, None, step, spec)?;
    let proj = Projector::build(step, batch.len(), &raw, d, spec.degree, spec.ridge, None)?;
    Ok(proj.fit(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::intensity::IntensityModel;
    use crate::levy::LevyMeasure;

    fn batch(m: usize) -> NoiseBatch {
        let grid = make_grid(1.0, 10).unwrap();
        let model = IntensityModel::constant(1.0, 1.0).unwrap();
        let levy = LevyMeasure::from_pairs(&[(1.0, 1.0)]).unwrap();
        NoiseBatch::simulate(&model, &grid, &levy, m, 3).unwrap()
    }

    #[test]
    fn monomial_count() {
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(0, 2).len(), 1);
        assert_eq!(monomials(3, 0).len(), 1);
        assert_eq!(monomials(6, 2).len(), 28);
    }

    #[test]
    fn constants_project_to_themselves() {
        let b = batch(500);
        let state = StateMatrix::noise(&b);
        let fit = conditional_expectation(&vec![7.0; 500], 5, &RegressionSpec::default(), &b, &state)
            .unwrap();
        assert!(fit.iter().all(|v| (v - 7.0).abs() < 1e-6));
    }

    #[test]
    fn features_in_span_are_reproduced() {
        let b = batch(500);
        let state = StateMatrix::noise(&b);
        let x: Vec<f64> = (0..500).map(|k| state.get(5, k)[0]).collect();
        let spec = RegressionSpec {
            ridge: 0.0,
            ..RegressionSpec::default()
        };
        let fit = conditional_expectation(&x, 5, &spec, &b, &state).unwrap();
        for (f, v) in fit.iter().zip(&x) {
            assert!((f - v).abs() < 1e-9);
        }
    }

    #[test]
    fn filtration_feature_rules() {
        let mut g = RegressionSpec::default();
        g.features.retain(|f| *f != Feature::TailB);
        assert!(g.validate().is_err());
        let mut f = RegressionSpec::for_filtration(Filtration::F);
        assert!(f.validate().is_ok());
        f.features.push(Feature::TailH);
        assert!(f.validate().is_err());
    }

    #[test]
    fn duplicated_feature_without_ridge_is_rank_deficient() {
        let b = batch(200);
        let state = StateMatrix::from_fn(11, 200, 2, |k, row| {
            for p in 0..11 {
                let v = (k as f64 * 0.37 + p as f64).sin();
                row[p * 2] = v;
                row[p * 2 + 1] = 2.0 * v;
            }
        });
        let spec = RegressionSpec {
            ridge: 0.0,
            degree: 1,
            ..RegressionSpec::default()
        };
        let err = conditional_expectation(&vec![1.0; 200], 4, &spec, &b, &state).unwrap_err();
        assert!(err.to_string().contains("step 4"));
    }

    #[test]
    fn joint_blocks_recover_affine_increment_coefficients() {
        let b = batch(2000);
        let state = StateMatrix::noise(&b);
        let i = 4;
        let (raw, d) = raw_features(&b, &state, None, i, &RegressionSpec::default()).unwrap();
        let mult: Vec<f64> = b.scenarios.iter().map(|s| s.d_b[i]).collect();
        let proj = Projector::build(i, 2000, &raw, d, 2, 0.0, Some((&mult, 1))).unwrap();
        let y: Vec<f64> = (0..2000)
            .map(|k| {
                let x = state.get(i, k)[0];
                1.0 + x + (0.5 + 2.0 * x) * mult[k]
            })
            .collect();
        let parts = proj.fit_blocks(&y);
        for k in 0..2000 {
            let x = state.get(i, k)[0];
            assert!((parts[0][k] - (1.0 + x)).abs() < 1e-8);
            assert!((parts[1][k] - (0.5 + 2.0 * x)).abs() < 1e-8);
        }
    }
}
