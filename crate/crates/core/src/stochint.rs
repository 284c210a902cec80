//! Non-anticipating integration against `μ = B + H̃` on the grid.

use crate::error::{invalid, Result};
use crate::intensity::IntensityPath;
use crate::levy::LevyMeasure;
use crate::noise::{NoiseBatch, NoiseScenario};
use crate::stats::{ordered_sum, MeanAccumulator};

/// `φ_{t_i}(0)` and `φ_{t_i}(z_j)` stored row-major as `[step][slot]`, slot 0
/// being the diffusion slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Integrand {
    steps: usize,
    slots: usize,
    values: Vec<f64>,
}

impl Integrand {
    pub fn zeros(steps: usize, atoms: usize) -> Self {
        Self {
            steps,
            slots: atoms + 1,
            values: vec![0.0; steps * (atoms + 1)],
        }
    }

    pub fn from_values(steps: usize, atoms: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != steps * (atoms + 1) {
            return Err(invalid(format!(
                "integrand needs {} values, got {}",
                steps * (atoms + 1),
                values.len()
            )));
        }
        Ok(Self {
            steps,
            slots: atoms + 1,
            values,
        })
    }

    /// Same value in every cell of each slot.
    pub fn constant(steps: usize, slot_values: &[f64]) -> Self {
        let slots = slot_values.len().max(1);
        let mut values = Vec::with_capacity(steps * slots);
        for _ in 0..steps {
            values.extend_from_slice(slot_values);
        }
        Self {
            steps,
            slots,
            values,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn atoms(&self) -> usize {
        self.slots - 1
    }

    pub fn get(&self, step: usize, slot: usize) -> f64 {
        self.values[step * self.slots + slot]
    }

    pub fn set(&mut self, step: usize, slot: usize, v: f64) {
        self.values[step * self.slots + slot] = v;
    }

    /// `φ_{t_i}` across all slots.
    pub fn row(&self, step: usize) -> &[f64] {
        &self.values[step * self.slots..(step + 1) * self.slots]
    }

    pub fn row_mut(&mut self, step: usize) -> &mut [f64] {
        &mut self.values[step * self.slots..(step + 1) * self.slots]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            steps: self.steps,
            slots: self.slots,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `aφ + bψ`.
    pub fn combine(&self, a: f64, other: &Integrand, b: f64) -> Result<Self> {
        self.check_shape(other.steps, other.atoms())?;
        Ok(Self {
            steps: self.steps,
            slots: self.slots,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    fn check_shape(&self, steps: usize, atoms: usize) -> Result<()> {
        if self.steps != steps || self.atoms() != atoms {
            return Err(invalid(format!(
                "integrand shape {}x{} does not match {}x{}",
                self.steps,
                self.atoms(),
                steps,
                atoms
            )));
        }
        Ok(())
    }
}

/// `Σ_i φ_i(0) dB_i + Σ_i Σ_j φ_i(z_j) dH̃_ij`.
pub fn integrate(phi: &Integrand, s: &NoiseScenario) -> Result<f64> {
    phi.check_shape(s.steps(), s.atoms())?;
    let mut total = 0.0;
    for i in 0..phi.steps() {
        let row = phi.row(i);
        total += row[0] * s.d_b[i];
        for j in 0..phi.atoms() {
            total += row[j + 1] * s.d_htilde(i, j);
        }
    }
    Ok(total)
}

/// `Σ_i (φ_i(0)² ΔΛ^B_i + Σ_j φ_i(z_j)² w_j ΔΛ̂^H_i)`.
pub fn i_norm_squared(phi: &Integrand, path: &IntensityPath, levy: &LevyMeasure) -> Result<f64> {
    phi.check_shape(path.steps(), levy.len())?;
    let mut total = 0.0;
    for i in 0..phi.steps() {
        let row = phi.row(i);
        let mut jump = 0.0;
        for (j, a) in levy.atoms().iter().enumerate() {
            jump += row[j + 1] * row[j + 1] * a.mass;
        }
        total += row[0] * row[0] * path.d_cum_b(i) + jump * path.d_cum_h(i);
    }
    Ok(total)
}

/// What a predictable integrand builder may look at when producing
/// `φ_{t_i}`: the full intensity path (it is `G_0`-measurable) and the noise
/// strictly before step `i`.
pub struct PrefixView<'a> {
    scenario: &'a NoiseScenario,
    step: usize,
}

impl<'a> PrefixView<'a> {
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn intensity(&self) -> &IntensityPath {
        &self.scenario.intensity
    }

    pub fn d_b(&self) -> &[f64] {
        &self.scenario.d_b[..self.step]
    }

    pub fn d_htilde(&self, step: usize, atom: usize) -> f64 {
        assert!(step < self.step, "noise at step {step} is not yet revealed");
        self.scenario.d_htilde(step, atom)
    }

    /// `B_{t_i}`.
    pub fn brownian(&self) -> f64 {
        self.d_b().iter().sum()
    }
}

/// Builds `φ` row by row; the callback sees only the prefix up to `t_i`.
pub fn build_predictable<F>(s: &NoiseScenario, mut f: F) -> Integrand
where
    F: FnMut(&PrefixView<'_>, &mut [f64]),
{
    let mut phi = Integrand::zeros(s.steps(), s.atoms());
    for i in 0..s.steps() {
        let view = PrefixView { scenario: s, step: i };
        f(&view, phi.row_mut(i));
    }
    phi
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsometryReport {
    pub lhs: f64,
    pub rhs: f64,
    /// Standard error of the paired difference `I(φ)² − ‖φ‖²`.
    pub se: f64,
}

impl IsometryReport {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

/// Sample means of `I(φ)²` and the pathwise I-norm over a batch.
pub fn isometry_check<F>(builder: F, batch: &NoiseBatch) -> Result<IsometryReport>
where
    F: Fn(&PrefixView<'_>, &mut [f64]) + Sync,
{
    let pairs: Vec<Result<(f64, f64)>> = {
        use rayon::prelude::*;
        batch
            .scenarios
            .par_iter()
            .map(|s| {
                let phi = build_predictable(s, &builder);
                let i = integrate(&phi, s)?;
                Ok((i * i, i_norm_squared(&phi, &s.intensity, &batch.levy)?))
            })
            .collect()
    };
    let pairs = pairs.into_iter().collect::<Result<Vec<_>>>()?;
    let m = pairs.len();
    let lhs = ordered_sum(m, |k| pairs[k].0) / m as f64;
    let rhs = ordered_sum(m, |k| pairs[k].1) / m as f64;
    let mut diff = MeanAccumulator::default();
    pairs.iter().for_each(|(a, b)| diff.push(a - b));
    Ok(IsometryReport { lhs, rhs, se: diff.se() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorReport {
    pub max_abs: f64,
    /// Largest `|ξI(φ) − I(ξφ)| / (|ξ| Σ_i |φ_i μ_i|)`, the error relative
    /// to the magnitude of the summands.
    pub max_rel: f64,
    /// Largest `|ξI(φ) − I(ξφ)| / |ξI(φ)|`; large when `I(φ)` cancels to
    /// near zero.
    pub max_rel_to_value: f64,
}

fn term_magnitude(phi: &Integrand, s: &NoiseScenario) -> f64 {
    let mut total = 0.0;
    for i in 0..phi.steps() {
        let row = phi.row(i);
        total += (row[0] * s.d_b[i]).abs();
        for j in 0..phi.atoms() {
            total += (row[j + 1] * s.d_htilde(i, j)).abs();
        }
    }
    total
}

/// Deviation between `ξ·I(φ)` and `I(ξφ)` for a factor depending only on
/// the intensity path.
pub fn factor_check<X, F>(xi: X, builder: F, batch: &NoiseBatch) -> Result<FactorReport>
where
    X: Fn(&IntensityPath) -> f64,
    F: Fn(&PrefixView<'_>, &mut [f64]),
{
    let mut rep = FactorReport {
        max_abs: 0.0,
        max_rel: 0.0,
        max_rel_to_value: 0.0,
    };
    for s in &batch.scenarios {
        let x = xi(&s.intensity);
        let phi = build_predictable(s, &builder);
        let left = x * integrate(&phi, s)?;
        let right = integrate(&phi.scale(x), s)?;
        let d = (left - right).abs();
        let scale = x.abs() * term_magnitude(&phi, s);
        rep.max_abs = rep.max_abs.max(d);
        if d > 0.0 {
            rep.max_rel = rep.max_rel.max(d / scale.max(f64::MIN_POSITIVE));
            rep.max_rel_to_value = rep.max_rel_to_value.max(d / left.abs().max(f64::MIN_POSITIVE));
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::intensity::IntensityModel;
    use proptest::prelude::*;

    fn batch(lam_b: f64, lam_h: f64, pairs: &[(f64, f64)], m: usize) -> NoiseBatch {
        let grid = make_grid(1.0, 10).unwrap();
        let model = IntensityModel::constant(lam_b, lam_h).unwrap();
        let levy = LevyMeasure::from_pairs(pairs).unwrap();
        NoiseBatch::simulate(&model, &grid, &levy, m, 5).unwrap()
    }

    #[test]
    fn basic_integrals() {
        let b = batch(1.0, 1.0, &[(1.0, 0.7)], 3);
        let s = &b.scenarios[0];
        assert_eq!(integrate(&Integrand::zeros(10, 1), s).unwrap(), 0.0);
        let ones = Integrand::constant(10, &[1.0, 0.0]);
        let b_t: f64 = s.d_b.iter().sum();
        assert!((integrate(&ones, s).unwrap() - b_t).abs() < 1e-14);
        let jump = Integrand::constant(10, &[0.0, 1.0]);
        let total: u32 = s.counts.iter().sum();
        let expect = total as f64 - 0.7 * s.intensity.cum_h()[10];
        assert!((integrate(&jump, s).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn norms() {
        let grid = make_grid(1.0, 10).unwrap();
        let path = IntensityPath::from_values(&grid, vec![1.0; 11], vec![1.0; 11]).unwrap();
        let none = LevyMeasure::empty();
        let one = Integrand::constant(10, &[1.0]);
        assert!((i_norm_squared(&one, &path, &none).unwrap() - 1.0).abs() < 1e-14);
        let levy = LevyMeasure::from_pairs(&[(2.0, 0.5)]).unwrap();
        let z = Integrand::constant(10, &[0.0, 2.0]);
        assert!((i_norm_squared(&z, &path, &levy).unwrap() - 2.0).abs() < 1e-14);
        assert_eq!(i_norm_squared(&Integrand::zeros(10, 1), &path, &levy).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let b = batch(1.0, 1.0, &[(1.0, 1.0)], 2);
        assert!(integrate(&Integrand::zeros(9, 1), &b.scenarios[0]).is_err());
        assert!(integrate(&Integrand::zeros(10, 2), &b.scenarios[0]).is_err());
    }

    #[test]
    fn factor_identity_and_indicator_are_exact() {
        let b = batch(1.0, 1.0, &[(1.0, 1.0)], 50);
        let builder = |v: &PrefixView<'_>, row: &mut [f64]| {
            row[0] = v.brownian();
            row[1] = 0.3;
        };
        let one = factor_check(|_| 1.0, builder, &b).unwrap();
        assert_eq!(one.max_abs, 0.0);
        let ind = factor_check(|p| f64::from(u8::from(p.cum_b()[10] > 1.0)), builder, &b).unwrap();
        assert_eq!(ind.max_abs, 0.0);
    }

    #[test]
    #[should_panic]
    fn prefix_hides_the_future() {
        let b = batch(1.0, 1.0, &[(1.0, 1.0)], 1);
        build_predictable(&b.scenarios[0], |v, row| row[1] = v.d_htilde(v.step(), 0));
    }

    proptest! {
        #[test]
        fn integration_is_linear(a in -3.0f64..3.0, c in -3.0f64..3.0, seed in 0u64..50) {
            let grid = make_grid(1.0, 6).unwrap();
            let model = IntensityModel::constant(1.3, 0.8).unwrap();
            let levy = LevyMeasure::from_pairs(&[(1.0, 1.0), (-0.4, 2.0)]).unwrap();
            let b = NoiseBatch::simulate(&model, &grid, &levy, 1, seed).unwrap();
            let s = &b.scenarios[0];
            let phi = build_predictable(s, |v, row| {
                row[0] = v.brownian();
                row[1] = 1.0 + v.step() as f64;
                row[2] = -0.5;
            });
            let psi = Integrand::constant(6, &[0.2, -1.0, 3.0]);
            let lhs = integrate(&phi.combine(a, &psi, c).unwrap(), s).unwrap();
            let rhs = a * integrate(&phi, s).unwrap() + c * integrate(&psi, s).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }
}
