//! Conditional Brownian measure `B` and doubly stochastic Poisson field `H`
//! simulated cell by cell given an intensity path.

use std::io::Write;
use std::ops::Range;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::grid::TimeGrid;
use crate::intensity::{simulate_intensity, IntensityModel, IntensityPath};
use crate::levy::LevyMeasure;
use crate::rng::{stream, stream_id, Purpose};
use crate::stats::{fmt_f64, MeanAccumulator};

/// One simulated world.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseScenario {
    pub intensity: Arc<IntensityPath>,
    /// `B((t_i, t_{i+1}] × {0})`.
    pub d_b: Vec<f64>,
    /// `H((t_i, t_{i+1}] × {z_j})`, row-major `[step][atom]`.
    pub counts: Vec<u32>,
    /// `H̃` on the same cells.
    pub d_htilde: Vec<f64>,
    /// Identifier of the noise streams this scenario was drawn from.
    pub seed: u64,
}

impl NoiseScenario {
    pub fn steps(&self) -> usize {
        self.d_b.len()
    }

    pub fn atoms(&self) -> usize {
        if self.d_b.is_empty() {
            0
        } else {
            self.counts.len() / self.d_b.len()
        }
    }

    pub fn count(&self, step: usize, atom: usize) -> u32 {
        self.counts[step * self.atoms() + atom]
    }

    pub fn d_htilde(&self, step: usize, atom: usize) -> f64 {
        self.d_htilde[step * self.atoms() + atom]
    }

    /// `μ` on cell `step` of slot `slot` (0 = diffusion, `j+1` = atom `j`).
    pub fn mu(&self, step: usize, slot: usize) -> f64 {
        if slot == 0 {
            self.d_b[step]
        } else {
            self.d_htilde(step, slot - 1)
        }
    }

    /// `B_{t_i}` for every grid point.
    pub fn brownian_path(&self) -> Vec<f64> {
        cumulative(self.d_b.iter().copied())
    }

    /// Compensated count `H̃((0, t_i] × {z_j})` for every grid point.
    pub fn compensated_path(&self, atom: usize) -> Vec<f64> {
        cumulative((0..self.steps()).map(|i| self.d_htilde(i, atom)))
    }

    /// `η_{t_i} = Σ_j z_j H̃((0, t_i] × {z_j})`.
    pub fn jump_martingale_path(&self, levy: &LevyMeasure) -> Vec<f64> {
        cumulative((0..self.steps()).map(|i| {
            levy.atoms()
                .iter()
                .enumerate()
                .map(|(j, a)| a.size * self.d_htilde(i, j))
                .sum()
        }))
    }
}

fn cumulative(incr: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for d in incr {
        acc += d;
        out.push(acc);
    }
    out
}

/// Independent Brownian and jump streams for one scenario.
pub struct NoiseStreams {
    pub brownian: ChaCha8Rng,
    pub jumps: ChaCha8Rng,
    pub id: u64,
}

impl NoiseStreams {
    pub fn for_scenario(master: u64, index: u64) -> Self {
        Self {
            brownian: stream(master, index, Purpose::Brownian),
            jumps: stream(master, index, Purpose::Jumps),
            id: stream_id(index, Purpose::Brownian),
        }
    }
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    let draw: f64 = Poisson::new(mean).expect("finite positive Poisson mean").sample(rng);
    draw as u32
}

/// Draws `dB_i ~ N(0, ΔΛ^B_i)` and `H_{ij} ~ Poisson(w_j ΔΛ̂^H_i)`, all cells
/// independent given the intensity path.
pub fn simulate_noise(
    intensity: Arc<IntensityPath>,
    levy: &LevyMeasure,
    streams: &mut NoiseStreams,
) -> NoiseScenario {
    let n = intensity.steps();
    let j = levy.len();
    let mut d_b = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(n * j);
    let mut d_htilde = Vec::with_capacity(n * j);
    for i in 0..n {
        let var = intensity.d_cum_b(i);
        let z: f64 = StandardNormal.sample(&mut streams.brownian);
        d_b.push(if var > 0.0 { var.sqrt() * z } else { 0.0 });
        let dh = intensity.d_cum_h(i);
        for atom in levy.atoms() {
            let mean = atom.mass * dh;
            let k = poisson(mean, &mut streams.jumps);
            counts.push(k);
            d_htilde.push(k as f64 - mean);
        }
    }
    NoiseScenario {
        intensity,
        d_b,
        counts,
        d_htilde,
        seed: streams.id,
    }
}

/// A Monte Carlo sample of the noise sharing one grid and one Lévy measure.
#[derive(Debug, Clone)]
pub struct NoiseBatch {
    pub grid: TimeGrid,
    pub levy: LevyMeasure,
    pub scenarios: Vec<NoiseScenario>,
    pub master_seed: u64,
}

impl NoiseBatch {
    /// Simulates `m` scenarios. Deterministic intensity paths are simulated
    /// once and shared.
    pub fn simulate(
        model: &IntensityModel,
        grid: &TimeGrid,
        levy: &LevyMeasure,
        m: usize,
        master_seed: u64,
    ) -> Result<Self> {
        if m == 0 {
            return Err(invalid("batch needs at least one scenario"));
        }
        let shared = if model.is_deterministic() {
            let mut rng = stream(master_seed, 0, Purpose::Intensity);
            Some(Arc::new(simulate_intensity(model, grid, &mut rng)?))
        } else {
            None
        };
        let scenarios = (0..m)
            .into_par_iter()
            .map(|k| {
                let path = match &shared {
                    Some(p) => Arc::clone(p),
                    None => {
                        let mut rng = stream(master_seed, k as u64, Purpose::Intensity);
                        Arc::new(simulate_intensity(model, grid, &mut rng)?)
                    }
                };
                let mut streams = NoiseStreams::for_scenario(master_seed, k as u64);
                Ok(simulate_noise(path, levy, &mut streams))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: grid.clone(),
            levy: levy.clone(),
            scenarios,
            master_seed,
        })
    }

    /// Simulates noise on caller-supplied intensity paths (one per scenario).
    pub fn from_paths(
        grid: &TimeGrid,
        levy: &LevyMeasure,
        paths: Vec<Arc<IntensityPath>>,
        master_seed: u64,
    ) -> Result<Self> {
        if paths.iter().any(|p| p.steps() != grid.steps()) {
            return Err(invalid("intensity path does not match grid"));
        }
        let scenarios = paths
            .into_par_iter()
            .enumerate()
            .map(|(k, path)| {
                let mut streams = NoiseStreams::for_scenario(master_seed, k as u64);
                simulate_noise(path, levy, &mut streams)
            })
            .collect();
        Ok(Self {
            grid: grid.clone(),
            levy: levy.clone(),
            scenarios,
            master_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    /// True when every scenario shares the same intensity path.
    pub fn has_deterministic_intensity(&self) -> bool {
        let first = &self.scenarios[0].intensity;
        self.scenarios
            .iter()
            .all(|s| Arc::ptr_eq(&s.intensity, first) || *s.intensity == **first)
    }

    /// One CSV row per `(scenario, step)`:
    /// `scenario_id,t,lamB,lamH,dB,count_1,...,count_J`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        self.write_csv_head(w, self.len())
    }

    /// As [`write_csv`](Self::write_csv) for the first `count` scenarios.
    pub fn write_csv_head<W: Write>(&self, mut w: W, count: usize) -> Result<()> {
        write!(w, "scenario_id,t,lamB,lamH,dB")?;
        for j in 0..self.levy.len() {
            write!(w, ",count_{}", j + 1)?;
        }
        writeln!(w)?;
        for (k, s) in self.scenarios.iter().enumerate().take(count) {
            for i in 0..self.steps() {
                write!(
                    w,
                    "{},{},{},{},{}",
                    k,
                    fmt_f64(self.grid.time(i)),
                    fmt_f64(s.intensity.lam_b()[i]),
                    fmt_f64(s.intensity.lam_h()[i]),
                    fmt_f64(s.d_b[i])
                )?;
                for j in 0..self.levy.len() {
                    write!(w, ",{}", s.count(i, j))?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseComponent {
    Brownian,
    Jump,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharFunctionEstimate {
    pub empirical: Complex64,
    /// Batch average of the conditional characteristic function.
    pub reference: Complex64,
    /// Standard error of `empirical − reference`.
    pub se: f64,
}

impl CharFunctionEstimate {
    pub fn gap(&self) -> f64 {
        (self.empirical - self.reference).norm()
    }
}

/// Empirical characteristic function of `B_t` or `η_t` against the batch
/// average of `exp{−½c²Λ^B_t}` or `exp{Λ̂^H_t Σ_j (e^{icz_j} − 1 − icz_j) w_j}`.
pub fn empirical_char_function(
    batch: &NoiseBatch,
    c: f64,
    t: f64,
    which: NoiseComponent,
) -> Result<CharFunctionEstimate> {
    let idx = batch
        .grid
        .index_of(t)
        .ok_or_else(|| invalid(format!("t = {t} is not a grid point")))?;
    let exponent: Complex64 = batch
        .levy
        .atoms()
        .iter()
        .map(|a| {
            let icz = Complex64::new(0.0, c * a.size);
            (icz.exp() - 1.0 - icz) * a.mass
        })
        .sum();
    let pairs: Vec<(Complex64, Complex64)> = batch
        .scenarios
        .par_iter()
        .map(|s| {
            let (value, reference) = match which {
                NoiseComponent::Brownian => {
                    let b_t: f64 = s.d_b[..idx].iter().sum();
                    let lam = s.intensity.cum_b()[idx];
                    (b_t, Complex64::new((-0.5 * c * c * lam).exp(), 0.0))
                }
                NoiseComponent::Jump => {
                    let eta: f64 = (0..idx)
                        .map(|i| {
                            batch
                                .levy
                                .atoms()
                                .iter()
                                .enumerate()
                                .map(|(j, a)| a.size * s.d_htilde(i, j))
                                .sum::<f64>()
                        })
                        .sum();
                    (eta, (exponent * s.intensity.cum_h()[idx]).exp())
                }
            };
            (Complex64::new(0.0, c * value).exp(), reference)
        })
        .collect();
    let m = pairs.len() as f64;
    let empirical = pairs.iter().map(|p| p.0).sum::<Complex64>() / m;
    let reference = pairs.iter().map(|p| p.1).sum::<Complex64>() / m;
    let mut re = MeanAccumulator::default();
    let mut im = MeanAccumulator::default();
    for (e, r) in &pairs {
        let d = e - r;
        re.push(d.re);
        im.push(d.im);
    }
    let se = (re.variance() / m + im.variance() / m).sqrt();
    Ok(CharFunctionEstimate {
        empirical,
        reference,
        se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEstimate {
    pub mean: f64,
    pub variance: f64,
    pub mean_se: f64,
    pub variance_se: f64,
    /// `E[Λ]` over the batch's intensity paths.
    pub reference_mean: f64,
    /// `E[Λ] + Var[Λ]` over the batch's intensity paths.
    pub reference_variance: f64,
}

/// Empirical mean and variance of `H` on `steps × {z_atom}`, with the mixed
/// Poisson reference moments.
pub fn doubly_stochastic_moments(
    batch: &NoiseBatch,
    steps: Range<usize>,
    atom: usize,
) -> Result<MomentEstimate> {
    if steps.end > batch.steps() || steps.start > steps.end {
        return Err(invalid("step range outside the grid"));
    }
    if atom >= batch.levy.len() {
        return Err(invalid(format!("atom {atom} out of range")));
    }
    let w = batch.levy.atoms()[atom].mass;
    let mut counts = MeanAccumulator::default();
    let mut lambda = MeanAccumulator::default();
    let mut values = Vec::with_capacity(batch.len());
    for s in &batch.scenarios {
        let k: u64 = steps.clone().map(|i| s.count(i, atom) as u64).sum();
        counts.push(k as f64);
        values.push(k as f64);
        lambda.push(w * (s.intensity.cum_h()[steps.end] - s.intensity.cum_h()[steps.start]));
    }
    let m = batch.len() as f64;
    let mean = counts.mean();
    let variance = counts.variance();
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / m;
    let variance_se = ((m4 - variance * variance).max(0.0) / m).sqrt();
    Ok(MomentEstimate {
        mean,
        variance,
        mean_se: (variance / m).sqrt(),
        variance_se,
        reference_mean: lambda.mean(),
        reference_variance: lambda.mean() + lambda.population_variance(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;

    fn batch(lam_b: f64, lam_h: f64, pairs: &[(f64, f64)], m: usize, steps: usize) -> NoiseBatch {
        let grid = make_grid(1.0, steps).unwrap();
        let model = IntensityModel::constant(lam_b, lam_h).unwrap();
        let levy = LevyMeasure::from_pairs(pairs).unwrap();
        NoiseBatch::simulate(&model, &grid, &levy, m, 11).unwrap()
    }

    #[test]
    fn zero_intensity_gives_zero_noise() {
        let b = batch(0.0, 0.0, &[(1.0, 1.0)], 50, 8);
        for s in &b.scenarios {
            assert!(s.d_b.iter().all(|&x| x == 0.0));
            assert!(s.counts.iter().all(|&k| k == 0));
            assert!(s.d_htilde.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn compensated_counts_match_invariant() {
        let b = batch(1.0, 2.0, &[(1.0, 1.0), (-0.5, 0.3)], 20, 10);
        for s in &b.scenarios {
            for i in 0..10 {
                for (j, a) in b.levy.atoms().iter().enumerate() {
                    let expected = s.count(i, j) as f64 - a.mass * s.intensity.d_cum_h(i);
                    assert_eq!(s.d_htilde(i, j), expected);
                }
            }
        }
    }

    #[test]
    fn char_function_at_zero_is_one() {
        let b = batch(1.0, 1.0, &[(1.0, 1.0)], 200, 4);
        for which in [NoiseComponent::Brownian, NoiseComponent::Jump] {
            let est = empirical_char_function(&b, 0.0, 1.0, which).unwrap();
            assert_eq!(est.empirical, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn char_function_rejects_off_grid_time() {
        let b = batch(1.0, 1.0, &[(1.0, 1.0)], 10, 4);
        assert!(empirical_char_function(&b, 1.0, 0.3, NoiseComponent::Brownian).is_err());
    }

    #[test]
    fn gaussian_reference_has_negative_exponent() {
        let b = batch(1.0, 1.0, &[(1.0, 1.0)], 10, 4);
        let est = empirical_char_function(&b, 1.0, 1.0, NoiseComponent::Brownian).unwrap();
        assert!((est.reference.re - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(est.reference.im, 0.0);
    }

    #[test]
    fn jump_reference_for_unit_atom_at_pi() {
        let b = batch(1.0, 1.0, &[(1.0, 1.0)], 10, 4);
        let est = empirical_char_function(&b, std::f64::consts::PI, 1.0, NoiseComponent::Jump).unwrap();
        // Brute force over Poisson(1) outcomes 0..30 of E[exp{iπ(N − 1)}].
        let mut brute = Complex64::new(0.0, 0.0);
        let mut p = (-1.0f64).exp();
        for k in 0..=30 {
            if k > 0 {
                p /= k as f64;
            }
            brute += p * Complex64::new(0.0, std::f64::consts::PI * (k as f64 - 1.0)).exp();
        }
        assert!((est.reference - brute).norm() < 1e-12);
        let closed = Complex64::new(-2.0, -std::f64::consts::PI).exp();
        assert!((est.reference - closed).norm() < 1e-12);
    }

    #[test]
    fn zero_mass_range_has_zero_moments() {
        let b = batch(1.0, 2.0, &[(1.0, 1.0)], 100, 10);
        let est = doubly_stochastic_moments(&b, 3..3, 0).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.variance, 0.0);
        assert_eq!(est.reference_mean, 0.0);
    }

    #[test]
    fn csv_layout() {
        let b = batch(1.0, 1.0, &[(1.0, 1.0), (2.0, 0.5)], 2, 2);
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "scenario_id,t,lamB,lamH,dB,count_1,count_2");
        assert_eq!(lines.len(), 1 + 2 * 2);
        assert!(lines[4].starts_with("1,5.0000000000000000e-1,"));
    }
}
