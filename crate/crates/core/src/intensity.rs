//! Intensity processes `λ = (λ^B, λ^H)` and their time changes `Λ^B`, `Λ̂^H`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::TimeGrid;

/// Model for one intensity component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ComponentModel {
    /// `levels[k]` holds on `[breaks[k-1], breaks[k])`; a single level is a constant.
    Piecewise { levels: Vec<f64>, breaks: Vec<f64> },
    /// Continuous-time two-state chain sampled on the grid.
    TwoState {
        levels: [f64; 2],
        /// Rate of leaving state 0 and state 1 respectively.
        switch_rates: [f64; 2],
        /// Probability of starting in state 0.
        initial_prob: f64,
    },
    /// `dλ = κ(θ − λ)dt + σ√λ dW`, Euler with truncation at zero.
    Cir {
        kappa: f64,
        theta: f64,
        sigma: f64,
        x0: f64,
    },
}

impl ComponentModel {
    pub fn constant(level: f64) -> Self {
        ComponentModel::Piecewise {
            levels: vec![level],
            breaks: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        match self {
            ComponentModel::Piecewise { levels, breaks } => {
                if levels.is_empty() || levels.len() != breaks.len() + 1 {
                    return Err(invalid("piecewise intensity needs len(levels) = len(breaks) + 1"));
                }
                if !levels.iter().all(|&l| finite_nonneg(l)) {
                    return Err(invalid("piecewise levels must be finite and nonnegative"));
                }
                if breaks.windows(2).any(|w| w[1] <= w[0]) || breaks.iter().any(|b| !b.is_finite()) {
                    return Err(invalid("piecewise breaks must be finite and strictly increasing"));
                }
            }
            ComponentModel::TwoState {
                levels,
                switch_rates,
                initial_prob,
            } => {
                if !levels.iter().all(|&l| finite_nonneg(l)) {
                    return Err(invalid("two-state levels must be finite and nonnegative"));
                }
                if !switch_rates.iter().all(|&q| finite_nonneg(q)) {
                    return Err(invalid("two-state switch rates must be finite and nonnegative"));
                }
                if !(0.0..=1.0).contains(initial_prob) {
                    return Err(invalid("two-state initial probability must lie in [0, 1]"));
                }
            }
            ComponentModel::Cir {
                kappa,
                theta,
                sigma,
                x0,
            } => {
                if !(finite_nonneg(*kappa) && finite_nonneg(*theta) && finite_nonneg(*sigma) && finite_nonneg(*x0)) {
                    return Err(invalid("CIR parameters must be finite and nonnegative"));
                }
            }
        }
        Ok(())
    }

    pub fn is_deterministic(&self) -> bool {
        match self {
            ComponentModel::Piecewise { .. } => true,
            ComponentModel::TwoState {
                levels,
                switch_rates,
                initial_prob,
            } => {
                levels[0] == levels[1]
                    || (switch_rates[0] == 0.0
                        && switch_rates[1] == 0.0
                        && (*initial_prob == 0.0 || *initial_prob == 1.0))
            }
            ComponentModel::Cir { sigma, .. } => *sigma == 0.0,
        }
    }

    /// Values at grid points `0..=N`.
    pub fn sample<R: Rng + ?Sized>(&self, grid: &TimeGrid, rng: &mut R) -> Vec<f64> {
        let start = match self {
            ComponentModel::Piecewise { .. } => self.piecewise_at(0.0),
            ComponentModel::TwoState {
                levels,
                initial_prob,
                ..
            } => {
                if rng.random::<f64>() < *initial_prob {
                    levels[0]
                } else {
                    levels[1]
                }
            }
            ComponentModel::Cir { x0, .. } => *x0,
        };
        self.continue_from(grid, 0, start, rng)
    }

    /// Values at grid points `from..=N` given the value at `t_from`.
    ///
    /// All three models are Markov in `(t, λ_t)` on the grid, so this is the
    /// conditional law of the future given the past up to `t_from`.
    pub fn continue_from<R: Rng + ?Sized>(
        &self,
        grid: &TimeGrid,
        from: usize,
        value: f64,
        rng: &mut R,
    ) -> Vec<f64> {
        let n = grid.steps();
        let mut out = Vec::with_capacity(n + 1 - from);
        out.push(value);
        match self {
            ComponentModel::Piecewise { .. } => {
                for i in from + 1..=n {
                    out.push(self.piecewise_at(grid.time(i)));
                }
            }
            ComponentModel::TwoState {
                levels,
                switch_rates,
                ..
            } => {
                let mut state = usize::from(value != levels[0]);
                for i in from..n {
                    let p_switch = 1.0 - (-switch_rates[state] * grid.dt(i)).exp();
                    if p_switch > 0.0 && rng.random::<f64>() < p_switch {
                        state = 1 - state;
                    }
                    out.push(levels[state]);
                }
            }
            ComponentModel::Cir {
                kappa,
                theta,
                sigma,
                ..
            } => {
                let mut x = value;
                for i in from..n {
                    let dt = grid.dt(i);
                    let z: f64 = StandardNormal.sample(rng);
                    x = (x + kappa * (theta - x) * dt + sigma * x.max(0.0).sqrt() * dt.sqrt() * z).max(0.0);
                    out.push(x);
                }
            }
        }
        out
    }

    fn piecewise_at(&self, t: f64) -> f64 {
        match self {
            ComponentModel::Piecewise { levels, breaks } => {
                let k = breaks.iter().take_while(|&&b| b <= t).count();
                levels[k]
            }
            _ => unreachable!("piecewise_at on non-piecewise model"),
        }
    }
}

/// Joint model for `(λ^B, λ^H)`; the two components are simulated independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityModel {
    pub brownian: ComponentModel,
    pub jump: ComponentModel,
}

impl IntensityModel {
    pub fn new(brownian: ComponentModel, jump: ComponentModel) -> Result<Self> {
        brownian.validate()?;
        jump.validate()?;
        Ok(Self { brownian, jump })
    }

    pub fn constant(lam_b: f64, lam_h: f64) -> Result<Self> {
        Self::new(ComponentModel::constant(lam_b), ComponentModel::constant(lam_h))
    }

    pub fn is_deterministic(&self) -> bool {
        self.brownian.is_deterministic() && self.jump.is_deterministic()
    }

    /// Continuation of both components from `from` given their current values.
    pub fn continue_from<R: Rng + ?Sized>(
        &self,
        grid: &TimeGrid,
        from: usize,
        lam_b: f64,
        lam_h: f64,
        rng: &mut R,
    ) -> (Vec<f64>, Vec<f64>) {
        let b = self.brownian.continue_from(grid, from, lam_b, rng);
        let h = self.jump.continue_from(grid, from, lam_h, rng);
        (b, h)
    }
}

/// A discretized intensity trajectory with left-point cumulative integrals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityPath {
    lam_b: Vec<f64>,
    lam_h: Vec<f64>,
    cum_b: Vec<f64>,
    cum_h: Vec<f64>,
}

impl IntensityPath {
    /// `lam_b`, `lam_h` hold values at grid points `0..=N`. The value at `t_N`
    /// does not enter any integral.
    pub fn from_values(grid: &TimeGrid, lam_b: Vec<f64>, lam_h: Vec<f64>) -> Result<Self> {
        let n = grid.steps();
        if lam_b.len() != n + 1 || lam_h.len() != n + 1 {
            return Err(invalid("intensity values must have one entry per grid point"));
        }
        if lam_b.iter().chain(&lam_h).any(|&l| !(l.is_finite() && l >= 0.0)) {
            return Err(invalid("intensity values must be finite and nonnegative"));
        }
        let cumulate = |lam: &[f64]| {
            let mut cum = Vec::with_capacity(n + 1);
            let mut acc = 0.0;
            cum.push(0.0);
            for i in 0..n {
                acc += lam[i] * grid.dt(i);
                cum.push(acc);
            }
            cum
        };
        let cum_b = cumulate(&lam_b);
        let cum_h = cumulate(&lam_h);
        Ok(Self {
            lam_b,
            lam_h,
            cum_b,
            cum_h,
        })
    }

    pub fn steps(&self) -> usize {
        self.lam_b.len() - 1
    }

    pub fn lam_b(&self) -> &[f64] {
        &self.lam_b
    }

    pub fn lam_h(&self) -> &[f64] {
        &self.lam_h
    }

    /// `Λ^B_{t_i}` for every grid point.
    pub fn cum_b(&self) -> &[f64] {
        &self.cum_b
    }

    /// `Λ̂^H_{t_i}` for every grid point.
    pub fn cum_h(&self) -> &[f64] {
        &self.cum_h
    }

    pub fn d_cum_b(&self, i: usize) -> f64 {
        self.cum_b[i + 1] - self.cum_b[i]
    }

    pub fn d_cum_h(&self, i: usize) -> f64 {
        self.cum_h[i + 1] - self.cum_h[i]
    }

    /// `∫_{t_i}^T λ^B ds`.
    pub fn tail_b(&self, i: usize) -> f64 {
        self.cum_b[self.steps()] - self.cum_b[i]
    }

    /// `∫_{t_i}^T λ^H ds`.
    pub fn tail_h(&self, i: usize) -> f64 {
        self.cum_h[self.steps()] - self.cum_h[i]
    }
}

pub fn simulate_intensity<R: Rng + ?Sized>(
    model: &IntensityModel,
    grid: &TimeGrid,
    rng: &mut R,
) -> Result<IntensityPath> {
    let lam_b = model.brownian.sample(grid, rng);
    let lam_h = model.jump.sample(grid, rng);
    IntensityPath::from_values(grid, lam_b, lam_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::rng::{stream, Purpose};

    #[test]
    fn constant_intensity_integrates_exactly() {
        let grid = make_grid(1.0, 4).unwrap();
        let model = IntensityModel::constant(1.0, 2.0).unwrap();
        let path = simulate_intensity(&model, &grid, &mut stream(1, 0, Purpose::Intensity)).unwrap();
        assert_eq!(path.cum_b(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(path.cum_h(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(path.tail_b(1), 0.75);
    }

    #[test]
    fn piecewise_levels_follow_breaks() {
        let grid = make_grid(1.0, 4).unwrap();
        let model = IntensityModel::new(
            ComponentModel::Piecewise {
                levels: vec![1.0, 3.0],
                breaks: vec![0.5],
            },
            ComponentModel::constant(0.0),
        )
        .unwrap();
        let path = simulate_intensity(&model, &grid, &mut stream(1, 0, Purpose::Intensity)).unwrap();
        assert_eq!(path.lam_b(), &[1.0, 1.0, 3.0, 3.0, 3.0]);
        assert_eq!(path.cum_b(), &[0.0, 0.25, 0.5, 1.25, 2.0]);
        assert_eq!(path.cum_h(), &[0.0; 5]);
    }

    #[test]
    fn stuck_two_state_chain_is_constant() {
        let grid = make_grid(1.0, 10).unwrap();
        let model = IntensityModel::new(
            ComponentModel::constant(1.0),
            ComponentModel::TwoState {
                levels: [0.7, 5.0],
                switch_rates: [0.0, 0.0],
                initial_prob: 1.0,
            },
        )
        .unwrap();
        assert!(model.is_deterministic());
        for k in 0..20 {
            let path = simulate_intensity(&model, &grid, &mut stream(3, k, Purpose::Intensity)).unwrap();
            assert!(path.lam_h().iter().all(|&l| l == 0.7));
            for i in 0..=10 {
                assert!((path.cum_h()[i] - 0.07 * i as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cir_stays_nonnegative_when_feller_fails() {
        let grid = make_grid(1.0, 50).unwrap();
        let model = IntensityModel::new(
            ComponentModel::Cir {
                kappa: 0.5,
                theta: 0.2,
                sigma: 2.0,
                x0: 0.2,
            },
            ComponentModel::constant(1.0),
        )
        .unwrap();
        for k in 0..200 {
            let path = simulate_intensity(&model, &grid, &mut stream(5, k, Purpose::Intensity)).unwrap();
            assert!(path.lam_b().iter().all(|&l| l >= 0.0));
            assert!(path.cum_b().windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn same_stream_same_path() {
        let grid = make_grid(1.0, 20).unwrap();
        let model = IntensityModel::new(
            ComponentModel::Cir {
                kappa: 2.0,
                theta: 1.0,
                sigma: 0.5,
                x0: 1.0,
            },
            ComponentModel::TwoState {
                levels: [1.0, 3.0],
                switch_rates: [1.0, 2.0],
                initial_prob: 0.5,
            },
        )
        .unwrap();
        let a = simulate_intensity(&model, &grid, &mut stream(9, 4, Purpose::Intensity)).unwrap();
        let b = simulate_intensity(&model, &grid, &mut stream(9, 4, Purpose::Intensity)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_negative_parameters() {
        assert!(IntensityModel::constant(-1.0, 1.0).is_err());
        assert!(ComponentModel::Cir {
            kappa: 1.0,
            theta: -1.0,
            sigma: 0.1,
            x0: 1.0
        }
        .validate()
        .is_err());
        assert!(ComponentModel::TwoState {
            levels: [1.0, 2.0],
            switch_rates: [1.0, 1.0],
            initial_prob: 1.5
        }
        .validate()
        .is_err());
    }
}
