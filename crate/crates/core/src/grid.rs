//! Uniform time grids on `[0, T]`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    points: Vec<f64>,
}

/// Uniform partition of `[0, horizon]` into `steps` cells, `t_i = i * horizon / steps`.
pub fn make_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    TimeGrid::uniform(horizon, steps)
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive and finite, got {horizon}")));
        }
        if steps == 0 {
            return Err(invalid("grid needs at least one step"));
        }
        let points = (0..=steps)
            .map(|i| {
                if i == steps {
                    horizon
                } else {
                    i as f64 * horizon / steps as f64
                }
            })
            .collect();
        Ok(Self { horizon, points })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of cells `N`.
    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn time(&self, i: usize) -> f64 {
        self.points[i]
    }

    /// Length of cell `(t_i, t_{i+1}]`.
    pub fn dt(&self, i: usize) -> f64 {
        self.points[i + 1] - self.points[i]
    }

    /// Nominal step `T / N`.
    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    /// Index of the grid point equal to `t` (up to rounding), if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * self.step_size();
        let guess = (t / self.step_size()).round();
        if guess < 0.0 || guess > self.steps() as f64 {
            return None;
        }
        let i = guess as usize;
        ((self.points[i] - t).abs() <= tol).then_some(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_grid() {
        let g = make_grid(1.0, 4).unwrap();
        assert_eq!(g.points(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.steps(), 4);
    }

    #[test]
    fn single_step() {
        let g = make_grid(2.0, 1).unwrap();
        assert_eq!(g.points(), &[0.0, 2.0]);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(make_grid(0.0, 4).is_err());
        assert!(make_grid(-1.0, 4).is_err());
        assert!(make_grid(f64::NAN, 4).is_err());
        assert!(make_grid(1.0, 0).is_err());
    }

    #[test]
    fn index_lookup() {
        let g = make_grid(1.0, 50).unwrap();
        assert_eq!(g.index_of(0.5), Some(25));
        assert_eq!(g.index_of(1.0), Some(50));
        assert_eq!(g.index_of(0.511), None);
        assert_eq!(g.index_of(1.5), None);
    }

    proptest::proptest! {
        #[test]
        fn strictly_increasing(horizon in 1e-3f64..100.0, steps in 1usize..500) {
            let g = make_grid(horizon, steps).unwrap();
            proptest::prop_assert_eq!(g.points()[0], 0.0);
            proptest::prop_assert_eq!(*g.points().last().unwrap(), horizon);
            for i in 0..steps {
                proptest::prop_assert!(g.dt(i) > 0.0 && g.dt(i).is_finite());
            }
        }
    }
}
