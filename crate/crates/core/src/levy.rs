//! Finite atomic Lévy measures `ν = Σ_j w_j δ_{z_j}`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    /// Jump size `z_j`, never zero.
    pub size: f64,
    /// Mass `w_j > 0`.
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LevyMeasure {
    atoms: Vec<Atom>,
}

impl LevyMeasure {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        for (j, a) in atoms.iter().enumerate() {
            if !a.size.is_finite() || a.size == 0.0 {
                return Err(invalid(format!("atom {j}: jump size must be finite and nonzero")));
            }
            if !(a.mass.is_finite() && a.mass > 0.0) {
                return Err(invalid(format!("atom {j}: mass must be positive and finite")));
            }
            if atoms[..j].iter().any(|b| b.size == a.size) {
                return Err(invalid(format!("atom {j}: duplicate jump size {}", a.size)));
            }
        }
        Ok(Self { atoms })
    }

    /// Builds from `(size, mass)` pairs.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(size, mass)| Atom { size, mass })
                .collect(),
        )
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn masses(&self) -> impl Iterator<Item = f64> + '_ {
        self.atoms.iter().map(|a| a.mass)
    }

    /// `∫ z² ν(dz)`.
    pub fn second_moment(&self) -> f64 {
        self.atoms.iter().map(|a| a.size * a.size * a.mass).sum()
    }

    /// Total mass `ν(R_0)`.
    pub fn total_mass(&self) -> f64 {
        self.masses().sum()
    }
}

pub fn levy_second_moment(m: &LevyMeasure) -> f64 {
    m.second_moment()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_moments() {
        assert_eq!(LevyMeasure::from_pairs(&[(1.0, 1.0)]).unwrap().second_moment(), 1.0);
        let m = LevyMeasure::from_pairs(&[(1.0, 2.0), (-0.5, 4.0)]).unwrap();
        assert_eq!(levy_second_moment(&m), 3.0);
        assert_eq!(LevyMeasure::empty().second_moment(), 0.0);
    }

    #[test]
    fn rejects_invalid_atoms() {
        assert!(LevyMeasure::from_pairs(&[(0.0, 1.0)]).is_err());
        assert!(LevyMeasure::from_pairs(&[(1.0, 0.0)]).is_err());
        assert!(LevyMeasure::from_pairs(&[(1.0, -1.0)]).is_err());
        assert!(LevyMeasure::from_pairs(&[(1.0, 1.0), (1.0, 2.0)]).is_err());
        assert!(LevyMeasure::from_pairs(&[(f64::INFINITY, 1.0)]).is_err());
    }
}
