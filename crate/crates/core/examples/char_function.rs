//! Empirical characteristic functions of B_t and η_t against the
//! batch average of the conditional ones.

use timechange_bsde::{
    empirical_char_function, make_grid, ComponentModel, IntensityModel, LevyMeasure, NoiseBatch,
    NoiseComponent,
};

fn main() -> timechange_bsde::Result<()> {
    let grid = make_grid(1.0, 20)?;
    let model = IntensityModel::new(
        ComponentModel::TwoState { levels: [0.5, 2.0], switch_rates: [1.0, 1.0], initial_prob: 0.5 },
        ComponentModel::constant(1.5),
    )?;
    let levy = LevyMeasure::from_pairs(&[(1.0, 1.0)])?;
    let batch = NoiseBatch::simulate(&model, &grid, &levy, 50_000, 11)?;

    for (which, label) in [(NoiseComponent::Brownian, "B"), (NoiseComponent::Jump, "η")] {
        for c in [0.5, 1.0, 2.0] {
            let e = empirical_char_function(&batch, c, 1.0, which)?;
            println!(
                "{label} c={c:<3}  empirical {:+.4}{:+.4}i  reference {:+.4}{:+.4}i  |gap| {:.4} (se {:.4})",
                e.empirical.re, e.empirical.im, e.reference.re, e.reference.im, e.gap(), e.se
            );
        }
    }
    Ok(())
}
