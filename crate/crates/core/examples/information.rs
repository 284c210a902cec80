//! Same problem, two information sets. Under G the controller knows the
//! whole intensity path; under F only its history, so A and C are projected.

use timechange_bsde::control::performance;
use timechange_bsde::{
    coefficient_field_f, coefficient_field_g, make_grid, mv_rule, ComponentModel, IntensityModel,
    LevyMeasure, MeanVarianceModel, NoiseBatch,
};

fn main() -> timechange_bsde::Result<()> {
    let steps = 20;
    let grid = make_grid(1.0, steps)?;
    let intensity = IntensityModel::new(
        ComponentModel::TwoState { levels: [0.5, 2.0], switch_rates: [1.0, 1.0], initial_prob: 0.5 },
        ComponentModel::constant(1.0),
    )?;
    let levy = LevyMeasure::from_pairs(&[(1.0, 1.0)])?;
    let batch = NoiseBatch::simulate(&intensity, &grid, &levy, 5_000, 8)?;

    let model = MeanVarianceModel::constant(steps, 0.05, 0.15, &[0.2, 0.1], 1.2, 1.0);
    let g = coefficient_field_g(&model, &batch)?;
    let f = coefficient_field_f(&model, &intensity, &batch, 64, 50_000_000)?;
    if let Some(w) = &f.warning {
        println!("warning: {w}");
    }
    let gap = g.a.iter().flatten().zip(f.a.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!("max |A_G − A_F| = {gap:.4}");

    // With ρ deterministic, C/A is too, and the feedback depends on A and C
    // only through that ratio: both controls coincide.

    let problem = model.problem();
    for (label, field) in [("G", &g), ("F", &f)] {
        let est = performance(&problem, &mv_rule(label, &model, field, &levy), &batch)?;
        println!("{label}: J = {:.5} ± {:.5}, E[X_T] = {:.4}", est.j, est.se, est.mean_terminal);
    }
    Ok(())
}
