//! Doubly stochastic Poisson counts under a two-state jump intensity.
//!
//! Given λ^H the count over [0, T] is Poisson(Λ^H_T), so its variance exceeds
//! its mean by Var[Λ^H_T].

use timechange_bsde::{
    doubly_stochastic_moments, make_grid, ComponentModel, IntensityModel, LevyMeasure, NoiseBatch,
};

fn main() -> timechange_bsde::Result<()> {
    let grid = make_grid(1.0, 50)?;
    let model = IntensityModel::new(
        ComponentModel::constant(1.0),
        // Frozen chain: λ^H is 1 or 3 for the whole horizon.
        ComponentModel::TwoState { levels: [1.0, 3.0], switch_rates: [0.0, 0.0], initial_prob: 0.5 },
    )?;
    let levy = LevyMeasure::from_pairs(&[(1.0, 1.0)])?;
    let batch = NoiseBatch::simulate(&model, &grid, &levy, 20_000, 42)?;

    let m = doubly_stochastic_moments(&batch, 0..batch.steps(), 0)?;
    println!("mean     {:.4} ± {:.4}  (reference {:.4})", m.mean, m.mean_se, m.reference_mean);
    println!("variance {:.4} ± {:.4}  (reference {:.4})", m.variance, m.variance_se, m.reference_variance);

    println!("\nfirst scenario, Brownian path and compensated jump path:");
    let s = &batch.scenarios[0];
    let (b, h) = (s.brownian_path(), s.compensated_path(0));
    for i in (0..=batch.steps()).step_by(10) {
        println!("t = {:.2}  B = {:+.4}  H~ = {:+.4}", grid.time(i), b[i], h[i]);
    }
    Ok(())
}
