//! Linear BSDE: the Γ-representation oracle against the generic solver.

use timechange_bsde::{
    gamma_process, linear_solution, make_grid, solve_backward, ComponentModel, IntensityModel,
    LevyMeasure, LinearCoefficients, NoiseBatch, OracleMode, RegressionSpec, TerminalCondition,
};

fn main() -> timechange_bsde::Result<()> {
    let grid = make_grid(1.0, 50)?;
    let model = IntensityModel::new(
        ComponentModel::constant(1.0),
        ComponentModel::TwoState { levels: [0.5, 2.0], switch_rates: [1.0, 1.0], initial_prob: 0.5 },
    )?;
    let levy = LevyMeasure::from_pairs(&[(1.0, 1.0)])?;
    let batch = NoiseBatch::simulate(&model, &grid, &levy, 10_000, 9)?;

    // g = 0.3·y + 0.1 + 0.2·φ(0)·λ^B + 0.4·φ(1)·λ^H.
    let coef = LinearCoefficients::constant(0.3, 0.1, &[0.2, 0.4]);
    let xi = TerminalCondition::new(f64::INFINITY, "B_T", |_, s| s.brownian_path()[s.steps()]);
    let spec = RegressionSpec::default().with_degree(1);

    let dt: Vec<f64> = (0..grid.steps()).map(|i| grid.dt(i)).collect();
    let gamma = gamma_process(&coef, &batch.scenarios[0], 0, &levy, &dt)?;
    println!("Γ_T(0) on scenario 0: {:.4}", gamma[grid.steps()]);

    let oracle = linear_solution(&coef, &xi, &batch, &spec, OracleMode::Recursive)?;
    let sol = solve_backward(&coef.driver(&levy), &xi, &batch, &spec, 1e-10, 50)?;

    let mut sq = 0.0;
    let mut norm = 0.0;
    for (i, row) in oracle.iter().enumerate() {
        for (k, y) in row.iter().enumerate() {
            sq += (sol.y(k, i) - y).powi(2);
            norm += y * y;
        }
    }
    println!("Y0: oracle {:.5}, solver {:.5}", oracle[0][0], sol.y(0, 0));
    println!("relative RMS gap {:.2e}", (sq / norm).sqrt());
    Ok(())
}
