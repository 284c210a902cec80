//! A hand-built control problem: derivative check, state simulation and the
//! adjoint BSDE along the controlled paths.

use timechange_bsde::{
    adjoint_solve, make_grid, simulate_state, ControlProblem, ControlRule, IntensityModel, LevyMeasure,
    NoiseBatch, RegressionSpec, SolverSettings,
};

fn main() -> timechange_bsde::Result<()> {
    let grid = make_grid(1.0, 20)?;
    let intensity = IntensityModel::constant(1.0, 0.5)?;
    let levy = LevyMeasure::from_pairs(&[(1.0, 1.0)])?;
    let batch = NoiseBatch::simulate(&intensity, &grid, &levy, 4_000, 2)?;

    // dX = (−0.5X + u) dt + 0.3 dB + 0.1X dH̃,  J = E[−∫ u²/2 dt − (X_T − 1)²].
    let problem = ControlProblem::new(0.0, "damped tracking")
        .with_drift(|p| -0.5 * p.x + p.u, |_| -0.5)
        .with_loading(|p, slot| if slot == 0 { 0.3 } else { 0.1 * p.x }, |_, slot| if slot == 0 { 0.0 } else { 0.1 })
        .with_reward(|p| -0.5 * p.u * p.u, |_| 0.0)
        .with_terminal(|x, _| -(x - 1.0) * (x - 1.0), |x, _| -2.0 * (x - 1.0))
        .with_controls(-5.0, 5.0)
        .with_k1(0.5);

    let rule = ControlRule::new("push toward 1", |ctx| (1.0 - ctx.x()).clamp(-5.0, 5.0));
    let paths = simulate_state(&problem, &rule, &batch)?;
    let check = problem.derivative_check(&paths.points(&batch, 8), levy.len() + 1)?;
    println!("derivative check: worst relative gap {:.2e}", check.max_relative_gap);

    let settings = SolverSettings::new(RegressionSpec::default().with_degree(2), 1e-10, 50);
    let adj = adjoint_solve(&problem, &paths, &batch, settings)?;
    let mean_xt = (0..batch.len()).map(|k| paths.terminal(k)).sum::<f64>() / batch.len() as f64;
    println!("E[X_T] = {mean_xt:.4}, adjoint Y0 = {:.4}", adj.y(0, 0));
    Ok(())
}
