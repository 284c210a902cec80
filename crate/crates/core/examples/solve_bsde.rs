//! A nonlinear BSDE solved by the regression Picard scheme, then a contraction
//! probe from two different starting iterates.

use timechange_bsde::{
    make_grid, picard_contraction_probe, BackwardSolver, Driver, IntensityModel, Iterate, LevyMeasure,
    NoiseBatch, RegressionSpec, SolverSettings, TerminalCondition,
};

fn main() -> timechange_bsde::Result<()> {
    let grid = make_grid(0.5, 25)?;
    let model = IntensityModel::constant(1.0, 1.0)?;
    let levy = LevyMeasure::from_pairs(&[(1.0, 1.0)])?;
    let batch = NoiseBatch::simulate(&model, &grid, &levy, 5_000, 5)?;

    // g = 0.5·sin(y) + 0.3·φ(0), Lipschitz in the I-norm metric with K = 0.8.
    let g = Driver::new(0.8, "sine", |a| 0.5 * a.y.sin() + 0.3 * a.phi[0]);
    let xi = TerminalCondition::new(f64::INFINITY, "B_T", |_, s| s.brownian_path()[s.steps()]);

    let settings = SolverSettings::new(RegressionSpec::default().with_degree(2), 1e-10, 50);
    let mut solver = BackwardSolver::new(&g, &xi, &batch, settings)?;
    let sol = solver.solve()?;
    let d = &sol.diagnostics;
    println!("Y0 = {:.6} after {} iterations", sol.y(0, 0), d.iterations);
    println!("last iterate distance {:.2e}", d.distances.last().copied().unwrap_or(0.0));

    let (n, m, j) = (batch.steps(), batch.len(), levy.len());
    let probe = picard_contraction_probe(
        &mut solver,
        [Iterate::zeros(n, m, j), Iterate::constant(n, m, j, 3.0, -1.0)],
        12,
        1e-12,
    )?;
    for (k, r) in probe.ratios.iter().enumerate() {
        println!("ratio {k:>2}: {r:.3}");
    }
    println!("final Y gap {:.2e}", probe.final_y_rms_gap);
    Ok(())
}
