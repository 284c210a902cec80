//! Comparison theorem: raising the driver by one keeps Y¹ ≤ Y².

use timechange_bsde::{
    comparison_harness, make_grid, IntensityModel, LevyMeasure, NoiseBatch, RegressionSpec,
    StructuralDriver, TerminalCondition,
};

fn main() -> timechange_bsde::Result<()> {
    let grid = make_grid(1.0, 25)?;
    let model = IntensityModel::constant(1.0, 1.0)?;
    let levy = LevyMeasure::from_pairs(&[(1.0, 1.0)])?;
    let batch = NoiseBatch::simulate(&model, &grid, &levy, 5_000, 21)?;

    // f(y, β, h) with β and h the Brownian and jump parts of φ weighted by κ.
    let kappa = vec![0.2, 0.4];
    let base = StructuralDriver::new(kappa.clone(), 1.0, "base", |_, y, b, h| 0.3 * y + b + h);
    let raised = StructuralDriver::new(kappa, 1.0, "base + 1", |_, y, b, h| 0.3 * y + 1.0 + b + h);
    let xi = TerminalCondition::new(f64::INFINITY, "B_T", |_, s| s.brownian_path()[s.steps()]);

    let spec = RegressionSpec::default().with_degree(1);
    let (rep, y1, y2) = comparison_harness(&base.driver(&levy), &xi, &raised, &xi, &batch, &spec, 1e-10, 1e-3)?;
    println!("Y0: {:.4} vs {:.4}", y1.y(0, 0), y2.y(0, 0));
    println!("violations {:.4}%, min gap {:.4}, mean gap {:.4}", 100.0 * rep.violation_fraction, rep.min_gap, rep.mean_gap);
    if !rep.precondition_violations.is_empty() {
        println!("preconditions: {:?}", rep.precondition_violations);
    }
    Ok(())
}
