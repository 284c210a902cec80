//! First-order residual of the adjoint equation for quadratic and exponential
//! utility under three controls.

use timechange_bsde::{
    coefficient_field_g, make_grid, mv_rule, utility_foc_report, ControlRule, IntensityModel,
    LevyMeasure, MeanVarianceModel, NoiseBatch, RegressionSpec, SolverSettings, Utility,
};

fn main() -> timechange_bsde::Result<()> {
    let steps = 25;
    let grid = make_grid(1.0, steps)?;
    let intensity = IntensityModel::constant(1.0, 1.0)?;
    let levy = LevyMeasure::from_pairs(&[(1.0, 1.0)])?;
    let batch = NoiseBatch::simulate(&intensity, &grid, &levy, 5_000, 4)?;

    let model = MeanVarianceModel::constant(steps, 0.0, 0.1, &[0.2, 0.1], 1.2, 1.0);
    let field = coefficient_field_g(&model, &batch)?;
    let settings = SolverSettings::new(RegressionSpec::default().with_degree(1), 1e-10, 50);

    let rules = [
        ControlRule::constant("zero", 0.0),
        ControlRule::constant("constant 0.5", 0.5),
        mv_rule("mean-variance feedback", &model, &field, &levy),
    ];
    for (label, u) in [("quadratic", Utility::quadratic(1.2)), ("exponential", Utility::exponential(2.0))] {
        for rule in &rules {
            let r = utility_foc_report(&model, &u, rule, &batch, settings.clone())?;
            println!(
                "{label:<12} {:<24} residual/scale {:.3e}  E[U] = {:.5} ± {:.5}",
                rule.name(),
                r.foc_rms / r.scale_y.max(f64::MIN_POSITIVE),
                r.expected_utility,
                r.expected_utility_se
            );
        }
    }
    Ok(())
}
