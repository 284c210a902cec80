//! Mean-variance portfolio: pathwise A, C, the optimal feedback and its
//! dominance over a few challengers.

use timechange_bsde::{
    coefficient_field_g, make_grid, maximum_principle_check, mv_rule, standard_challengers,
    IntensityModel, LevyMeasure, MeanVarianceModel, NoiseBatch, RegressionSpec,
};

fn main() -> timechange_bsde::Result<()> {
    let steps = 50;
    let grid = make_grid(1.0, steps)?;
    let intensity = IntensityModel::constant(1.0, 1.0)?;
    let levy = LevyMeasure::from_pairs(&[(1.0, 1.0)])?;
    let batch = NoiseBatch::simulate(&intensity, &grid, &levy, 10_000, 17)?;

    // ρ = 0, α = 0.1, ψ(0) = 0.2, ψ(1) = 0.1, target k = 1.2, x0 = 1.
    let model = MeanVarianceModel::constant(steps, 0.0, 0.1, &[0.2, 0.1], 1.2, 1.0);
    let field = coefficient_field_g(&model, &batch)?;
    println!("A_0 = {:.5}, C_0 = {:.5}", field.a[0][0], field.c[0][0]);

    let opt = mv_rule("optimal", &model, &field, &levy);
    let spec = RegressionSpec::default().with_degree(1);
    let rep = maximum_principle_check(&model, &opt, &field, &standard_challengers(&opt), &batch, &spec, 1e-10, 50)?;
    println!("first-order residual {:.2e}, affine residual {:.2e}", rep.foc_relative(), rep.affine_relative());
    println!("J(optimal) = {:.5} ± {:.5}", rep.candidate.j, rep.candidate.se);
    for c in &rep.challengers {
        println!("  {:<12} J = {:.5}  J(û) − J(u) = {:+.5} ± {:.5}", c.control, c.j, c.gap_to_candidate, c.gap_se);
    }
    Ok(())
}
