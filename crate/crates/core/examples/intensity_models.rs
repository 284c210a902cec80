//! The four intensity families and their time changes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timechange_bsde::{make_grid, simulate_intensity, ComponentModel, IntensityModel};

fn main() -> timechange_bsde::Result<()> {
    let grid = make_grid(2.0, 200)?;
    let families = [
        ("constant", ComponentModel::constant(1.5)),
        ("piecewise", ComponentModel::Piecewise { levels: vec![0.5, 2.0, 1.0], breaks: vec![0.5, 1.5] }),
        ("two-state", ComponentModel::TwoState { levels: [0.5, 2.5], switch_rates: [2.0, 2.0], initial_prob: 0.5 }),
        ("cir", ComponentModel::Cir { kappa: 2.0, theta: 1.0, sigma: 0.4, x0: 0.2 }),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (name, jump) in families {
        let model = IntensityModel::new(ComponentModel::constant(1.0), jump)?;
        let path = simulate_intensity(&model, &grid, &mut rng)?;
        let n = path.steps();
        let avg = path.cum_h()[n] / grid.time(n);
        println!(
            "{name:<10} λ^H(0) = {:.3}  λ^H(T-) = {:.3}  Λ^H_T / T = {:.3}  tail at t=1: {:.3}",
            path.lam_h()[0],
            path.lam_h()[n - 1],
            avg,
            path.tail_h(100)
        );
    }
    Ok(())
}
