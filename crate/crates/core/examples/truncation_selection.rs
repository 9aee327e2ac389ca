//! From a gradient-norm profile to a truncation length.
//!
//! Builds the bias-bound table for a contractive tanh RNN and prints the
//! selected `K` for a range of relative-bias tolerances.
//!
//! cargo run --release --example truncation_selection

use adaptive_tbptt::backprop::grad_norm_profile;
use adaptive_tbptt::cells::{Activation, CellParams};
use adaptive_tbptt::trainer::sample_positions;
use adaptive_tbptt::truncation::{adapt_from_profile, select_truncation, BetaEstimator, SelectionSettings};
use adaptive_tbptt::{Architecture, ModelParams, SeededRng};

fn main() -> adaptive_tbptt::Result<()> {
    let mut rng = SeededRng::new(5);
    let arch = Architecture::simple(6, 4, &[12], Activation::Tanh);
    let mut model = ModelParams::init_with_scale(&arch, &mut rng, 1.0)?;
    if let CellParams::Simple(p) = &mut model.layers[0] {
        let s = p.w.spectral_norm(200);
        p.w.scale(0.7 / s);
    }
    let x: Vec<usize> = (0..5_000).map(|_| rng.below(6) as usize).collect();
    let y: Vec<usize> = (0..5_000).map(|_| rng.below(6) as usize).collect();
    let r = 50;
    let positions = sample_positions(x.len(), r, 64, &mut rng)?;
    let profile = grad_norm_profile(&model, &x, &y, &positions, r, None)?;

    let settings = SelectionSettings {
        delta: 0.5,
        k_min: 1,
        k_max: r,
        tau_hat: None,
        estimator: BetaEstimator::Regression,
    };
    let ad = adapt_from_profile(&profile, &settings)?;
    println!("decay rate estimate: {:?}", ad.decay.beta_hat());
    println!("{:>3} {:>12} {:>12}", "K", "E_hat", "Delta_hat");
    for k in 1..=12 {
        println!("{k:>3} {:>12.4e} {:>12.4e}", ad.table.e_hat[k], ad.table.delta_hat[k]);
    }
    println!();
    for delta in [0.9, 0.5, 0.1, 0.01, 0.001] {
        let s = select_truncation(&ad.table, delta, 1, r)?;
        println!(
            "delta = {delta:<6} -> K = {:>2}{}",
            s.k,
            if s.clamped { " (clamped)" } else { "" }
        );
    }
    ad.table.save_csv("bias_bounds.csv".as_ref())?;
    println!("wrote bias_bounds.csv");
    Ok(())
}
