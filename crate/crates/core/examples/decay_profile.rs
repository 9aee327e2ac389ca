//! Gradient-norm profiles: how fast `‖∂L_s/∂h_{s−k}‖` decays with the lag `k`.
//!
//! Profiles a freshly initialised copy-task LSTM and a contractive tanh RNN,
//! prints the mean norm per lag with the fitted decay rates, and writes the
//! per-sample profile of the LSTM to `decay_profile.csv`.
//!
//! cargo run --release --example decay_profile

use adaptive_tbptt::backprop::grad_norm_profile;
use adaptive_tbptt::cells::{Activation, CellParams};
use adaptive_tbptt::tasks::copy::{gen_copy, CopyConfig};
use adaptive_tbptt::trainer::sample_positions;
use adaptive_tbptt::truncation::{default_tau_hat, estimate_beta, mean_profile, BetaEstimator};
use adaptive_tbptt::{Architecture, GradNormProfile, ModelParams, SeededRng};

fn summarise(label: &str, profile: &GradNormProfile) -> adaptive_tbptt::Result<()> {
    let mp = mean_profile(profile)?;
    let r = profile.window;
    let tau = default_tau_hat(r);
    println!("{label}: {} samples, R = {r}", mp.samples);
    for k in (0..=r).step_by((r / 10).max(1)) {
        println!("  k = {k:>3}  mean phi = {:.4e}", mp.mean_phi[k]);
    }
    for method in [BetaEstimator::MaxSlope, BetaEstimator::Regression] {
        let est = estimate_beta(&mp, tau, r, method)?;
        println!("  {method:?} rate over [{tau}, {r}]: {:?}", est.raw_beta());
    }
    Ok(())
}

fn main() -> adaptive_tbptt::Result<()> {
    let data = gen_copy(&CopyConfig::fixed(10, 20_000, 3))?;
    let mut rng = SeededRng::new(1);
    let lstm = ModelParams::init(&Architecture::lstm(8, 6, &[50, 50]), &mut rng)?;
    let positions = sample_positions(data.len(), 100, 64, &mut rng)?;
    let profile = grad_norm_profile(&lstm, &data.inputs, &data.targets, &positions, 100, None)?;
    summarise("copy-task LSTM at initialisation", &profile)?;
    profile.save_csv("decay_profile.csv".as_ref())?;

    let mut rnn = ModelParams::init_with_scale(
        &Architecture::simple(8, 6, &[16], Activation::Tanh),
        &mut rng,
        1.0,
    )?;
    if let CellParams::Simple(p) = &mut rnn.layers[0] {
        let s = p.w.spectral_norm(200);
        p.w.scale(0.8 / s);
    }
    let positions = sample_positions(data.len(), 40, 64, &mut rng)?;
    let profile = grad_norm_profile(&rnn, &data.inputs, &data.targets, &positions, 40, None)?;
    summarise("tanh RNN with spectral norm 0.8", &profile)?;
    println!("wrote decay_profile.csv");
    Ok(())
}
