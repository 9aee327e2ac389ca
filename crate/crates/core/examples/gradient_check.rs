//! Compare full-window BPTT on a stacked LSTM with central finite differences.
//!
//! cargo run --example gradient_check

use adaptive_tbptt::backprop::{bptt, finite_diff_gradient};
use adaptive_tbptt::model::forward_window;
use adaptive_tbptt::{Architecture, ModelParams, SeededRng, TokenWindow};

fn main() -> adaptive_tbptt::Result<()> {
    let arch = Architecture::lstm(5, 3, &[4, 4]);
    let mut rng = SeededRng::new(7);
    let model = ModelParams::init(&arch, &mut rng)?;
    let x: Vec<usize> = (0..12).map(|_| rng.below(5) as usize).collect();
    let y: Vec<usize> = (0..12).map(|_| rng.below(5) as usize).collect();
    let window = TokenWindow::single(&x, &y)?;

    let out = forward_window(&window, &model.zero_state(1), &model)?;
    let analytic = bptt(&model, &out.tape, x.len(), 1)?;
    let numeric = finite_diff_gradient(
        |m| {
            let out = forward_window(&window, &m.zero_state(1), m)?;
            Ok(*out.tape.losses().last().unwrap())
        },
        &model,
        1e-5,
    )?;

    println!("{:<12} {:>8} {:>12} {:>12}", "tensor", "size", "max |g|", "max |g-fd|");
    let names = model.named_shapes();
    for ((name, _), (a, n)) in names.iter().zip(analytic.slices().into_iter().zip(numeric.slices())) {
        let gmax = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = a.iter().zip(n).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        println!("{name:<12} {:>8} {gmax:>12.3e} {err:>12.3e}", a.len());
    }
    println!("max abs difference: {:.3e}", analytic.max_abs_diff(&numeric));
    Ok(())
}
