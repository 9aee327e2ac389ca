//! SGD with relatively biased gradients against its convergence bound.
//!
//! For each bias level, runs SGD at the optimal constant stepsize on the
//! cosine bowl and reports the smallest squared gradient norm next to the
//! bound. A second pass uses a `γ/√n` schedule.
//!
//! cargo run --release --example biased_sgd

use adaptive_tbptt::tasks::testbed::{
    optimal_bound, optimal_stepsize, run_biased_sgd, BiasedLossOracle, CosineBowl,
};
use adaptive_tbptt::trainer::Schedule;
use adaptive_tbptt::SeededRng;

fn main() -> adaptive_tbptt::Result<()> {
    let bowl = CosineBowl::new(20, 0.5, 1.2)?;
    let n = 10_000;
    let mut rng = SeededRng::new(11);
    let theta0: Vec<f64> = (0..20).map(|_| rng.uniform(-3.0, 3.0)).collect();
    let d_l = bowl.loss(&theta0) - bowl.min_loss();
    println!("L = {:.3}, f* = {:.4}, D_L = {d_l:.4}", bowl.lipschitz(), bowl.min_loss());
    println!("{:>5} {:>9} {:>9} {:>12} {:>10}", "delta", "gamma", "cap", "min |g|^2", "bound");
    for delta in [0.0, 0.25, 0.5, 0.75, 0.9] {
        let mut oracle = BiasedLossOracle::new(bowl, delta, 1.0, 42)?;
        let gamma = optimal_stepsize(d_l, bowl.lipschitz(), oracle.variance(), n);
        let cap = oracle.stepsize_cap();
        let run = run_biased_sgd(&mut oracle, &theta0, Schedule::Constant(gamma), n)?;
        let bound = optimal_bound(delta, d_l, bowl.lipschitz(), oracle.variance(), n);
        println!("{delta:>5} {gamma:>9.5} {cap:>9.5} {:>12.5e} {bound:>10.5}", run.min_grad_sq);
    }

    println!("\ninverse-sqrt schedule, delta = 0.5");
    let mut oracle = BiasedLossOracle::new(bowl, 0.5, 1.0, 43)?;
    let run = run_biased_sgd(&mut oracle, &theta0, Schedule::InverseSqrt(0.05), n)?;
    let mins = run.running_min();
    for i in [10, 100, 1_000, 10_000] {
        println!("  n = {i:>6}  min |g|^2 = {:.4e}", mins[i - 1]);
    }
    println!("  bound {:.4}", run.bound);
    Ok(())
}
