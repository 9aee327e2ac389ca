//! SGD with gradients of bounded relative bias on a loss with known constants.
//!
//! The loss is `f(θ) = ½‖θ‖² + a·Σ cos(b·θᵢ)`. Its Hessian is diagonal with
//! entries `1 − a·b²·cos(b·θᵢ)`, so the gradient is `(1 + a·b²)`-Lipschitz,
//! and the minimum value is found coordinate-wise by bisection on the
//! stationary points, which all lie in `|x| ≤ a·b`.
//!
//! The gradient oracle returns `(1 − δ)·g + σ·ξ` with `ξ ~ N(0, I)`: the
//! bias points against `g` with norm exactly `δ‖g‖`, and the variance is
//! `σ²·d`.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::trainer::Schedule;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineBowl {
    pub dim: usize,
    pub a: f64,
    pub b: f64,
}

impl CosineBowl {
    pub fn new(dim: usize, a: f64, b: f64) -> Result<Self> {
        if dim == 0 || !(a >= 0.0) || !(b > 0.0) {
            return Err(Error::invalid("cosine bowl needs dim > 0, a >= 0, b > 0"));
        }
        Ok(Self { dim, a, b })
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .map(|&x| 0.5 * x * x + self.a * (self.b * x).cos())
            .sum()
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .map(|&x| x - self.a * self.b * (self.b * x).sin())
            .collect()
    }

    /// Lipschitz constant of the gradient, `1 + a·b²`.
    pub fn lipschitz(&self) -> f64 {
        1.0 + self.a * self.b * self.b
    }

    fn coord_loss(&self, x: f64) -> f64 {
        0.5 * x * x + self.a * (self.b * x).cos()
    }

    fn coord_grad(&self, x: f64) -> f64 {
        x - self.a * self.b * (self.b * x).sin()
    }

    /// Minimum of the one-dimensional loss, from every stationary point.
    pub fn coord_min(&self) -> f64 {
        let reach = self.a * self.b;
        let mut best = self.coord_loss(0.0);
        if reach == 0.0 {
            return best;
        }
        let grid = 20_000;
        let step = 2.0 * reach / grid as f64;
        let mut lo = -reach - step;
        let mut g_lo = self.coord_grad(lo);
        for i in 0..=grid + 1 {
            let hi = -reach + i as f64 * step;
            let g_hi = self.coord_grad(hi);
            if g_lo == 0.0 {
                best = best.min(self.coord_loss(lo));
            } else if g_lo.signum() != g_hi.signum() {
                let (mut l, mut h) = (lo, hi);
                for _ in 0..200 {
                    let mid = 0.5 * (l + h);
                    if self.coord_grad(mid).signum() == self.coord_grad(l).signum() {
                        l = mid;
                    } else {
                        h = mid;
                    }
                }
                best = best.min(self.coord_loss(0.5 * (l + h)));
            }
            lo = hi;
            g_lo = g_hi;
        }
        best
    }

    pub fn min_loss(&self) -> f64 {
        self.dim as f64 * self.coord_min()
    }
}

#[derive(Clone, Debug)]
pub struct BiasedLossOracle {
    pub loss: CosineBowl,
    pub delta: f64,
    pub sigma: f64,
    rng: SeededRng,
}

impl BiasedLossOracle {
    pub fn new(loss: CosineBowl, delta: f64, sigma: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::invalid(format!("relative bias {delta} outside [0, 1)")));
        }
        if !(sigma >= 0.0) {
            return Err(Error::invalid("noise scale must be nonnegative"));
        }
        Ok(Self {
            loss,
            delta,
            sigma,
            rng: SeededRng::new(seed),
        })
    }

    /// `E‖ĝ − Eĝ‖²`
    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma * self.loss.dim as f64
    }

    /// Largest stepsize the convergence bound admits, `(1−δ)/(L(1+δ)²)`.
    pub fn stepsize_cap(&self) -> f64 {
        (1.0 - self.delta) / (self.loss.lipschitz() * (1.0 + self.delta).powi(2))
    }

    /// Returns `(ĝ, g)`.
    pub fn biased_gradient(&mut self, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let g = self.loss.gradient(theta);
        let ghat = g
            .iter()
            .map(|&gi| (1.0 - self.delta) * gi + self.sigma * self.rng.normal())
            .collect();
        (ghat, g)
    }
}

/// Constant stepsize minimising the bound for a fixed horizon `N`.
pub fn optimal_stepsize(d_l: f64, lipschitz: f64, variance: f64, n: usize) -> f64 {
    (2.0 * d_l / (n as f64 * lipschitz * variance)).sqrt()
}

/// The bound at the optimal constant stepsize, `√(8·D·L·σ²/N) / (1−δ)`.
pub fn optimal_bound(delta: f64, d_l: f64, lipschitz: f64, variance: f64, n: usize) -> f64 {
    (8.0 * d_l * lipschitz * variance / n as f64).sqrt() / (1.0 - delta)
}

#[derive(Clone, Debug)]
pub struct BiasedSgdRun {
    /// `‖g(θ_n)‖²` for `n = 1..=N+1`.
    pub grad_sq: Vec<f64>,
    /// Minimum over `n = 1..=N`.
    pub min_grad_sq: f64,
    /// `(2D + Lσ²Σγ²) / ((1−δ)Σγ)`
    pub bound: f64,
    pub d_l: f64,
    /// Some stepsize exceeded `(1−δ)/(L(1+δ)²)`.
    pub above_cap: bool,
}

impl BiasedSgdRun {
    /// Running minimum of `‖g‖²`.
    pub fn running_min(&self) -> Vec<f64> {
        let mut m = f64::INFINITY;
        self.grad_sq
            .iter()
            .map(|&v| {
                m = m.min(v);
                m
            })
            .collect()
    }
}

pub fn run_biased_sgd(
    oracle: &mut BiasedLossOracle,
    theta0: &[f64],
    schedule: Schedule,
    n: usize,
) -> Result<BiasedSgdRun> {
    if n == 0 {
        return Err(Error::invalid("need at least one SGD step"));
    }
    if theta0.len() != oracle.loss.dim {
        return Err(Error::shape("initial point has the wrong dimension"));
    }
    let d_l = oracle.loss.loss(theta0) - oracle.loss.min_loss();
    let cap = oracle.stepsize_cap();
    let mut theta = theta0.to_vec();
    let mut grad_sq = Vec::with_capacity(n + 1);
    let mut sum_g = 0.0;
    let mut sum_g2 = 0.0;
    let mut above_cap = false;
    for step in 1..=n {
        let gamma = schedule.at(step);
        above_cap |= gamma > cap;
        sum_g += gamma;
        sum_g2 += gamma * gamma;
        let (ghat, g) = oracle.biased_gradient(&theta);
        grad_sq.push(g.iter().map(|v| v * v).sum());
        theta.iter_mut().zip(&ghat).for_each(|(t, d)| *t -= gamma * d);
    }
    grad_sq.push(oracle.loss.gradient(&theta).iter().map(|v| v * v).sum());
    if above_cap {
        log::warn!("stepsize above the admissible cap {cap:.4e}; bound does not apply");
    }
    let l = oracle.loss.lipschitz();
    let bound = (2.0 * d_l + l * oracle.variance() * sum_g2) / ((1.0 - oracle.delta) * sum_g);
    let min_grad_sq = grad_sq[..n].iter().copied().fold(f64::INFINITY, f64::min);
    Ok(BiasedSgdRun {
        grad_sq,
        min_grad_sq,
        bound,
        d_l,
        above_cap,
    })
}
