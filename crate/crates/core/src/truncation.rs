//! Decay-rate estimation, bias bounds and truncation selection.
//!
//! From a gradient-norm profile we average over sampled positions, fit the
//! geometric tail rate `β̂` on lags `[τ̂, R]`, and bound the absolute bias of
//! a `K`-truncated gradient by the tail sum
//!
//! ```text
//! Ê(K) = Σ_{k=K+1}^{τ̂−1} φ̄_k + φ̄_τ̂ / (1 − β̂)        K <  τ̂
//! Ê(K) = φ̄_τ̂ · β̂^(K−τ̂) / (1 − β̂)                    K >= τ̂
//! ```
//!
//! The relative bound divides by `max_{k≤K} (Σ_{j≤k} φ̄_j − Ê(k))`, the
//! partial norm sums standing in for the truncated gradient norm (the
//! parameter-Jacobian bound cancels). The chosen truncation is the smallest
//! `K` in `[K_min, K_max]` whose relative bound is below `δ`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backprop::GradNormProfile;
use crate::error::{Error, Result};

/// Sample mean of a profile over positions, per lag.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanProfile {
    pub mean_phi: Vec<f64>,
    pub samples: usize,
}

impl MeanProfile {
    pub fn window(&self) -> usize {
        self.mean_phi.len().saturating_sub(1)
    }
}

pub fn mean_profile(profile: &GradNormProfile) -> Result<MeanProfile> {
    if profile.is_empty() {
        return Err(Error::invalid("empty gradient-norm profile"));
    }
    let lags = profile.window + 1;
    let mut mean = vec![0.0; lags];
    for row in &profile.samples {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    let n = profile.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(MeanProfile {
        mean_phi: mean,
        samples: profile.len(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaEstimator {
    /// Largest pairwise log-slope on the tail window.
    MaxSlope,
    /// Least-squares slope of `log φ̄_k` against `k`.
    #[default]
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decay {
    Geometric(f64),
    /// The tail does not decay: nonpositive means, or a rate of at least one.
    NoDecay { raw: Option<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayEstimate {
    pub decay: Decay,
    pub tau_hat: usize,
    pub method: BetaEstimator,
    pub window: usize,
}

impl DecayEstimate {
    pub fn beta_hat(&self) -> Option<f64> {
        match self.decay {
            Decay::Geometric(b) => Some(b),
            Decay::NoDecay { .. } => None,
        }
    }

    /// The raw rate, including rates `>= 1`; `None` when the tail had
    /// nonpositive means.
    pub fn raw_beta(&self) -> Option<f64> {
        match self.decay {
            Decay::Geometric(b) => Some(b),
            Decay::NoDecay { raw } => raw,
        }
    }
}

/// Default onset of the geometric tail, `⌊0.9·R⌋`.
pub fn default_tau_hat(window: usize) -> usize {
    window * 9 / 10
}

fn tail_logs(mp: &MeanProfile, tau_hat: usize, window: usize) -> Result<Option<Vec<f64>>> {
    if tau_hat >= window {
        return Err(Error::invalid(format!("need tau_hat < R, got {tau_hat} >= {window}")));
    }
    if window >= mp.mean_phi.len() {
        return Err(Error::invalid(format!(
            "window R={window} exceeds profile of {} lags",
            mp.mean_phi.len()
        )));
    }
    let tail = &mp.mean_phi[tau_hat..=window];
    if tail.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Ok(None);
    }
    Ok(Some(tail.iter().map(|v| v.ln()).collect()))
}

fn classify(slope: f64) -> Decay {
    let beta = slope.exp();
    if beta < 1.0 && beta > 0.0 {
        Decay::Geometric(beta)
    } else {
        Decay::NoDecay { raw: Some(beta) }
    }
}

/// `β̂ = exp(max_{τ̂≤k<k'≤R} (log φ̄_k' − log φ̄_k)/(k' − k))`
pub fn estimate_beta_max(mp: &MeanProfile, tau_hat: usize, window: usize) -> Result<DecayEstimate> {
    let decay = match tail_logs(mp, tau_hat, window)? {
        None => Decay::NoDecay { raw: None },
        Some(logs) => {
            let mut best = f64::NEG_INFINITY;
            for a in 0..logs.len() {
                for b in a + 1..logs.len() {
                    best = best.max((logs[b] - logs[a]) / (b - a) as f64);
                }
            }
            classify(best)
        }
    };
    Ok(DecayEstimate {
        decay,
        tau_hat,
        method: BetaEstimator::MaxSlope,
        window,
    })
}

/// Least-squares slope of `ys` against `0, 1, 2, ...`.
pub fn ols_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// `β̃ = exp(OLS slope of log φ̄_k on k ∈ [τ̂, R])`
pub fn estimate_beta_regression(
    mp: &MeanProfile,
    tau_hat: usize,
    window: usize,
) -> Result<DecayEstimate> {
    let decay = match tail_logs(mp, tau_hat, window)? {
        None => Decay::NoDecay { raw: None },
        Some(logs) => classify(ols_slope(&logs)),
    };
    Ok(DecayEstimate {
        decay,
        tau_hat,
        method: BetaEstimator::Regression,
        window,
    })
}

pub fn estimate_beta(
    mp: &MeanProfile,
    tau_hat: usize,
    window: usize,
    method: BetaEstimator,
) -> Result<DecayEstimate> {
    match method {
        BetaEstimator::MaxSlope => estimate_beta_max(mp, tau_hat, window),
        BetaEstimator::Regression => estimate_beta_regression(mp, tau_hat, window),
    }
}

/// `Ê(K)`; `+∞` without geometric decay.
pub fn absolute_bias_bound(mp: &MeanProfile, de: &DecayEstimate, k: usize) -> f64 {
    let Some(beta) = de.beta_hat() else {
        return f64::INFINITY;
    };
    let tau = de.tau_hat;
    let head = mp.mean_phi[tau];
    if k >= tau {
        head * beta.powi((k - tau) as i32) / (1.0 - beta)
    } else {
        mp.mean_phi[k + 1..tau].iter().sum::<f64>() + head / (1.0 - beta)
    }
}

/// `Ē[Σ_{j≤k} φ_j]`, the stand-in for the norm of a `k`-truncated gradient.
pub fn proxy_norm(mp: &MeanProfile, k: usize) -> f64 {
    mp.mean_phi[..=k].iter().sum()
}

/// `Δ̂(K)`; `+∞` when the denominator is not positive.
pub fn relative_bias_bound(mp: &MeanProfile, de: &DecayEstimate, k: usize) -> f64 {
    let denom = (0..=k)
        .map(|j| proxy_norm(mp, j) - absolute_bias_bound(mp, de, j))
        .fold(f64::NEG_INFINITY, f64::max);
    let num = absolute_bias_bound(mp, de, k);
    if !(denom > 0.0) || !num.is_finite() {
        f64::INFINITY
    } else {
        num / denom
    }
}

/// Bias bounds for every `K ∈ [0, R]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasBoundTable {
    pub e_hat: Vec<f64>,
    pub delta_hat: Vec<f64>,
    pub proxy_norm: Vec<f64>,
}

impl BiasBoundTable {
    pub fn build(mp: &MeanProfile, de: &DecayEstimate) -> Self {
        let lags = de.window + 1;
        let mut e_hat = Vec::with_capacity(lags);
        let mut delta_hat = Vec::with_capacity(lags);
        let mut proxy = Vec::with_capacity(lags);
        let mut partial = 0.0;
        let mut denom = f64::NEG_INFINITY;
        for k in 0..lags {
            partial += mp.mean_phi[k];
            let e = absolute_bias_bound(mp, de, k);
            denom = denom.max(partial - e);
            e_hat.push(e);
            proxy.push(partial);
            delta_hat.push(if denom > 0.0 && e.is_finite() {
                e / denom
            } else {
                f64::INFINITY
            });
        }
        Self {
            e_hat,
            delta_hat,
            proxy_norm: proxy,
        }
    }

    /// A table with given relative bounds and no other content.
    pub fn from_delta(delta_hat: Vec<f64>) -> Self {
        let n = delta_hat.len();
        Self {
            e_hat: vec![f64::NAN; n],
            delta_hat,
            proxy_norm: vec![f64::NAN; n],
        }
    }

    pub fn max_k(&self) -> usize {
        self.delta_hat.len().saturating_sub(1)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["K", "E_hat", "Delta_hat", "proxy_norm"])?;
        for k in 0..self.delta_hat.len() {
            w.write_record([
                k.to_string(),
                self.e_hat[k].to_string(),
                self.delta_hat[k].to_string(),
                self.proxy_norm[k].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncationSelection {
    pub k: usize,
    pub delta_target: f64,
    /// No `K` in range met the target; `k` is `K_max`.
    pub clamped: bool,
    /// `Δ̂(k)` from the table.
    pub delta_at_k: f64,
}

/// Smallest `K ∈ [K_min, K_max]` with `Δ̂(K) < δ`, else `K_max` (clamped).
pub fn select_truncation(
    table: &BiasBoundTable,
    delta: f64,
    k_min: usize,
    k_max: usize,
) -> Result<TruncationSelection> {
    if k_min < 1 || k_min > k_max || k_max > table.max_k() {
        return Err(Error::invalid(format!(
            "need 1 <= K_min <= K_max <= R, got [{k_min}, {k_max}] with R = {}",
            table.max_k()
        )));
    }
    let pick = (k_min..=k_max).find(|&k| table.delta_hat[k] < delta);
    let (k, clamped) = match pick {
        Some(k) => (k, false),
        None => (k_max, true),
    };
    Ok(TruncationSelection {
        k,
        delta_target: delta,
        clamped,
        delta_at_k: table.delta_hat[k],
    })
}

/// Settings for one truncation-selection pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionSettings {
    pub delta: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub tau_hat: Option<usize>,
    pub estimator: BetaEstimator,
}

/// Everything computed from one profile.
#[derive(Clone, Debug)]
pub struct Adaptation {
    pub mean: MeanProfile,
    pub decay: DecayEstimate,
    pub table: BiasBoundTable,
    pub selection: TruncationSelection,
}

/// Profile → mean → `β̂` → bounds → `K`. Without decay the selection falls
/// back to `K_max` and is marked clamped.
pub fn adapt_from_profile(profile: &GradNormProfile, s: &SelectionSettings) -> Result<Adaptation> {
    let mean = mean_profile(profile)?;
    let window = profile.window;
    let tau = s.tau_hat.unwrap_or_else(|| default_tau_hat(window));
    let decay = estimate_beta(&mean, tau, window, s.estimator)?;
    let table = BiasBoundTable::build(&mean, &decay);
    let selection = select_truncation(&table, s.delta, s.k_min, s.k_max)?;
    if decay.beta_hat().is_none() {
        log::warn!(
            "no geometric decay in gradient norms (raw rate {:?}); using K_max = {}",
            decay.raw_beta(),
            s.k_max
        );
    }
    Ok(Adaptation {
        mean,
        decay,
        table,
        selection,
    })
}
