//! Streaming truncated-BPTT training with per-epoch truncation adaptation.
//!
//! Each of the `S` streams is tiled into windows of `K` steps. An update
//! reruns the forward pass over the previous and the current window from the
//! state saved at the start of the previous one, so every new loss reaches
//! back at least `K` lags, and applies `θ ← θ − γ_n·√K·ĝ` with
//! `ĝ = BPTT(2K, K)`. Hidden states carry across windows and epochs.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backprop::{bptt, grad_norm_profile, GradAccumulator, GradNormProfile};
use crate::error::{Error, Result};
use crate::model::{forward_losses, forward_window, HiddenStates, ModelParams, TokenWindow};
use crate::rng::SeededRng;
use crate::tasks::perplexity;
use crate::truncation::{adapt_from_profile, Adaptation, BetaEstimator, SelectionSettings};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    InverseSqrt,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant(f64),
    InverseSqrt(f64),
}

impl Schedule {
    pub fn new(kind: ScheduleKind, gamma: f64) -> Self {
        match kind {
            ScheduleKind::Constant => Schedule::Constant(gamma),
            ScheduleKind::InverseSqrt => Schedule::InverseSqrt(gamma),
        }
    }

    /// Stepsize at 1-based index `n`.
    pub fn at(&self, n: usize) -> f64 {
        match *self {
            Schedule::Constant(g) => g,
            Schedule::InverseSqrt(g) => g / (n.max(1) as f64).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TruncationMode {
    Adaptive { delta: f64 },
    Fixed { k: usize },
}

impl TruncationMode {
    pub fn name(&self) -> &'static str {
        match self {
            TruncationMode::Adaptive { .. } => "adaptive",
            TruncationMode::Fixed { .. } => "fixed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TruncationMode,
    pub gamma: f64,
    pub schedule: ScheduleKind,
    /// Parallel streams `S`; also the number of profiled positions.
    pub batch_size: usize,
    /// Profiling window `R`.
    pub window: usize,
    pub k0: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub epochs: usize,
    /// Adapt at the start of every `adapt_every`-th epoch, starting with the first.
    pub adapt_every: usize,
    pub estimator: BetaEstimator,
    pub tau_hat: Option<usize>,
    /// Profile in fixed mode too, to log `β̂` and `Δ̂(K)`.
    pub diagnostics: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TruncationMode::Adaptive { delta: 0.9 },
            gamma: 1.0,
            schedule: ScheduleKind::Constant,
            batch_size: 64,
            window: 100,
            k0: 15,
            k_min: 2,
            k_max: 100,
            epochs: 25,
            adapt_every: 1,
            estimator: BetaEstimator::Regression,
            tau_hat: None,
            diagnostics: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.batch_size == 0 || self.window == 0 || self.adapt_every == 0 {
            return Err(Error::config("batch_size, window and adapt_every must be positive"));
        }
        match self.mode {
            TruncationMode::Adaptive { delta } => {
                if !(delta > 0.0 && delta < 1.0) {
                    return Err(Error::config(format!("delta must lie in (0,1), got {delta}")));
                }
                if !(1 <= self.k_min
                    && self.k_min <= self.k0
                    && self.k0 <= self.k_max
                    && self.k_max <= self.window)
                {
                    return Err(Error::config(format!(
                        "need 1 <= k_min <= k0 <= k_max <= window, got {} {} {} {}",
                        self.k_min, self.k0, self.k_max, self.window
                    )));
                }
            }
            TruncationMode::Fixed { k } => {
                if k == 0 {
                    return Err(Error::config("fixed truncation K must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::new(self.schedule, self.gamma)
    }

    fn selection_settings(&self, delta: f64) -> SelectionSettings {
        SelectionSettings {
            delta,
            k_min: self.k_min,
            k_max: self.k_max,
            tau_hat: self.tau_hat,
            estimator: self.estimator,
        }
    }
}

/// `γ_n` for 1-based epoch `n`.
pub fn stepsize(n: usize, cfg: &TrainConfig) -> f64 {
    cfg.schedule().at(n)
}

/// Splits a sequence into `s` contiguous equal-length streams; the remainder
/// is dropped.
pub fn partition_streams(tokens: &[usize], s: usize) -> Result<Vec<Vec<usize>>> {
    if s == 0 || tokens.len() < s {
        return Err(Error::invalid(format!(
            "cannot split {} tokens into {s} streams",
            tokens.len()
        )));
    }
    let len = tokens.len() / s;
    Ok(tokens[..len * s].chunks(len).map(|c| c.to_vec()).collect())
}

/// Consecutive windows of `k` steps; a trailing partial window is dropped.
pub fn streaming_windows(len: usize, k: usize) -> Vec<Range<usize>> {
    if k == 0 {
        return Vec::new();
    }
    (0..len / k).map(|m| m * k..(m + 1) * k).collect()
}

/// Input and target streams of equal length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Streams {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Streams {
    pub fn new(inputs: &[usize], targets: &[usize], s: usize) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::invalid("inputs and targets differ in length"));
        }
        Ok(Self {
            inputs: partition_streams(inputs, s)?,
            targets: partition_streams(targets, s)?,
        })
    }

    pub fn count(&self) -> usize {
        self.inputs.len()
    }

    pub fn len(&self) -> usize {
        self.inputs.first().map_or(0, |s| s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn window(&self, range: Range<usize>) -> TokenWindow {
        let x: Vec<&[usize]> = self.inputs.iter().map(|s| s.as_slice()).collect();
        let y: Vec<&[usize]> = self.targets.iter().map(|s| s.as_slice()).collect();
        TokenWindow::from_streams(&x, &y, range)
    }
}

/// Hidden states carried between windows, one row per stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    pub states: HiddenStates,
    pub cursor: usize,
}

impl StreamState {
    pub fn new(model: &ModelParams, streams: usize) -> Self {
        Self {
            states: model.zero_state(streams),
            cursor: 0,
        }
    }
}

/// `θ ← θ − γ·√K·ĝ`. A non-finite gradient or result leaves `θ` untouched.
pub fn sgd_update(model: &mut ModelParams, g: &GradAccumulator, gamma: f64, k: usize) -> Result<()> {
    if !g.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let step = gamma * (k as f64).sqrt();
    let mut next = model.clone();
    for (p, d) in next.slices_mut().into_iter().zip(g.slices()) {
        if p.len() != d.len() {
            return Err(Error::shape("gradient does not match parameters"));
        }
        p.iter_mut().zip(d).for_each(|(p, d)| *p -= step * d);
    }
    if !next.is_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    *model = next;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochOutcome {
    /// Mean of the batch-mean losses that were backpropagated.
    pub train_loss: f64,
    pub updates: usize,
    /// Loss terms backpropagated, summed over streams.
    pub losses_backpropagated: usize,
}

/// One pass over every stream with truncation `k` and stepsize `gamma`.
pub fn run_epoch(
    model: &mut ModelParams,
    streams: &Streams,
    state: &mut StreamState,
    k: usize,
    gamma: f64,
) -> Result<EpochOutcome> {
    if k == 0 || k > streams.len() {
        return Err(Error::invalid(format!(
            "truncation {k} does not fit streams of length {}",
            streams.len()
        )));
    }
    state.states.check_against(model)?;
    if state.states.batch() != streams.count() {
        return Err(Error::shape("stream state rows differ from stream count"));
    }
    let mut loss_sum = 0.0;
    let mut updates = 0;
    // state at the start of the previous window, and that window's start
    let mut prev: Option<(HiddenStates, usize)> = None;
    state.cursor = 0;
    for w in streaming_windows(streams.len(), k) {
        let (h0, start) = match prev.take() {
            Some(p) => p,
            None => (state.states.clone(), w.start),
        };
        let tw = streams.window(start..w.end);
        let out = forward_window(&tw, &h0, model)?;
        let n = tw.len();
        let g = bptt(model, &out.tape, n.min(2 * k), k)?;
        loss_sum += out.tape.losses()[n - k..].iter().sum::<f64>() / k as f64;
        let at_start = if n == k {
            h0
        } else {
            HiddenStates {
                layers: out.tape.steps[n - k - 1]
                    .layers
                    .iter()
                    .map(|c| c.state())
                    .collect(),
            }
        };
        sgd_update(model, &g, gamma, k)?;
        prev = Some((at_start, w.start));
        state.states = out.final_state;
        state.cursor = w.end;
        updates += 1;
    }
    Ok(EpochOutcome {
        train_loss: loss_sum / updates as f64,
        updates,
        losses_backpropagated: updates * k * streams.count(),
    })
}

/// Samples `count` loss positions with at least `2R − 1` steps of history.
pub fn sample_positions(len: usize, window: usize, count: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    let lo = 2 * window - 1;
    if len <= lo {
        return Err(Error::invalid(format!(
            "sequence of {len} steps is too short to profile with R = {window}"
        )));
    }
    Ok((0..count).map(|_| rng.range_inclusive(lo, len - 1)).collect())
}

/// Profile on `S` sampled positions, then select `K` for tolerance `delta`.
pub fn adapt_truncation(
    model: &ModelParams,
    inputs: &[usize],
    targets: &[usize],
    cfg: &TrainConfig,
    delta: f64,
    rng: &mut SeededRng,
) -> Result<(GradNormProfile, Adaptation)> {
    let positions = sample_positions(inputs.len(), cfg.window, cfg.batch_size, rng)?;
    let profile = grad_norm_profile(model, inputs, targets, &positions, cfg.window, None)?;
    let adaptation = adapt_from_profile(&profile, &cfg.selection_settings(delta))?;
    Ok((profile, adaptation))
}

/// Perplexity of a full-sequence forward pass from the zero state.
pub fn evaluate(model: &ModelParams, inputs: &[usize], targets: &[usize]) -> Result<f64> {
    let tw = TokenWindow::single(inputs, targets)?;
    let (losses, _) = forward_losses(&tw, &model.zero_state(1), model)?;
    perplexity(&losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub mode: &'static str,
    pub k: usize,
    pub beta_hat: Option<f64>,
    pub delta_hat_at_k: Option<f64>,
    /// The selection hit `K_max` without meeting the tolerance.
    pub clamped: bool,
    pub train_loss: f64,
    pub valid_ppl: f64,
    pub test_ppl: f64,
    /// Seconds spent adapting and training, evaluation excluded.
    pub wallclock_s: f64,
    pub losses_backpropagated: usize,
}

/// A sequence pair for training or evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    pub inputs: &'a [usize],
    pub targets: &'a [usize],
}

pub enum TrainEvent<'a> {
    Profiled {
        epoch: usize,
        profile: &'a GradNormProfile,
        adaptation: &'a Adaptation,
    },
    Epoch(&'a EpochStats),
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_valid_ppl: f64,
    pub test_ppl_at_best: f64,
    pub best_model: ModelParams,
    pub final_model: ModelParams,
}

/// Trains `model` for `cfg.epochs` epochs. `on_event` sees every adaptation
/// and every finished epoch; an error from it stops training.
pub fn train(
    cfg: &TrainConfig,
    mut model: ModelParams,
    train: Split<'_>,
    valid: Split<'_>,
    test: Split<'_>,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Err(Error::config("epochs must be positive"));
    }
    let streams = Streams::new(train.inputs, train.targets, cfg.batch_size)?;
    let mut state = StreamState::new(&model, streams.count());
    let master = SeededRng::new(cfg.seed);
    let mut profile_rng = master.derive(2);
    let mut k = match cfg.mode {
        TruncationMode::Adaptive { .. } => cfg.k0,
        TruncationMode::Fixed { k } => k,
    };
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, f64, ModelParams)> = None;
    for epoch in 1..=cfg.epochs {
        let clock = Instant::now();
        let mut beta_hat = None;
        let mut delta_hat = None;
        let mut clamped = false;
        let due = (epoch - 1) % cfg.adapt_every == 0;
        let delta = match cfg.mode {
            TruncationMode::Adaptive { delta } if due => Some(delta),
            TruncationMode::Fixed { .. } if due && cfg.diagnostics => Some(0.5),
            _ => None,
        };
        if let Some(delta) = delta {
            let (profile, adaptation) =
                adapt_truncation(&model, train.inputs, train.targets, cfg, delta, &mut profile_rng)?;
            beta_hat = adaptation.decay.beta_hat();
            if let TruncationMode::Adaptive { .. } = cfg.mode {
                k = adaptation.selection.k;
                clamped = adaptation.selection.clamped;
            }
            delta_hat = adaptation.table.delta_hat.get(k).copied();
            on_event(TrainEvent::Profiled {
                epoch,
                profile: &profile,
                adaptation: &adaptation,
            })?;
        }
        let gamma = stepsize(epoch, cfg);
        let outcome = run_epoch(&mut model, &streams, &mut state, k, gamma)?;
        let wallclock_s = clock.elapsed().as_secs_f64();
        let valid_ppl = evaluate(&model, valid.inputs, valid.targets)?;
        let test_ppl = evaluate(&model, test.inputs, test.targets)?;
        let stats = EpochStats {
            epoch,
            mode: cfg.mode.name(),
            k,
            beta_hat,
            delta_hat_at_k: delta_hat,
            clamped,
            train_loss: outcome.train_loss,
            valid_ppl,
            test_ppl,
            wallclock_s,
            losses_backpropagated: outcome.losses_backpropagated,
        };
        log::info!(
            "epoch {epoch}: K={k} loss={:.4} valid={valid_ppl:.4} test={test_ppl:.4} ({wallclock_s:.1}s)",
            outcome.train_loss
        );
        on_event(TrainEvent::Epoch(&stats))?;
        if best.as_ref().map_or(true, |b| valid_ppl < b.1) {
            best = Some((epoch, valid_ppl, test_ppl, model.clone()));
        }
        epochs.push(stats);
    }
    let (best_epoch, best_valid_ppl, test_ppl_at_best, best_model) =
        best.expect("at least one epoch ran");
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_valid_ppl,
        test_ppl_at_best,
        best_model,
        final_model: model,
    })
}
