//! Reverse-mode gradients through time.
//!
//! One backward sweep walks the tape from the newest step towards the
//! oldest. The running adjoint `b_k` is the gradient of the selected losses
//! with respect to the full recurrent state `k` steps back; it picks up a new
//! loss term while `k < K2` and only propagates afterwards, and the sweep
//! stops after lag `K1`. Jacobians are never formed: each step is a
//! vector–Jacobian product against the recorded forward values.

use std::io::Write;
use std::path::Path;

use crate::cells::{CellParams, LstmCache, SimpleCache, StepCache};
use crate::error::{Error, Result};
use crate::model::{forward_window, ModelParams, StepRecord, Tape, TokenWindow};
use crate::cells::Activation;
use crate::numeric::{add_col_sums, euclid_norm, mul_ab_acc, mul_atb_acc, Matrix};

/// Gradient buffers shaped like a [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradAccumulator {
    pub grads: ModelParams,
}

impl GradAccumulator {
    pub fn zeros_like(model: &ModelParams) -> Self {
        let mut grads = model.clone();
        for s in grads.slices_mut() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        Self { grads }
    }

    pub fn from_flat(model: &ModelParams, flat: &[f64]) -> Result<Self> {
        let mut g = Self::zeros_like(model);
        g.grads.assign_flat(flat)?;
        Ok(g)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.flatten()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.grads.slices()
    }

    pub fn add_scaled(&mut self, other: &GradAccumulator, alpha: f64) {
        for (a, b) in self.grads.slices_mut().into_iter().zip(other.grads.slices()) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += alpha * b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for s in self.grads.slices_mut() {
            s.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .map(|s| s.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.is_finite()
    }

    pub fn max_abs_diff(&self, other: &GradAccumulator) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Adjoint of one layer's recurrent state.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdjoint {
    pub dh: Matrix,
    pub dc: Option<Matrix>,
}

/// Adjoint of the full stacked state, one entry per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointState {
    pub layers: Vec<LayerAdjoint>,
}

impl AdjointState {
    pub fn zeros(model: &ModelParams, batch: usize) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    let d = l.hidden_dim();
                    LayerAdjoint {
                        dh: Matrix::zeros(batch, d),
                        dc: l.is_lstm().then(|| Matrix::zeros(batch, d)),
                    }
                })
                .collect(),
        }
    }

    /// Euclidean norm of each batch row over all layers' `h` and `c` adjoints.
    pub fn row_norms(&self) -> Vec<f64> {
        let batch = self.layers.first().map_or(0, |l| l.dh.rows());
        (0..batch)
            .map(|r| {
                self.layers
                    .iter()
                    .map(|l| {
                        let h: f64 = l.dh.row(r).iter().map(|v| v * v).sum();
                        let c: f64 = l
                            .dc
                            .as_ref()
                            .map_or(0.0, |c| c.row(r).iter().map(|v| v * v).sum());
                        h + c
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    /// Concatenated adjoint of one batch row, layer by layer, `h` before `c`.
    pub fn row_vector(&self, r: usize) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend_from_slice(l.dh.row(r));
            if let Some(c) = &l.dc {
                v.extend_from_slice(c.row(r));
            }
        }
        v
    }
}

fn sub_grads<'a>(g: &'a mut CellParams, cell: &CellParams) -> Result<&'a mut CellParams> {
    if std::mem::discriminant(g) != std::mem::discriminant(cell) {
        return Err(Error::shape("gradient buffer kind differs from cell kind"));
    }
    Ok(g)
}

/// Vector–Jacobian product through one cell step.
///
/// Given the adjoint of the step's output state, accumulates this step's
/// parameter gradients into `grads` and returns the adjoint of the previous
/// state together with the adjoint of the layer input. With `need_prev`
/// false the previous-state adjoint is left at zero.
pub fn cell_vjp(
    cell: &CellParams,
    cache: &StepCache,
    adj: &LayerAdjoint,
    grads: &mut CellParams,
    need_prev: bool,
) -> Result<(LayerAdjoint, Matrix)> {
    let grads = sub_grads(grads, cell)?;
    match (cell, cache, grads) {
        (CellParams::Simple(p), StepCache::Simple(c), CellParams::Simple(g)) => {
            if adj.dh.shape() != c.h.shape() {
                return Err(Error::shape("adjoint does not match tape entry"));
            }
            Ok(simple_vjp(p.activation, p, c, &adj.dh, g, need_prev))
        }
        (CellParams::Lstm(p), StepCache::Lstm(c), CellParams::Lstm(g)) => {
            let dc = adj
                .dc
                .as_ref()
                .ok_or_else(|| Error::shape("LSTM adjoint without a cell component"))?;
            if adj.dh.shape() != c.h.shape() || dc.shape() != c.c.shape() {
                return Err(Error::shape("adjoint does not match tape entry"));
            }
            Ok(lstm_vjp(p, c, &adj.dh, dc, g, need_prev))
        }
        _ => Err(Error::shape("tape entry kind differs from cell kind")),
    }
}

fn simple_vjp(
    act: Activation,
    p: &crate::cells::SimpleRnnParams,
    c: &SimpleCache,
    dh: &Matrix,
    g: &mut crate::cells::SimpleRnnParams,
    need_prev: bool,
) -> (LayerAdjoint, Matrix) {
    let mut da = dh.clone();
    if act == Activation::Tanh {
        da.data_mut()
            .iter_mut()
            .zip(c.h.data())
            .for_each(|(d, h)| *d *= 1.0 - h * h);
    }
    mul_atb_acc(&da, &c.h_prev, &mut g.w);
    mul_atb_acc(&da, &c.x, &mut g.u);
    add_col_sums(&da, g.b.as_mut_slice());
    let mut dh_prev = Matrix::zeros(dh.rows(), dh.cols());
    if need_prev {
        mul_ab_acc(&da, &p.w, &mut dh_prev);
    }
    let mut dx = Matrix::zeros(dh.rows(), c.x.cols());
    mul_ab_acc(&da, &p.u, &mut dx);
    (LayerAdjoint { dh: dh_prev, dc: None }, dx)
}

fn lstm_vjp(
    p: &crate::cells::LstmParams,
    c: &LstmCache,
    dh: &Matrix,
    dc: &Matrix,
    g: &mut crate::cells::LstmParams,
    need_prev: bool,
) -> (LayerAdjoint, Matrix) {
    let (rows, cols) = dh.shape();
    let n = rows * cols;
    let mut da_f = Matrix::zeros(rows, cols);
    let mut da_i = Matrix::zeros(rows, cols);
    let mut da_o = Matrix::zeros(rows, cols);
    let mut da_z = Matrix::zeros(rows, cols);
    let mut dc_prev = Matrix::zeros(rows, cols);
    {
        let (dh, dc) = (dh.data(), dc.data());
        let (f, i, o, z) = (c.f.data(), c.i.data(), c.o.data(), c.z.data());
        let (tc, cp) = (c.tanh_c.data(), c.c_prev.data());
        let (af, ai, ao, az) = (
            da_f.data_mut(),
            da_i.data_mut(),
            da_o.data_mut(),
            da_z.data_mut(),
        );
        let dcp = dc_prev.data_mut();
        for k in 0..n {
            let d_o = dh[k] * tc[k];
            let dct = dc[k] + dh[k] * o[k] * (1.0 - tc[k] * tc[k]);
            let d_i = dct * z[k];
            let d_z = dct * i[k];
            let d_f = dct * cp[k];
            dcp[k] = dct * f[k];
            af[k] = d_f * f[k] * (1.0 - f[k]);
            ai[k] = d_i * i[k] * (1.0 - i[k]);
            ao[k] = d_o * o[k] * (1.0 - o[k]);
            az[k] = d_z * (1.0 - z[k] * z[k]);
        }
    }
    let gates = [
        (&da_f, &p.w_f, &p.u_f),
        (&da_i, &p.w_i, &p.u_i),
        (&da_o, &p.w_o, &p.u_o),
        (&da_z, &p.w_z, &p.u_z),
    ];
    let grad_bufs = [
        (&mut g.w_f, &mut g.u_f, &mut g.b_f),
        (&mut g.w_i, &mut g.u_i, &mut g.b_i),
        (&mut g.w_o, &mut g.u_o, &mut g.b_o),
        (&mut g.w_z, &mut g.u_z, &mut g.b_z),
    ];
    let mut dh_prev = Matrix::zeros(rows, cols);
    let mut dx = Matrix::zeros(rows, c.x.cols());
    for ((da, w, u), (gw, gu, gb)) in gates.into_iter().zip(grad_bufs) {
        mul_atb_acc(da, &c.h_prev, gw);
        mul_atb_acc(da, &c.x, gu);
        add_col_sums(da, gb.as_mut_slice());
        if need_prev {
            mul_ab_acc(da, w, &mut dh_prev);
        }
        mul_ab_acc(da, u, &mut dx);
    }
    if !need_prev {
        dc_prev.fill(0.0);
    }
    (
        LayerAdjoint {
            dh: dh_prev,
            dc: Some(dc_prev),
        },
        dx,
    )
}

/// Adds `row_scale[r] · ∂L_t/∂(top h)` of one step to the adjoint, and the
/// matching output-head gradient to `grads`.
fn seed_loss(
    model: &ModelParams,
    record: &StepRecord,
    row_scale: &[f64],
    adj: &mut AdjointState,
    grads: &mut ModelParams,
) {
    let mut dlogits = record.dlogits.clone();
    for (r, &s) in row_scale.iter().enumerate() {
        dlogits.row_mut(r).iter_mut().for_each(|v| *v *= s);
    }
    mul_atb_acc(&dlogits, record.top_h(), &mut grads.out_w);
    add_col_sums(&dlogits, grads.out_b.as_mut_slice());
    let top = adj.layers.last_mut().expect("at least one layer");
    mul_ab_acc(&dlogits, &model.out_w, &mut top.dh);
}

/// Vector–Jacobian product through one full stacked step.
///
/// `adj` is the adjoint of the state produced by this step; the return
/// value is the adjoint of the state it consumed. Parameter gradients of
/// the step (all layers plus the embedding rows it read) go into `grads`.
pub fn vjp_step(
    model: &ModelParams,
    record: &StepRecord,
    adj: &AdjointState,
    grads: &mut GradAccumulator,
    need_prev: bool,
) -> Result<AdjointState> {
    if adj.layers.len() != model.layers.len() || record.layers.len() != model.layers.len() {
        return Err(Error::shape("adjoint or tape entry has the wrong layer count"));
    }
    let mut prev = Vec::with_capacity(model.layers.len());
    // adjoint flowing from layer l+1's input into layer l's output, same step
    let mut from_above: Option<Matrix> = None;
    for l in (0..model.layers.len()).rev() {
        let mut incoming = adj.layers[l].clone();
        if let Some(extra) = from_above.take() {
            incoming
                .dh
                .data_mut()
                .iter_mut()
                .zip(extra.data())
                .for_each(|(a, b)| *a += b);
        }
        let (p, dx) = cell_vjp(
            &model.layers[l],
            &record.layers[l],
            &incoming,
            &mut grads.grads.layers[l],
            need_prev,
        )?;
        prev.push(p);
        from_above = Some(dx);
    }
    prev.reverse();
    let dx = from_above.expect("at least one layer");
    for (r, &tok) in record.tokens.iter().enumerate() {
        grads
            .grads
            .embedding
            .row_mut(tok)
            .iter_mut()
            .zip(dx.row(r))
            .for_each(|(g, d)| *g += d);
    }
    Ok(AdjointState { layers: prev })
}

/// Shared backward sweep. `row_scale` weights each batch row's losses;
/// `observe(k, b_k)` sees the state adjoint at every lag `0..=K1` that
/// exists (lag `n` is the initial state of an `n`-step tape).
pub fn backward_sweep(
    model: &ModelParams,
    tape: &Tape,
    k1: usize,
    k2: usize,
    row_scale: &[f64],
    mut observe: impl FnMut(usize, &AdjointState),
) -> Result<GradAccumulator> {
    let n = tape.len();
    if k2 == 0 || k2 > k1 {
        return Err(Error::invalid(format!("need 1 <= K2 <= K1, got K1={k1}, K2={k2}")));
    }
    if n < k1 || n == 0 {
        return Err(Error::invalid(format!(
            "window of {n} steps is too short for K1={k1}"
        )));
    }
    if row_scale.len() != tape.batch() {
        return Err(Error::shape("row scale length differs from batch size"));
    }
    let mut grads = GradAccumulator::zeros_like(model);
    let mut adj = AdjointState::zeros(model, tape.batch());
    let s = n - 1;
    for k in 0..=k1 {
        if k > s {
            // lag n: adjoint of the window's initial state, no parameters
            observe(k, &adj);
            break;
        }
        let record = &tape.steps[s - k];
        if k < k2 {
            seed_loss(model, record, row_scale, &mut adj, &mut grads.grads);
        }
        observe(k, &adj);
        adj = vjp_step(model, record, &adj, &mut grads, k < k1)?;
    }
    Ok(grads)
}

/// `BPTT(K1, K2)`: the last `K2` losses of the window, each backpropagated
/// until lag `K1` from the newest step, normalised by `1/K2` and averaged
/// over batch rows.
pub fn bptt(model: &ModelParams, tape: &Tape, k1: usize, k2: usize) -> Result<GradAccumulator> {
    let b = tape.batch();
    let scale = vec![1.0 / (k2 as f64 * b as f64); b];
    backward_sweep(model, tape, k1, k2, &scale, |_, _| {})
}

/// Single-loss gradient of the newest step truncated after `K` lags.
pub fn truncated_gradient(model: &ModelParams, tape: &Tape, k: usize) -> Result<GradAccumulator> {
    bptt(model, tape, k, 1)
}

/// Norms `φ[s][k] = ‖∂L_s/∂h_{s−k}‖` for sampled loss positions.
#[derive(Clone, Debug, PartialEq)]
pub struct GradNormProfile {
    /// One row per sampled position, `R + 1` lags each.
    pub samples: Vec<Vec<f64>>,
    pub window: usize,
    /// Loss position `s` of each row in the source sequence.
    pub positions: Vec<usize>,
}

impl GradNormProfile {
    pub fn new(samples: Vec<Vec<f64>>, window: usize) -> Result<Self> {
        if samples.iter().any(|r| r.len() != window + 1) {
            return Err(Error::shape("profile rows must have R+1 lags"));
        }
        if samples.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("profile entries must be finite and nonnegative"));
        }
        let positions = (0..samples.len()).collect();
        Ok(Self {
            samples,
            window,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sample_index", "lag", "phi"])?;
        for (i, row) in self.samples.iter().enumerate() {
            for (k, phi) in row.iter().enumerate() {
                w.write_record([i.to_string(), k.to_string(), phi.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Burn-in steps run before the `R` profiled lags; equal to `R`.
pub fn profile_burn_in(window: usize) -> usize {
    window
}

/// Gradient-norm profile over lags `0..=R` for each position in `positions`.
///
/// Every position `s` gets a fresh forward pass from the zero state over
/// steps `s−2R+1 ..= s` (burn-in of `R`), then a `BPTT(R, 1)` sweep from the
/// loss at `s`. Rows are batched through one pass. `loss_weights`, when
/// given, scales each position's loss.
pub fn grad_norm_profile(
    model: &ModelParams,
    inputs: &[usize],
    targets: &[usize],
    positions: &[usize],
    window: usize,
    loss_weights: Option<&[f64]>,
) -> Result<GradNormProfile> {
    if positions.is_empty() {
        return Err(Error::invalid("no positions to profile"));
    }
    if window == 0 {
        return Err(Error::invalid("profiling window R must be positive"));
    }
    if inputs.len() != targets.len() {
        return Err(Error::invalid("inputs and targets differ in length"));
    }
    let span = window + profile_burn_in(window);
    for &s in positions {
        if s + 1 < span || s >= inputs.len() {
            return Err(Error::invalid(format!(
                "position {s} lacks {span} steps of history in a sequence of {}",
                inputs.len()
            )));
        }
    }
    let weights = match loss_weights {
        Some(w) if w.len() != positions.len() => {
            return Err(Error::shape("one loss weight per profiled position"))
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; positions.len()],
    };
    let tw = TokenWindow {
        inputs: (0..span)
            .map(|j| positions.iter().map(|&s| inputs[s + 1 - span + j]).collect())
            .collect(),
        targets: (0..span)
            .map(|j| positions.iter().map(|&s| targets[s + 1 - span + j]).collect())
            .collect(),
    };
    let out = forward_window(&tw, &model.zero_state(positions.len()), model)?;
    let mut samples = vec![vec![0.0; window + 1]; positions.len()];
    backward_sweep(model, &out.tape, window, 1, &weights, |k, adj| {
        for (r, phi) in adj.row_norms().into_iter().enumerate() {
            samples[r][k] = phi;
        }
    })?;
    Ok(GradNormProfile {
        samples,
        window,
        positions: positions.to_vec(),
    })
}

/// Central differences `(f(x+εe) − f(x−εe)) / 2ε` per coordinate.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + eps;
            let plus = f(&work);
            work[i] = x[i] - eps;
            let minus = f(&work);
            work[i] = x[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Central-difference gradient of a loss over model parameters.
pub fn finite_diff_gradient(
    mut loss: impl FnMut(&ModelParams) -> Result<f64>,
    model: &ModelParams,
    eps: f64,
) -> Result<GradAccumulator> {
    let mut work = model.clone();
    let mut err = None;
    let flat = finite_diff(
        |x| {
            work.assign_flat(x).expect("same shape");
            match loss(&work) {
                Ok(v) => v,
                Err(e) => {
                    err.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &model.flatten(),
        eps,
    );
    if let Some(e) = err {
        return Err(e);
    }
    GradAccumulator::from_flat(model, &flat)
}

/// Largest norm over rows, a convenience for tests and diagnostics.
pub fn max_row_norm(m: &Matrix) -> f64 {
    (0..m.rows()).map(|r| euclid_norm(m.row(r))).fold(0.0, f64::max)
}
