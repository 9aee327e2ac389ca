//! Stacked recurrent model: embedding → cells → linear head → softmax.

use crate::cells::{Activation, CellParams, LayerState, LstmParams, SimpleRnnParams, StepCache};
use crate::error::{Error, Result};
use crate::numeric::{add_row_bias, mul_abt_acc, softmax_xent_into, Matrix, Vector};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Simple(Activation),
    Lstm,
}

/// Shape of a model; enough to allocate its parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub vocab: usize,
    pub d_emb: usize,
    pub cell: CellKind,
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn lstm(vocab: usize, d_emb: usize, hidden: &[usize]) -> Self {
        Self {
            vocab,
            d_emb,
            cell: CellKind::Lstm,
            hidden: hidden.to_vec(),
        }
    }

    pub fn simple(vocab: usize, d_emb: usize, hidden: &[usize], act: Activation) -> Self {
        Self {
            vocab,
            d_emb,
            cell: CellKind::Simple(act),
            hidden: hidden.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `vocab × d_emb`; row `t` is the input vector of token `t`.
    pub embedding: Matrix,
    pub layers: Vec<CellParams>,
    /// `vocab × d_h(top)`
    pub out_w: Matrix,
    pub out_b: Vector,
}

impl ModelParams {
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        if arch.vocab == 0 || arch.d_emb == 0 || arch.hidden.is_empty() || arch.hidden.contains(&0)
        {
            return Err(Error::invalid(format!("degenerate architecture {arch:?}")));
        }
        let mut layers = Vec::with_capacity(arch.hidden.len());
        let mut d_in = arch.d_emb;
        for &d_h in &arch.hidden {
            layers.push(match arch.cell {
                CellKind::Simple(act) => CellParams::Simple(SimpleRnnParams::zeros(d_in, d_h, act)),
                CellKind::Lstm => CellParams::Lstm(LstmParams::zeros(d_in, d_h)),
            });
            d_in = d_h;
        }
        Ok(Self {
            embedding: Matrix::zeros(arch.vocab, arch.d_emb),
            layers,
            out_w: Matrix::zeros(arch.vocab, d_in),
            out_b: Vector::zeros(arch.vocab),
        })
    }

    /// Embedding rows standard normal; every recurrent and output weight and
    /// bias uniform on `±1/√fan`, with fan the layer's hidden (or input) width.
    pub fn init(arch: &Architecture, rng: &mut SeededRng) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        p.embedding.data_mut().iter_mut().for_each(|v| *v = rng.normal());
        for layer in &mut p.layers {
            let r = 1.0 / (layer.hidden_dim() as f64).sqrt();
            let mut slices = Vec::new();
            layer.slices_mut(&mut slices);
            for s in slices {
                s.iter_mut().for_each(|v| *v = rng.uniform(-r, r));
            }
        }
        let r = 1.0 / (p.out_w.cols() as f64).sqrt();
        p.out_w.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-r, r));
        p.out_b.0.iter_mut().for_each(|v| *v = rng.uniform(-r, r));
        Ok(p)
    }

    /// Embedding and weights uniform on `±scale`, biases zero.
    pub fn init_with_scale(arch: &Architecture, rng: &mut SeededRng, scale: f64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        p.embedding
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.uniform(-scale, scale));
        for layer in &mut p.layers {
            layer.init_uniform(rng, scale);
        }
        p.out_w
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.uniform(-scale, scale));
        Ok(p)
    }

    pub fn architecture(&self) -> Architecture {
        let cell = match &self.layers[0] {
            CellParams::Simple(p) => CellKind::Simple(p.activation),
            CellParams::Lstm(_) => CellKind::Lstm,
        };
        Architecture {
            vocab: self.vocab(),
            d_emb: self.embedding.cols(),
            cell,
            hidden: self.layers.iter().map(|l| l.hidden_dim()).collect(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape("model has no recurrent layers"));
        }
        let mut d_in = self.embedding.cols();
        for (l, layer) in self.layers.iter().enumerate() {
            let (d_h, layer_in) = layer.validate()?;
            if layer_in != d_in {
                return Err(Error::shape(format!(
                    "layer {l} expects input dim {layer_in}, previous layer gives {d_in}"
                )));
            }
            d_in = d_h;
        }
        if self.out_w.shape() != (self.vocab(), d_in) || self.out_b.dim() != self.vocab() {
            return Err(Error::shape("output head does not match vocab and top hidden dim"));
        }
        Ok(())
    }

    /// Names and shapes of every trainable buffer, in canonical order.
    pub fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("embedding".to_string(), vec![self.embedding.rows(), self.embedding.cols()])];
        for (l, layer) in self.layers.iter().enumerate() {
            let prefix = format!("layer{l}");
            let mut mats = Vec::new();
            layer.tensors(&prefix, &mut mats);
            out.extend(mats.into_iter().map(|(n, m)| (n, vec![m.rows(), m.cols()])));
            let mut bs = Vec::new();
            layer.biases(&prefix, &mut bs);
            out.extend(bs.into_iter().map(|(n, b)| (n, vec![b.dim()])));
        }
        out.push(("output.W".to_string(), vec![self.out_w.rows(), self.out_w.cols()]));
        out.push(("output.b".to_string(), vec![self.out_b.dim()]));
        out
    }

    /// Every trainable buffer, same order as [`ModelParams::named_shapes`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.embedding.data()];
        for layer in &self.layers {
            layer.slices(&mut out);
        }
        out.push(self.out_w.data());
        out.push(self.out_b.as_slice());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.embedding.data_mut()];
        for layer in &mut self.layers {
            layer.slices_mut(&mut out);
        }
        out.push(self.out_w.data_mut());
        out.push(self.out_b.as_mut_slice());
        out
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// All parameters concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "flat vector of {} for model with {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        Ok(())
    }

    pub fn zero_state(&self, batch: usize) -> HiddenStates {
        HiddenStates {
            layers: self.layers.iter().map(|l| LayerState::zeros(l, batch)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Width of the concatenated recurrent state over all layers.
    pub fn state_width(&self) -> usize {
        self.layers.iter().map(|l| l.state_width()).sum()
    }
}

/// Recurrent state of every layer for a batch of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub layers: Vec<LayerState>,
}

impl HiddenStates {
    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, |l| l.batch())
    }

    /// Keep only the given batch rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> HiddenStates {
        let pick = |m: &Matrix| {
            Matrix::from_fn(rows.len(), m.cols(), |r, j| m.get(rows[r], j))
        };
        HiddenStates {
            layers: self
                .layers
                .iter()
                .map(|l| LayerState {
                    h: pick(&l.h),
                    c: l.c.as_ref().map(pick),
                })
                .collect(),
        }
    }

    pub fn check_against(&self, model: &ModelParams) -> Result<()> {
        if self.layers.len() != model.layers.len() {
            return Err(Error::shape("state layer count differs from model"));
        }
        let batch = self.batch();
        for (s, l) in self.layers.iter().zip(&model.layers) {
            let d = l.hidden_dim();
            let ok = s.h.shape() == (batch, d)
                && match (&s.c, l.is_lstm()) {
                    (Some(c), true) => c.shape() == (batch, d),
                    (None, false) => true,
                    _ => false,
                };
            if !ok {
                return Err(Error::shape("hidden state does not match layer dimensions"));
            }
        }
        Ok(())
    }
}

/// Token ids for a window, time-major: `inputs[t][row]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenWindow {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl TokenWindow {
    /// A single sequence as a batch of one.
    pub fn single(inputs: &[usize], targets: &[usize]) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self {
            inputs: inputs.iter().map(|&t| vec![t]).collect(),
            targets: targets.iter().map(|&t| vec![t]).collect(),
        })
    }

    /// Rows are `streams[r][range]` for every stream.
    pub fn from_streams(
        inputs: &[&[usize]],
        targets: &[&[usize]],
        range: std::ops::Range<usize>,
    ) -> Self {
        let col = |src: &[&[usize]], t: usize| src.iter().map(|s| s[t]).collect::<Vec<_>>();
        Self {
            inputs: range.clone().map(|t| col(inputs, t)).collect(),
            targets: range.map(|t| col(targets, t)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.inputs.first().map_or(0, |r| r.len())
    }

    fn validate(&self, vocab: usize, batch: usize) -> Result<()> {
        if self.inputs.len() != self.targets.len() {
            return Err(Error::invalid(format!(
                "{} input steps but {} target steps",
                self.inputs.len(),
                self.targets.len()
            )));
        }
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            if x.len() != batch || y.len() != batch {
                return Err(Error::shape("token rows do not match the state batch size"));
            }
            if let Some(&bad) = x.iter().chain(y).find(|&&t| t >= vocab) {
                return Err(Error::invalid(format!("token id {bad} >= vocab {vocab}")));
            }
        }
        Ok(())
    }
}

/// Everything the backward pass needs from one forward time step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub tokens: Vec<usize>,
    pub layers: Vec<StepCache>,
    /// `softmax(logits) − onehot(target)` for each batch row, unscaled.
    pub dlogits: Matrix,
    /// Cross-entropy per batch row.
    pub row_losses: Vec<f64>,
}

impl StepRecord {
    pub fn top_h(&self) -> &Matrix {
        self.layers.last().expect("at least one layer").h()
    }

    /// Batch-mean loss at this step.
    pub fn loss(&self) -> f64 {
        self.row_losses.iter().sum::<f64>() / self.row_losses.len() as f64
    }
}

/// Forward record of a window, one entry per step.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    pub steps: Vec<StepRecord>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.steps.first().map_or(0, |s| s.row_losses.len())
    }

    /// Batch-mean loss per step.
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(StepRecord::loss).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub tape: Tape,
    pub final_state: HiddenStates,
}

impl ForwardOutput {
    pub fn losses(&self) -> Vec<f64> {
        self.tape.losses()
    }
}

fn embed(model: &ModelParams, tokens: &[usize]) -> Matrix {
    let d = model.embedding.cols();
    let mut x = Matrix::zeros(tokens.len(), d);
    for (r, &t) in tokens.iter().enumerate() {
        x.row_mut(r).copy_from_slice(model.embedding.row(t));
    }
    x
}

fn head(model: &ModelParams, h: &Matrix, targets: &[usize]) -> Result<(Matrix, Vec<f64>)> {
    let mut logits = Matrix::zeros(h.rows(), model.vocab());
    mul_abt_acc(h, &model.out_w, &mut logits);
    add_row_bias(&mut logits, &model.out_b);
    let mut dlogits = Matrix::zeros(h.rows(), model.vocab());
    let mut losses = Vec::with_capacity(h.rows());
    for (r, &y) in targets.iter().enumerate() {
        let loss = softmax_xent_into(logits.row(r), y, dlogits.row_mut(r))?;
        losses.push(loss);
    }
    Ok((dlogits, losses))
}

/// Runs the model over a window from `h0`, recording a tape.
pub fn forward_window(
    window: &TokenWindow,
    h0: &HiddenStates,
    model: &ModelParams,
) -> Result<ForwardOutput> {
    model.validate()?;
    h0.check_against(model)?;
    window.validate(model.vocab(), h0.batch())?;

    let mut state = h0.clone();
    let mut steps = Vec::with_capacity(window.len());
    for (x_tok, y_tok) in window.inputs.iter().zip(&window.targets) {
        let mut x = embed(model, x_tok);
        let mut caches = Vec::with_capacity(model.layers.len());
        for (l, layer) in model.layers.iter().enumerate() {
            let cache = layer.step_batch(&state.layers[l], &x)?;
            x = cache.h().clone();
            state.layers[l] = cache.state();
            caches.push(cache);
        }
        let (dlogits, row_losses) = head(model, &x, y_tok)?;
        if row_losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("loss in forward pass".into()));
        }
        steps.push(StepRecord {
            tokens: x_tok.clone(),
            layers: caches,
            dlogits,
            row_losses,
        });
    }
    Ok(ForwardOutput {
        tape: Tape { steps },
        final_state: state,
    })
}

/// Forward pass that keeps only per-step batch-mean losses and the final state.
pub fn forward_losses(
    window: &TokenWindow,
    h0: &HiddenStates,
    model: &ModelParams,
) -> Result<(Vec<f64>, HiddenStates)> {
    model.validate()?;
    h0.check_against(model)?;
    window.validate(model.vocab(), h0.batch())?;
    let mut state = h0.clone();
    let mut losses = Vec::with_capacity(window.len());
    for (x_tok, y_tok) in window.inputs.iter().zip(&window.targets) {
        let mut x = embed(model, x_tok);
        for (l, layer) in model.layers.iter().enumerate() {
            let cache = layer.step_batch(&state.layers[l], &x)?;
            state.layers[l] = cache.state();
            x = match cache {
                StepCache::Simple(c) => c.h,
                StepCache::Lstm(c) => c.h,
            };
        }
        let (_, row_losses) = head(model, &x, y_tok)?;
        let mean = row_losses.iter().sum::<f64>() / row_losses.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("loss in forward pass".into()));
        }
        losses.push(mean);
    }
    Ok((losses, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::lstm_step;
    use crate::numeric::softmax_xent;

    fn tokens(rng: &mut SeededRng, n: usize, vocab: usize) -> Vec<usize> {
        (0..n).map(|_| rng.below(vocab as u64) as usize).collect()
    }

    #[test]
    fn zero_model_predicts_uniform() {
        let arch = Architecture::lstm(7, 3, &[4, 4]);
        let model = ModelParams::zeros(&arch).unwrap();
        let mut rng = SeededRng::new(1);
        let x = tokens(&mut rng, 9, 7);
        let y = tokens(&mut rng, 9, 7);
        let out = forward_window(&TokenWindow::single(&x, &y).unwrap(), &model.zero_state(1), &model)
            .unwrap();
        for l in out.losses() {
            assert!((l - 7f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_equals_manual_composition() {
        let arch = Architecture::lstm(5, 3, &[4]);
        let mut rng = SeededRng::new(2);
        let model = ModelParams::init_with_scale(&arch, &mut rng, 0.5).unwrap();
        let out = forward_window(&TokenWindow::single(&[3], &[1]).unwrap(), &model.zero_state(1), &model)
            .unwrap();
        let CellParams::Lstm(p) = &model.layers[0] else { unreachable!() };
        let (_, h, _) = lstm_step(&[0.0; 4], &[0.0; 4], model.embedding.row(3), p).unwrap();
        let logits = crate::numeric::affine(&model.out_w, &h, &model.out_b).unwrap();
        let (loss, _) = softmax_xent(&logits, 1).unwrap();
        assert!((out.losses()[0] - loss).abs() < 1e-12);
    }

    #[test]
    fn carryover_matches_unsplit_pass() {
        let arch = Architecture::lstm(6, 3, &[5, 4]);
        let mut rng = SeededRng::new(3);
        let model = ModelParams::init_with_scale(&arch, &mut rng, 0.4).unwrap();
        let k = 7;
        let x = tokens(&mut rng, 2 * k, 6);
        let y = tokens(&mut rng, 2 * k, 6);
        let full = forward_window(&TokenWindow::single(&x, &y).unwrap(), &model.zero_state(1), &model)
            .unwrap();
        for split in [1, k, 2 * k - 1] {
            let a = forward_window(
                &TokenWindow::single(&x[..split], &y[..split]).unwrap(),
                &model.zero_state(1),
                &model,
            )
            .unwrap();
            let b = forward_window(
                &TokenWindow::single(&x[split..], &y[split..]).unwrap(),
                &a.final_state,
                &model,
            )
            .unwrap();
            let joined: Vec<f64> = a.losses().into_iter().chain(b.losses()).collect();
            for (u, v) in joined.iter().zip(full.losses()) {
                assert!((u - v).abs() <= 1e-12);
            }
            assert_eq!(b.final_state, full.final_state);
        }
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let model = ModelParams::zeros(&Architecture::lstm(4, 2, &[3])).unwrap();
        let err = forward_window(
            &TokenWindow::single(&[0, 4], &[1, 1]).unwrap(),
            &model.zero_state(1),
            &model,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        assert!(TokenWindow::single(&[0, 1], &[1]).is_err());
    }

    #[test]
    fn forward_losses_agrees_with_taped_pass() {
        let arch = Architecture::simple(5, 2, &[3, 3], Activation::Tanh);
        let mut rng = SeededRng::new(9);
        let model = ModelParams::init_with_scale(&arch, &mut rng, 0.7).unwrap();
        let x = tokens(&mut rng, 12, 5);
        let y = tokens(&mut rng, 12, 5);
        let w = TokenWindow::single(&x, &y).unwrap();
        let taped = forward_window(&w, &model.zero_state(1), &model).unwrap();
        let (losses, fin) = forward_losses(&w, &model.zero_state(1), &model).unwrap();
        assert_eq!(losses, taped.losses());
        assert_eq!(fin, taped.final_state);
    }

    #[test]
    fn flat_roundtrip() {
        let arch = Architecture::lstm(5, 3, &[4, 2]);
        let mut rng = SeededRng::new(4);
        let model = ModelParams::init(&arch, &mut rng).unwrap();
        let flat = model.flatten();
        assert_eq!(flat.len(), model.num_params());
        let mut other = ModelParams::zeros(&arch).unwrap();
        other.assign_flat(&flat).unwrap();
        assert_eq!(other, model);
        let shapes = model.named_shapes();
        let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert_eq!(total, model.num_params());
        assert_eq!(model.architecture(), arch);
    }
}
