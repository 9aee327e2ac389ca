//! Recurrent cells: simple RNN and LSTM, forward only.
//!
//! Steps are batched: every state or input is a matrix whose rows are
//! independent sequences. The single-vector entry points
//! [`simple_rnn_step`] and [`lstm_step`] wrap a batch of one.

use crate::error::{Error, Result};
use crate::numeric::{add_row_bias, mul_abt_acc, sigmoid, Matrix, Vector};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Linear cell; used by the nilpotent fixtures.
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

/// `h' = act(W h + U x + b)`
#[derive(Clone, Debug, PartialEq)]
pub struct SimpleRnnParams {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Vector,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_f: Matrix,
    pub w_i: Matrix,
    pub w_o: Matrix,
    pub w_z: Matrix,
    pub u_f: Matrix,
    pub u_i: Matrix,
    pub u_o: Matrix,
    pub u_z: Matrix,
    pub b_f: Vector,
    pub b_i: Vector,
    pub b_o: Vector,
    pub b_z: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellParams {
    Simple(SimpleRnnParams),
    Lstm(LstmParams),
}

fn check_dims(w: &Matrix, u: &Matrix, b: &Vector) -> Result<(usize, usize)> {
    let dh = w.rows();
    if w.cols() != dh || u.rows() != dh || b.dim() != dh {
        return Err(Error::shape(format!(
            "cell weights inconsistent: W {:?}, U {:?}, b {}",
            w.shape(),
            u.shape(),
            b.dim()
        )));
    }
    Ok((dh, u.cols()))
}

impl SimpleRnnParams {
    pub fn zeros(d_in: usize, d_h: usize, activation: Activation) -> Self {
        Self {
            w: Matrix::zeros(d_h, d_h),
            u: Matrix::zeros(d_h, d_in),
            b: Vector::zeros(d_h),
            activation,
        }
    }

    pub fn validate(&self) -> Result<(usize, usize)> {
        check_dims(&self.w, &self.u, &self.b)
    }
}

impl LstmParams {
    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        let w = || Matrix::zeros(d_h, d_h);
        let u = || Matrix::zeros(d_h, d_in);
        let b = || Vector::zeros(d_h);
        Self {
            w_f: w(),
            w_i: w(),
            w_o: w(),
            w_z: w(),
            u_f: u(),
            u_i: u(),
            u_o: u(),
            u_z: u(),
            b_f: b(),
            b_i: b(),
            b_o: b(),
            b_z: b(),
        }
    }

    pub fn validate(&self) -> Result<(usize, usize)> {
        let dims = check_dims(&self.w_f, &self.u_f, &self.b_f)?;
        for (w, u, b) in [
            (&self.w_i, &self.u_i, &self.b_i),
            (&self.w_o, &self.u_o, &self.b_o),
            (&self.w_z, &self.u_z, &self.b_z),
        ] {
            if check_dims(w, u, b)? != dims {
                return Err(Error::shape("LSTM gates disagree on dimensions"));
            }
        }
        Ok(dims)
    }
}

impl CellParams {
    pub fn hidden_dim(&self) -> usize {
        match self {
            CellParams::Simple(p) => p.w.rows(),
            CellParams::Lstm(p) => p.w_f.rows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            CellParams::Simple(p) => p.u.cols(),
            CellParams::Lstm(p) => p.u_f.cols(),
        }
    }

    pub fn is_lstm(&self) -> bool {
        matches!(self, CellParams::Lstm(_))
    }

    /// Width of this layer's recurrent state: `d_h`, or `2·d_h` for `(c, h)`.
    pub fn state_width(&self) -> usize {
        match self {
            CellParams::Simple(p) => p.w.rows(),
            CellParams::Lstm(p) => 2 * p.w_f.rows(),
        }
    }

    pub fn validate(&self) -> Result<(usize, usize)> {
        match self {
            CellParams::Simple(p) => p.validate(),
            CellParams::Lstm(p) => p.validate(),
        }
    }

    /// Uniform initialisation of all weights on `[-scale, scale]`, zero biases.
    pub fn init_uniform(&mut self, rng: &mut SeededRng, scale: f64) {
        let mut fill = |m: &mut Matrix| {
            m.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.uniform(-scale, scale))
        };
        match self {
            CellParams::Simple(p) => {
                fill(&mut p.w);
                fill(&mut p.u);
            }
            CellParams::Lstm(p) => {
                for m in [
                    &mut p.w_f, &mut p.w_i, &mut p.w_o, &mut p.w_z, &mut p.u_f, &mut p.u_i,
                    &mut p.u_o, &mut p.u_z,
                ] {
                    fill(m);
                }
            }
        }
    }

    pub(crate) fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        match self {
            CellParams::Simple(p) => {
                out.push((format!("{prefix}.W"), &p.w));
                out.push((format!("{prefix}.U"), &p.u));
            }
            CellParams::Lstm(p) => {
                for (n, m) in [
                    ("W_f", &p.w_f),
                    ("W_i", &p.w_i),
                    ("W_o", &p.w_o),
                    ("W_z", &p.w_z),
                    ("U_f", &p.u_f),
                    ("U_i", &p.u_i),
                    ("U_o", &p.u_o),
                    ("U_z", &p.u_z),
                ] {
                    out.push((format!("{prefix}.{n}"), m));
                }
            }
        }
    }

    pub(crate) fn biases<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vector)>) {
        match self {
            CellParams::Simple(p) => out.push((format!("{prefix}.b"), &p.b)),
            CellParams::Lstm(p) => {
                for (n, b) in [("b_f", &p.b_f), ("b_i", &p.b_i), ("b_o", &p.b_o), ("b_z", &p.b_z)] {
                    out.push((format!("{prefix}.{n}"), b));
                }
            }
        }
    }

    /// Every trainable buffer as a mutable slice, in the same order as
    /// `tensors` followed by `biases`.
    pub(crate) fn slices_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        match self {
            CellParams::Simple(p) => {
                out.push(p.w.data_mut());
                out.push(p.u.data_mut());
                out.push(p.b.as_mut_slice());
            }
            CellParams::Lstm(p) => {
                for m in [
                    &mut p.w_f, &mut p.w_i, &mut p.w_o, &mut p.w_z, &mut p.u_f, &mut p.u_i,
                    &mut p.u_o, &mut p.u_z,
                ] {
                    out.push(m.data_mut());
                }
                for b in [&mut p.b_f, &mut p.b_i, &mut p.b_o, &mut p.b_z] {
                    out.push(b.as_mut_slice());
                }
            }
        }
    }

    pub(crate) fn slices<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        match self {
            CellParams::Simple(p) => {
                out.push(p.w.data());
                out.push(p.u.data());
                out.push(p.b.as_slice());
            }
            CellParams::Lstm(p) => {
                for m in [
                    &p.w_f, &p.w_i, &p.w_o, &p.w_z, &p.u_f, &p.u_i, &p.u_o, &p.u_z,
                ] {
                    out.push(m.data());
                }
                for b in [&p.b_f, &p.b_i, &p.b_o, &p.b_z] {
                    out.push(b.as_slice());
                }
            }
        }
    }
}

/// One layer's recurrent state for a batch; `c` is present for LSTM layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub h: Matrix,
    pub c: Option<Matrix>,
}

impl LayerState {
    pub fn zeros(cell: &CellParams, batch: usize) -> Self {
        let d = cell.hidden_dim();
        Self {
            h: Matrix::zeros(batch, d),
            c: cell.is_lstm().then(|| Matrix::zeros(batch, d)),
        }
    }

    pub fn batch(&self) -> usize {
        self.h.rows()
    }
}

/// Values recorded by a simple RNN step for the backward pass.
#[derive(Clone, Debug)]
pub struct SimpleCache {
    pub x: Matrix,
    pub h_prev: Matrix,
    pub h: Matrix,
}

/// Values recorded by an LSTM step for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmCache {
    pub x: Matrix,
    pub h_prev: Matrix,
    pub c_prev: Matrix,
    pub f: Matrix,
    pub i: Matrix,
    pub o: Matrix,
    pub z: Matrix,
    pub c: Matrix,
    pub tanh_c: Matrix,
    pub h: Matrix,
}

#[derive(Clone, Debug)]
pub enum StepCache {
    Simple(SimpleCache),
    Lstm(LstmCache),
}

impl StepCache {
    pub fn h(&self) -> &Matrix {
        match self {
            StepCache::Simple(c) => &c.h,
            StepCache::Lstm(c) => &c.h,
        }
    }

    pub fn state(&self) -> LayerState {
        match self {
            StepCache::Simple(c) => LayerState {
                h: c.h.clone(),
                c: None,
            },
            StepCache::Lstm(c) => LayerState {
                h: c.h.clone(),
                c: Some(c.c.clone()),
            },
        }
    }
}

fn pre_activation(w: &Matrix, u: &Matrix, b: &Vector, h: &Matrix, x: &Matrix) -> Matrix {
    let mut a = Matrix::zeros(h.rows(), w.rows());
    mul_abt_acc(h, w, &mut a);
    mul_abt_acc(x, u, &mut a);
    add_row_bias(&mut a, b);
    a
}

fn check_batch(d_h: usize, d_in: usize, h: &Matrix, x: &Matrix) -> Result<()> {
    if h.cols() != d_h || x.cols() != d_in || h.rows() != x.rows() {
        return Err(Error::shape(format!(
            "step inputs h {:?}, x {:?} for cell d_h={d_h}, d_in={d_in}",
            h.shape(),
            x.shape()
        )));
    }
    Ok(())
}

impl SimpleRnnParams {
    pub fn step_batch(&self, h: &Matrix, x: &Matrix) -> Result<SimpleCache> {
        let (dh, din) = self.validate()?;
        check_batch(dh, din, h, x)?;
        let mut out = pre_activation(&self.w, &self.u, &self.b, h, x);
        if self.activation == Activation::Tanh {
            out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        }
        Ok(SimpleCache {
            x: x.clone(),
            h_prev: h.clone(),
            h: out,
        })
    }
}

impl LstmParams {
    pub fn step_batch(&self, c: &Matrix, h: &Matrix, x: &Matrix) -> Result<LstmCache> {
        let (dh, din) = self.validate()?;
        check_batch(dh, din, h, x)?;
        if c.shape() != h.shape() {
            return Err(Error::shape("LSTM cell state and hidden state differ in shape"));
        }
        let mut f = pre_activation(&self.w_f, &self.u_f, &self.b_f, h, x);
        let mut i = pre_activation(&self.w_i, &self.u_i, &self.b_i, h, x);
        let mut o = pre_activation(&self.w_o, &self.u_o, &self.b_o, h, x);
        let mut z = pre_activation(&self.w_z, &self.u_z, &self.b_z, h, x);
        f.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        i.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        o.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        z.data_mut().iter_mut().for_each(|v| *v = v.tanh());

        let n = c.data().len();
        let mut c_new = Matrix::zeros(c.rows(), c.cols());
        let mut tanh_c = Matrix::zeros(c.rows(), c.cols());
        let mut h_new = Matrix::zeros(c.rows(), c.cols());
        {
            let (fd, id, od, zd, cd) = (f.data(), i.data(), o.data(), z.data(), c.data());
            let cn = c_new.data_mut();
            for k in 0..n {
                cn[k] = id[k] * zd[k] + fd[k] * cd[k];
            }
            let tc = tanh_c.data_mut();
            for k in 0..n {
                tc[k] = cn[k].tanh();
            }
            let hn = h_new.data_mut();
            for k in 0..n {
                hn[k] = od[k] * tc[k];
            }
        }
        Ok(LstmCache {
            x: x.clone(),
            h_prev: h.clone(),
            c_prev: c.clone(),
            f,
            i,
            o,
            z,
            c: c_new,
            tanh_c,
            h: h_new,
        })
    }
}

impl CellParams {
    pub fn step_batch(&self, state: &LayerState, x: &Matrix) -> Result<StepCache> {
        match self {
            CellParams::Simple(p) => Ok(StepCache::Simple(p.step_batch(&state.h, x)?)),
            CellParams::Lstm(p) => {
                let c = state
                    .c
                    .as_ref()
                    .ok_or_else(|| Error::shape("LSTM layer given a state without a cell vector"))?;
                Ok(StepCache::Lstm(p.step_batch(c, &state.h, x)?))
            }
        }
    }
}

fn row_matrix(v: &[f64]) -> Matrix {
    Matrix::new(1, v.len(), v.to_vec()).expect("row matrix")
}

/// Single-sequence simple RNN step.
pub fn simple_rnn_step(h: &[f64], x: &[f64], p: &SimpleRnnParams) -> Result<(Vector, SimpleCache)> {
    let cache = p.step_batch(&row_matrix(h), &row_matrix(x))?;
    Ok((Vector(cache.h.row(0).to_vec()), cache))
}

/// Single-sequence LSTM step; returns `(c', h', cache)`.
pub fn lstm_step(
    c: &[f64],
    h: &[f64],
    x: &[f64],
    p: &LstmParams,
) -> Result<(Vector, Vector, LstmCache)> {
    let cache = p.step_batch(&row_matrix(c), &row_matrix(h), &row_matrix(x))?;
    Ok((
        Vector(cache.c.row(0).to_vec()),
        Vector(cache.h.row(0).to_vec()),
        cache,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_simple(rng: &mut SeededRng, d_in: usize, d_h: usize) -> SimpleRnnParams {
        let mut p = CellParams::Simple(SimpleRnnParams::zeros(d_in, d_h, Activation::Tanh));
        p.init_uniform(rng, 0.8);
        let CellParams::Simple(mut p) = p else { unreachable!() };
        p.b.as_mut_slice().iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
        p
    }

    fn random_lstm(rng: &mut SeededRng, d_in: usize, d_h: usize) -> LstmParams {
        let mut p = CellParams::Lstm(LstmParams::zeros(d_in, d_h));
        p.init_uniform(rng, 0.8);
        let CellParams::Lstm(mut p) = p else { unreachable!() };
        for b in [&mut p.b_f, &mut p.b_i, &mut p.b_o, &mut p.b_z] {
            b.as_mut_slice().iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
        }
        p
    }

    #[test]
    fn zero_simple_cell_maps_to_zero() {
        let p = SimpleRnnParams::zeros(2, 3, Activation::Tanh);
        let (h, _) = simple_rnn_step(&[0.3, -1.0, 2.0], &[1.0, 5.0], &p).unwrap();
        assert_eq!(h.0, vec![0.0; 3]);
    }

    #[test]
    fn nilpotent_step_from_zero_state() {
        let mut p = SimpleRnnParams::zeros(2, 2, Activation::Tanh);
        p.w = Matrix::from_rows(&[&[0.0, 3.0], &[0.0, 0.0]]).unwrap();
        assert_eq!(p.w.matmul(&p.w).unwrap(), Matrix::zeros(2, 2));
        p.u = Matrix::identity(2);
        let (h, _) = simple_rnn_step(&[0.0, 0.0], &[1.0, 0.0], &p).unwrap();
        assert_eq!(h.0, vec![1f64.tanh(), 0.0]);
    }

    #[test]
    fn simple_step_matches_scalar_loop() {
        let mut rng = SeededRng::new(21);
        let p = random_simple(&mut rng, 3, 3);
        let h: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (out, _) = simple_rnn_step(&h, &x, &p).unwrap();
        for i in 0..3 {
            let mut a = p.b[i];
            for j in 0..3 {
                a += p.w.get(i, j) * h[j] + p.u.get(i, j) * x[j];
            }
            assert!((out[i] - a.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lstm_halves_the_cell() {
        let p = LstmParams::zeros(2, 3);
        let (c, h, cache) = lstm_step(&[1.0; 3], &[0.7, 0.1, -0.3], &[1.0, 2.0], &p).unwrap();
        assert!(cache.f.data().iter().all(|&v| v == 0.5));
        assert!(cache.i.data().iter().all(|&v| v == 0.5));
        assert!(cache.o.data().iter().all(|&v| v == 0.5));
        assert!(cache.z.data().iter().all(|&v| v == 0.0));
        assert_eq!(c.0, vec![0.5; 3]);
        for v in h.iter() {
            assert!((v - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
        }
        let (c, h, _) = lstm_step(&[0.0; 3], &[0.0; 3], &[1.0, 2.0], &p).unwrap();
        assert_eq!(c.0, vec![0.0; 3]);
        assert_eq!(h.0, vec![0.0; 3]);
    }

    #[test]
    fn lstm_step_matches_scalar_loop() {
        let mut rng = SeededRng::new(8);
        let p = random_lstm(&mut rng, 2, 2);
        let c: Vec<f64> = (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let h: Vec<f64> = (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x: Vec<f64> = (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (c2, h2, _) = lstm_step(&c, &h, &x, &p).unwrap();
        let lin = |w: &Matrix, u: &Matrix, b: &Vector, r: usize| {
            let mut a = b[r];
            for j in 0..2 {
                a += w.get(r, j) * h[j] + u.get(r, j) * x[j];
            }
            a
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for r in 0..2 {
            let f = sig(lin(&p.w_f, &p.u_f, &p.b_f, r));
            let i = sig(lin(&p.w_i, &p.u_i, &p.b_i, r));
            let o = sig(lin(&p.w_o, &p.u_o, &p.b_o, r));
            let z = lin(&p.w_z, &p.u_z, &p.b_z, r).tanh();
            let cc = i * z + f * c[r];
            assert!((c2[r] - cc).abs() < 1e-12);
            assert!((h2[r] - o * cc.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_stay_in_open_intervals() {
        let mut rng = SeededRng::new(4);
        let p = random_lstm(&mut rng, 3, 4);
        let mut c = vec![0.0; 4];
        let mut h = vec![0.0; 4];
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let (c2, h2, cache) = lstm_step(&c, &h, &x, &p).unwrap();
            for g in [&cache.f, &cache.i, &cache.o] {
                assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
            assert!(cache.z.data().iter().all(|&v| v > -1.0 && v < 1.0));
            assert!(h2.iter().all(|&v| v > -1.0 && v < 1.0));
            c = c2.0;
            h = h2.0;
        }
    }

    #[test]
    fn contraction_in_hidden_state() {
        let mut rng = SeededRng::new(13);
        let mut p = random_simple(&mut rng, 3, 5);
        let lambda = 0.5;
        let norm = p.w.spectral_norm(500);
        p.w.scale(lambda / norm);
        let est = p.w.spectral_norm(500);
        assert!((est - lambda).abs() < 1e-9);
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let h1: Vec<f64> = (0..5).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let h2: Vec<f64> = (0..5).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let (a, _) = simple_rnn_step(&h1, &x, &p).unwrap();
            let (b, _) = simple_rnn_step(&h2, &x, &p).unwrap();
            let d_out: f64 = a.iter().zip(b.iter()).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            let d_in: f64 = h1.iter().zip(&h2).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            assert!(d_out <= est * d_in + 1e-12);
        }
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let p = SimpleRnnParams::zeros(2, 3, Activation::Tanh);
        assert!(simple_rnn_step(&[0.0; 2], &[0.0; 2], &p).is_err());
        let l = LstmParams::zeros(2, 3);
        assert!(lstm_step(&[0.0; 3], &[0.0; 3], &[0.0; 3], &l).is_err());
        let mut bad = LstmParams::zeros(2, 3);
        bad.b_o = Vector::zeros(2);
        assert!(bad.validate().is_err());
    }
}
