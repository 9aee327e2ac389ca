//! Dense row-major linear algebra, nonlinearities and loss kernels.
//!
//! Everything is `f64`. The batched kernels (`*_acc`) treat the rows of the
//! left operand as independent samples, which is how the recurrent layers
//! push a whole minibatch of streams through one time step.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `A·x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(Error::shape(format!(
                "matvec: {}x{} times vector of dim {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok(Vector(
            (0..self.rows).map(|i| dot(self.row(i), x)).collect(),
        ))
    }

    /// `A·B`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        mul_ab_acc(self, other, &mut out);
        Ok(out)
    }

    /// Frobenius norm.
    pub fn frobenius(&self) -> f64 {
        euclid_norm(&self.data)
    }

    /// Largest singular value, estimated by power iteration on `AᵀA`.
    pub fn spectral_norm(&self, iters: usize) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let mut v = vec![1.0 / (self.cols as f64).sqrt(); self.cols];
        // a fixed non-symmetric start avoids starting orthogonal to the top vector
        for (j, x) in v.iter_mut().enumerate() {
            *x += 1e-3 * (j as f64 + 1.0);
        }
        let n0 = euclid_norm(&v);
        v.iter_mut().for_each(|x| *x /= n0);
        for _ in 0..iters {
            let av: Vec<f64> = (0..self.rows).map(|i| dot(self.row(i), &v)).collect();
            let mut atav = vec![0.0; self.cols];
            for (i, &a) in av.iter().enumerate() {
                axpy(a, self.row(i), &mut atav);
            }
            let n = euclid_norm(&atav);
            if n == 0.0 {
                return 0.0;
            }
            v.iter_mut().zip(&atav).for_each(|(x, y)| *x = y / n);
        }
        // ‖A v‖ for the unit vector v
        let av: Vec<f64> = (0..self.rows).map(|i| dot(self.row(i), &v)).collect();
        euclid_norm(&av)
    }
}

/// A dense vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn norm(&self) -> f64 {
        euclid_norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl std::ops::Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `A·x + b`.
pub fn affine(a: &Matrix, x: &[f64], b: &[f64]) -> Result<Vector> {
    if b.len() != a.rows() {
        return Err(Error::shape(format!(
            "affine: bias of dim {} for {} rows",
            b.len(),
            a.rows()
        )));
    }
    let mut y = a.matvec(x)?;
    y.0.iter_mut().zip(b).for_each(|(y, b)| *y += b);
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Sigmoid,
    Tanh,
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn elementwise(f: Nonlinearity, x: &[f64]) -> Vector {
    Vector(match f {
        Nonlinearity::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
        Nonlinearity::Tanh => x.iter().map(|v| v.tanh()).collect(),
    })
}

pub fn sigmoid_in_place(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = sigmoid(*v));
}

pub fn tanh_in_place(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.tanh());
}

/// `log Σ exp(x)`, shifted by the maximum.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = x.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Softmax cross-entropy against a class index; returns the loss and
/// `softmax(logits) − onehot(target)`.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<(f64, Vector)> {
    let mut grad = vec![0.0; logits.len()];
    let loss = softmax_xent_into(logits, target, &mut grad)?;
    Ok((loss, Vector(grad)))
}

/// As [`softmax_xent`], writing the gradient into `grad`.
pub fn softmax_xent_into(logits: &[f64], target: usize, grad: &mut [f64]) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target class {target} out of range for {} logits",
            logits.len()
        )));
    }
    let lse = log_sum_exp(logits);
    for (g, &l) in grad.iter_mut().zip(logits) {
        *g = (l - lse).exp();
    }
    grad[target] -= 1.0;
    Ok(lse - logits[target])
}

#[inline]
pub fn euclid_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha·x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// `out += A·Wᵀ` with `A: n×k`, `W: m×k`, `out: n×m`.
pub fn mul_abt_acc(a: &Matrix, w: &Matrix, out: &mut Matrix) {
    assert_eq!(a.cols, w.cols, "mul_abt_acc inner dims");
    assert_eq!(out.shape(), (a.rows, w.rows), "mul_abt_acc output shape");
    for r in 0..a.rows {
        let ar = a.row(r);
        let orow = &mut out.data[r * w.rows..(r + 1) * w.rows];
        for (i, o) in orow.iter_mut().enumerate() {
            *o += dot(ar, w.row(i));
        }
    }
}

/// `out += A·W` with `A: n×m`, `W: m×k`, `out: n×k`.
pub fn mul_ab_acc(a: &Matrix, w: &Matrix, out: &mut Matrix) {
    assert_eq!(a.cols, w.rows, "mul_ab_acc inner dims");
    assert_eq!(out.shape(), (a.rows, w.cols), "mul_ab_acc output shape");
    let k = w.cols;
    for r in 0..a.rows {
        let orow = &mut out.data[r * k..(r + 1) * k];
        for (i, &av) in a.data[r * a.cols..(r + 1) * a.cols].iter().enumerate() {
            if av != 0.0 {
                axpy(av, w.row(i), orow);
            }
        }
    }
}

/// `out += Aᵀ·X` with `A: n×m`, `X: n×k`, `out: m×k`.
pub fn mul_atb_acc(a: &Matrix, x: &Matrix, out: &mut Matrix) {
    assert_eq!(a.rows, x.rows, "mul_atb_acc inner dims");
    assert_eq!(out.shape(), (a.cols, x.cols), "mul_atb_acc output shape");
    let k = x.cols;
    for r in 0..a.rows {
        let xr = x.row(r);
        for (i, &av) in a.row(r).iter().enumerate() {
            if av != 0.0 {
                axpy(av, xr, &mut out.data[i * k..(i + 1) * k]);
            }
        }
    }
}

/// Adds `b` to every row of `out`.
pub fn add_row_bias(out: &mut Matrix, b: &[f64]) {
    assert_eq!(out.cols, b.len());
    for r in 0..out.rows {
        out.row_mut(r).iter_mut().zip(b).for_each(|(o, b)| *o += b);
    }
}

/// `out += Σ_rows A`.
pub fn add_col_sums(a: &Matrix, out: &mut [f64]) {
    assert_eq!(a.cols, out.len());
    for r in 0..a.rows {
        out.iter_mut().zip(a.row(r)).for_each(|(o, v)| *o += v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn random_matrix(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn affine_examples() {
        let y = affine(&Matrix::identity(2), &[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(y.0, vec![1.0, 2.0]);
        let y = affine(&Matrix::zeros(2, 2), &[7.0, -9.0], &[3.0, 4.0]).unwrap();
        assert_eq!(y.0, vec![3.0, 4.0]);
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let y = affine(&a, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(y.0, vec![3.0, 7.0]);
    }

    #[test]
    fn affine_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(
            affine(&a, &[1.0, 2.0], &[0.0, 0.0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            affine(&a, &[1.0, 2.0, 3.0], &[0.0]),
            Err(Error::Shape(_))
        ));
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(elementwise(Nonlinearity::Sigmoid, &[0.0]).0, vec![0.5]);
        assert_eq!(elementwise(Nonlinearity::Tanh, &[0.0]).0, vec![0.0]);
        let s = elementwise(Nonlinearity::Sigmoid, &[20.0, -20.0]);
        assert!((s[0] - 1.0).abs() < 1e-8);
        assert!(s[1].abs() < 1e-8);
        // closed form 1/(1+e^-20)
        assert!((s[0] - 1.0 / (1.0 + (-20.0f64).exp())).abs() < 1e-15);
        let big = elementwise(Nonlinearity::Sigmoid, &[-800.0, 800.0]);
        assert!(big.is_finite());
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let (loss, g) = softmax_xent(&[0.3; 7], 4).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);

        let mut logits = vec![0.0; 5];
        logits[2] = 1e6;
        let (loss, _) = softmax_xent(&logits, 2).unwrap();
        assert!(loss.abs() < 1e-12);

        assert!(matches!(
            softmax_xent(&[0.0, 1.0], 2),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn softmax_gradient_matches_central_differences() {
        let mut rng = SeededRng::new(11);
        let logits: Vec<f64> = (0..5).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let (_, g) = softmax_xent(&logits, 2).unwrap();
        let eps = 1e-5;
        for i in 0..5 {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p[i] += eps;
            m[i] -= eps;
            let fd = (softmax_xent(&p, 2).unwrap().0 - softmax_xent(&m, 2).unwrap().0) / (2.0 * eps);
            let rel = (fd - g[i]).abs() / g[i].abs().max(fd.abs());
            assert!(rel <= 1e-7, "coordinate {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn norm_examples() {
        assert_eq!(euclid_norm(&[]), 0.0);
        assert_eq!(euclid_norm(&[0.0, 0.0]), 0.0);
        assert_eq!(euclid_norm(&[3.0, 4.0]), 5.0);
        let mut rng = SeededRng::new(3);
        let x: Vec<f64> = (0..257).map(|_| rng.normal()).collect();
        let mut naive = 0.0;
        for v in &x {
            naive += v * v;
        }
        assert!((euclid_norm(&x) - naive.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn batched_kernels_match_naive_loops() {
        let mut rng = SeededRng::new(5);
        let a = random_matrix(&mut rng, 3, 7);
        let w = random_matrix(&mut rng, 5, 7);
        let mut out = Matrix::zeros(3, 5);
        mul_abt_acc(&a, &w, &mut out);
        for r in 0..3 {
            for i in 0..5 {
                let mut s = 0.0;
                for j in 0..7 {
                    s += a.get(r, j) * w.get(i, j);
                }
                assert!((out.get(r, i) - s).abs() < 1e-12);
            }
        }
        let w2 = random_matrix(&mut rng, 7, 4);
        let ab = a.matmul(&w2).unwrap();
        let x = random_matrix(&mut rng, 3, 4);
        let mut atx = Matrix::zeros(7, 4);
        mul_atb_acc(&a, &x, &mut atx);
        for i in 0..7 {
            for k in 0..4 {
                let s: f64 = (0..3).map(|r| a.get(r, i) * x.get(r, k)).sum();
                assert!((atx.get(i, k) - s).abs() < 1e-12);
            }
        }
        for r in 0..3 {
            for k in 0..4 {
                let s: f64 = (0..7).map(|j| a.get(r, j) * w2.get(j, k)).sum();
                assert!((ab.get(r, k) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let d = Matrix::from_rows(&[&[0.5, 0.0, 0.0], &[0.0, -2.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
        assert!((d.spectral_norm(200) - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn affine_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = SeededRng::new(seed);
            let a = random_matrix(&mut rng, 4, 6);
            let x: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let y: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let zero = [0.0; 4];
            let combo: Vec<f64> = x.iter().zip(&y).map(|(x, y)| alpha * x + beta * y).collect();
            let lhs = affine(&a, &combo, &zero).unwrap();
            let ax = affine(&a, &x, &zero).unwrap();
            let ay = affine(&a, &y, &zero).unwrap();
            for i in 0..4 {
                prop_assert!((lhs[i] - (alpha * ax[i] + beta * ay[i])).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_gradient_sums_to_zero(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..12),
            t in any::<usize>(),
        ) {
            let target = t % logits.len();
            let (loss, g) = softmax_xent(&logits, target).unwrap();
            prop_assert!(loss >= -1e-12);
            prop_assert!(g.iter().sum::<f64>().abs() <= 1e-12);
        }
    }
}
