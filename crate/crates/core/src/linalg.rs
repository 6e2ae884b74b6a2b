//! Dense matrix kernel: the matrix exponential, its adjoint Fréchet
//! derivative, and the Adam update used to optimize the channel transform.
//!
//! Everything runs in `f64`. Matrices are small (D×D with D up to a few
//! thousand) and row-major.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, ApexError, Result};

/// Order of the truncated Taylor series evaluated on the scaled matrix.
pub const EXP_SERIES_ORDER: usize = 18;
/// The matrix is halved until its 1-norm is at most this value.
pub const EXP_SCALED_NORM: f64 = 0.5;
/// Maximum number of squarings before we give up and report overflow.
pub const EXP_MAX_SQUARINGS: u32 = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ApexError::Data("matrix contains non-finite entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(shape_err!(
                "cannot multiply {}x{} by {}x{}",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(shape_err!(
                "cannot apply {}x{} matrix to length-{} vector",
                self.rows,
                self.cols,
                x.len()
            ));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(rhs)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn check_same_shape(&self, rhs: &Matrix) -> Result<()> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(shape_err!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols
            ));
        }
        Ok(())
    }

    /// Frobenius inner product.
    pub fn dot(&self, rhs: &Matrix) -> Result<f64> {
        self.check_same_shape(rhs)?;
        Ok(self.data.iter().zip(&rhs.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Maximum absolute column sum.
    pub fn norm1(&self) -> f64 {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self[(r, c)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, rhs: &Matrix) -> Result<f64> {
        self.check_same_shape(rhs)?;
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Matrix exponential by scaling and squaring around a truncated Taylor
/// series of order [`EXP_SERIES_ORDER`].
pub fn mat_exp(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(shape_err!(
            "matrix exponential needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        ));
    }
    if !a.is_finite() {
        return Err(ApexError::Numeric("matrix exponential of non-finite input".into()));
    }
    let n = a.rows();
    let norm = a.norm1();
    let mut squarings = 0u32;
    if norm > EXP_SCALED_NORM {
        squarings = (norm / EXP_SCALED_NORM).log2().ceil() as u32;
    }
    if squarings > EXP_MAX_SQUARINGS {
        return Err(ApexError::Numeric(format!(
            "norm {norm:e} needs {squarings} squarings (limit {EXP_MAX_SQUARINGS})"
        )));
    }
    let scaled = a.scaled(0.5f64.powi(squarings as i32));

    // Horner form: I + X/1 (I + X/2 (I + ... (I + X/N)))
    let ident = Matrix::identity(n);
    let mut acc = ident.clone();
    for k in (1..=EXP_SERIES_ORDER).rev() {
        acc = ident.add(&scaled.matmul(&acc)?.scaled(1.0 / k as f64))?;
    }
    for _ in 0..squarings {
        acc = acc.matmul(&acc)?;
    }
    if !acc.is_finite() {
        return Err(ApexError::Numeric("matrix exponential overflowed".into()));
    }
    Ok(acc)
}

/// `exp(-a)`. The inverse of `exp(a)` is always obtained this way and never
/// by numerically inverting `exp(a)`.
pub fn mat_inverse_via_exp(a: &Matrix) -> Result<Matrix> {
    mat_exp(&a.scaled(-1.0))
}

/// Fréchet derivative `L(a, e)` of the exponential at `a` in direction `e`,
/// read off the top-right block of `exp([[a, e], [0, a]])`.
pub fn mat_exp_frechet(a: &Matrix, e: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(shape_err!("Fréchet derivative needs a square matrix"));
    }
    a.check_same_shape(e)?;
    let n = a.rows();
    // L is linear in e, so normalize it to keep the block norm (and hence the
    // squaring depth) driven by `a`.
    let scale = e.norm1();
    if scale == 0.0 {
        return Ok(Matrix::zeros(n, n));
    }
    let mut block = Matrix::zeros(2 * n, 2 * n);
    for r in 0..n {
        for c in 0..n {
            block[(r, c)] = a[(r, c)];
            block[(n + r, n + c)] = a[(r, c)];
            block[(r, n + c)] = e[(r, c)] / scale;
        }
    }
    let big = mat_exp(&block)?;
    Ok(Matrix::from_fn(n, n, |r, c| big[(r, n + c)] * scale))
}

/// Vector-Jacobian product of the exponential: the gradient of
/// `<exp(a), cotangent>` with respect to `a`, which equals `L(aᵀ, cotangent)`.
pub fn mat_exp_vjp(a: &Matrix, cotangent: &Matrix) -> Result<Matrix> {
    a.check_same_shape(cotangent)?;
    mat_exp_frechet(&a.transpose(), cotangent)
}

/// Adam optimizer state with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(ApexError::Validation(format!(
                "Adam betas must lie in [0, 1), got {beta1} and {beta2}"
            )));
        }
        if !(lr.is_finite() && lr >= 0.0 && weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(ApexError::Validation(
                "Adam lr and weight decay must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step: 0,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
        })
    }
}

/// One bias-corrected AdamW step. Returns the updated parameter and advances
/// `state`.
pub fn adam_step(param: &Matrix, grad: &Matrix, state: &mut AdamState) -> Result<Matrix> {
    param.check_same_shape(grad)?;
    param.check_same_shape(&state.first_moment)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let decay = 1.0 - state.lr * state.weight_decay;

    let mut out = param.clone();
    let m = state.first_moment.as_mut_slice();
    let v = state.second_moment.as_mut_slice();
    for (((p, &g), m), v) in out
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p * decay - state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(out)
}
