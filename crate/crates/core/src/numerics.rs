//! Dense double-precision matrices and the handful of differentiable
//! primitives the rest of the workspace is built from: affine maps, row
//! softmax, mean squared error, and a central-difference gradient checker.
//!
//! There is no autodiff graph. Each trainable block pairs an explicit
//! forward with an explicit backward, and every backward in the workspace is
//! validated against [`grad_check`].

use crate::error::{Error, Result};

/// Dense row-major 2-D array of `f64`.
///
/// Exported operations keep two invariants: `data.len() == rows * cols`, and
/// every entry finite. Constructors reject non-finite input; the arithmetic
/// here cannot manufacture NaN/Inf from finite operands.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds from row-major data; fails on length mismatch or non-finite
    /// entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::Validation(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry {bad} is {} in a {rows}x{cols} matrix",
                data[bad]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Validation(format!(
                "row {bad} has {} entries, expected {cols}",
                rows[bad].len()
            )));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    /// Fills a `rows x cols` matrix with uniform draws in `[-bound, bound]`.
    pub fn uniform_init(rows: usize, cols: usize, bound: f64, rng: &mut crate::rng::Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`, used for gradient accumulation and SGD.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// Bit-exact fingerprint of the entries (see [`crate::rng::bits_hash`]).
    pub fn bits_hash(&self) -> u64 {
        crate::rng::bits_hash(&self.data)
    }
}

/// Per-frame scores over a vocabulary, shape `frames x vocab`.
pub type FrameLogits = Matrix;
/// Row-normalized per-frame probabilities, shape `frames x vocab`.
pub type FrameProbs = Matrix;

fn shape_error(context: &str, left: &Matrix, right: (usize, usize)) -> Error {
    Error::DimensionMismatch {
        context: context.to_string(),
        left: format!("{}x{}", left.rows, left.cols),
        right: format!("{}x{}", right.0, right.1),
    }
}

/// `input x weights` without bias.
pub fn matmul(input: &Matrix, weights: &Matrix) -> Result<Matrix> {
    if input.cols != weights.rows {
        return Err(shape_error("matmul", input, weights.shape()));
    }
    let mut out = Matrix::zeros(input.rows, weights.cols);
    for i in 0..input.rows {
        let in_row = input.row(i);
        let out_row = &mut out.data[i * weights.cols..(i + 1) * weights.cols];
        for (k, &a) in in_row.iter().enumerate() {
            let w_row = weights.row(k);
            for (o, &w) in out_row.iter_mut().zip(w_row) {
                *o += a * w;
            }
        }
    }
    Ok(out)
}

/// Affine map: `out[i][j] = sum_k input[i][k] * weights[k][j] + bias[j]`.
pub fn linear_forward(input: &Matrix, weights: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if bias.len() != weights.cols {
        return Err(Error::DimensionMismatch {
            context: "linear_forward bias".to_string(),
            left: format!("{}", bias.len()),
            right: format!("{}x{}", weights.rows, weights.cols),
        });
    }
    let mut out = matmul(input, weights)?;
    for i in 0..out.rows {
        for (o, b) in out.row_mut(i).iter_mut().zip(bias) {
            *o += b;
        }
    }
    Ok(out)
}

/// Gradients of an affine map w.r.t. its three operands.
#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub input: Matrix,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Backward pass of [`linear_forward`]: `grad_input = upstream x W^T`,
/// `grad_weights = input^T x upstream`, `grad_bias = column sums of upstream`.
pub fn linear_backward(input: &Matrix, weights: &Matrix, upstream: &Matrix) -> Result<LinearGrads> {
    if input.cols != weights.rows {
        return Err(shape_error("linear_backward input/weights", input, weights.shape()));
    }
    if upstream.rows != input.rows || upstream.cols != weights.cols {
        return Err(shape_error(
            "linear_backward upstream",
            upstream,
            (input.rows, weights.cols),
        ));
    }
    let mut grad_input = Matrix::zeros(input.rows, input.cols);
    let mut grad_weights = Matrix::zeros(weights.rows, weights.cols);
    let mut grad_bias = vec![0.0; weights.cols];
    for i in 0..input.rows {
        let up_row = upstream.row(i);
        let in_row = input.row(i);
        let gi_row = &mut grad_input.data[i * input.cols..(i + 1) * input.cols];
        for k in 0..weights.rows {
            let w_row = weights.row(k);
            let gw_row = &mut grad_weights.data[k * weights.cols..(k + 1) * weights.cols];
            let mut acc = 0.0;
            for j in 0..weights.cols {
                acc += up_row[j] * w_row[j];
                gw_row[j] += in_row[k] * up_row[j];
            }
            gi_row[k] = acc;
        }
        for (gb, u) in grad_bias.iter_mut().zip(up_row) {
            *gb += u;
        }
    }
    Ok(LinearGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

/// Row-wise softmax with max-subtraction; each output row is non-negative
/// and sums to 1.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise log-softmax: `x - max - ln(sum(exp(x - max)))`.
pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v = *v - max - log_sum;
        }
    }
    out
}

/// `ln(sum(exp(values)))`, stable under large magnitudes. Empty input and
/// all `-inf` input both yield `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean of squared differences over all entries of two same-shape matrices.
///
/// The mean runs over every entry (rows times cols), so the value is scale
/// free in both sequence length and feature width.
pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_error("mse", a, b.shape()));
    }
    let n = a.data.len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n as f64)
}

/// Gradient of [`mse`] w.r.t. its first argument: `2 (a - b) / n`.
pub fn mse_grad(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(shape_error("mse_grad", a, b.shape()));
    }
    let n = a.data.len().max(1) as f64;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| 2.0 * (x - y) / n)
        .collect();
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Denominator floor for relative errors in [`grad_check`]; entries whose
/// analytic and numeric gradients are both below this are compared against
/// the floor instead, which keeps central-difference noise on near-zero
/// gradients from registering as disagreement.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Default central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Compares `analytic` against central differences of `f` at `params`.
///
/// For each entry the relative error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`;
/// the check passes iff the maximum over entries is within `tolerance`.
/// A non-finite value of `f` at any probe point aborts with a diagnostic.
pub fn grad_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::Validation(format!(
            "grad_check: {} params but {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    if !step.is_finite() || step <= 0.0 {
        return Err(Error::Validation(format!("grad_check: step {step} must be positive")));
    }
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        entries: params.len(),
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tolerance,
    };
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let plus = f(&probe)?;
        probe[i] = params[i] - step;
        let minus = f(&probe)?;
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "grad_check: f evaluated to {plus} / {minus} perturbing entry {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}
