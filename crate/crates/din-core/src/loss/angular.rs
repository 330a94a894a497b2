//! A-Softmax (angular-margin softmax) loss.
//!
//! Per-sample loss with label c:
//! `-log[ exp(s*phi(theta_c)) / (exp(s*phi(theta_c)) + sum_{j!=c} exp(s*cos theta_j)) ]`
//! where `theta_j` is the angle between the normalized embedding and class
//! column `w_j`, and `phi(theta) = (-1)^k cos(m*theta) - 2k` with
//! `k = floor(theta*m/pi)`.
//!
//! Internally `phi` is evaluated as a function of `u = cos(theta)` through
//! the Chebyshev identity `cos(m*theta) = T_m(u)`, which keeps the
//! derivative `d phi / d u = (-1)^k T_m'(u)` free of the `1/sin(theta)`
//! singularities a direct angular formulation would hit at `theta = 0, pi`.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{DinError, Result};
use crate::linalg;

/// Margin and scale for the angular softmax. The class-weight matrix W
/// itself lives in the model's parameter store (single source of truth for
/// the optimizer) and is passed to [`a_softmax_loss`] by view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AngularMarginParams {
    pub m: u32,
    pub s: f64,
}

impl Default for AngularMarginParams {
    fn default() -> Self {
        AngularMarginParams { m: 4, s: 30.0 }
    }
}

impl AngularMarginParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(DinError::config("angular margin m must be >= 1"));
        }
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(DinError::config("angular scale s must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AngularLossOutput {
    pub loss: f64,
    /// d loss / d Y, same shape as the (unnormalized) input embeddings.
    pub grad_y: Array2<f64>,
    /// d loss / d W, same shape as the class-weight matrix.
    pub grad_w: Array2<f64>,
    /// How many cosines fell outside [-1, 1] and were clamped (floating
    /// point drift; anything large signals a normalization bug upstream).
    pub clamped_cosines: usize,
}

/// `(T_m(u), T_m'(u))` by the Chebyshev recurrence.
fn chebyshev_t(m: u32, u: f64) -> (f64, f64) {
    if m == 0 {
        return (1.0, 0.0);
    }
    let (mut t_prev, mut t) = (1.0, u);
    let (mut d_prev, mut d) = (0.0, 1.0);
    for _ in 1..m {
        let t_next = 2.0 * u * t - t_prev;
        let d_next = 2.0 * t + 2.0 * u * d - d_prev;
        (t_prev, t) = (t, t_next);
        (d_prev, d) = (d, d_next);
    }
    (t, d)
}

/// The margin function `phi(theta) = (-1)^k cos(m*theta) - 2k`,
/// `k = floor(theta*m/pi)` clamped to `[0, m-1]`. `theta` outside
/// `[0, pi]` is clamped.
pub fn phi(theta: f64, m: u32) -> f64 {
    let theta = theta.clamp(0.0, std::f64::consts::PI);
    let k = segment(theta, m);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    sign * (m as f64 * theta).cos() - 2.0 * k as f64
}

fn segment(theta: f64, m: u32) -> u32 {
    let k = (theta * m as f64 / std::f64::consts::PI).floor();
    (k.max(0.0) as u32).min(m - 1)
}

/// `phi` and its derivative as functions of `u = cos(theta)`; also reports
/// whether `u` had to be clamped into [-1, 1].
fn phi_from_cos(u: f64, m: u32) -> (f64, f64, bool) {
    let clamped = !(-1.0..=1.0).contains(&u);
    let u = u.clamp(-1.0, 1.0);
    let k = segment(u.acos(), m);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    let (t, dt) = chebyshev_t(m, u);
    (sign * t - 2.0 * k as f64, sign * dt, clamped)
}

/// Normalize rows to unit L2 norm. Errors on (near-)zero rows.
fn normalize_rows(x: ArrayView2<f64>, what: &str) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut out = x.to_owned();
    let mut norms = Array1::zeros(x.nrows());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 1e-12) {
            return Err(DinError::numerical(format!("degenerate embedding: {what} row {i} has (near-)zero norm")));
        }
        row.mapv_inplace(|v| v / n);
        norms[i] = n;
    }
    Ok((out, norms))
}

/// Backpropagate through row normalization: given dL/d(x/|x|), produce
/// dL/dx = (g - xhat * <xhat, g>) / |x|.
fn normalization_backward(
    grad_hat: &Array2<f64>,
    hat: &Array2<f64>,
    norms: &Array1<f64>,
) -> Array2<f64> {
    let mut out = grad_hat.clone();
    for i in 0..out.nrows() {
        let dot: f64 = hat.row(i).iter().zip(grad_hat.row(i)).map(|(h, g)| h * g).sum();
        let n = norms[i];
        let h_row = hat.row(i);
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = (*v - h_row[j] * dot) / n;
        }
    }
    out
}

/// A-Softmax over a batch. `y` is N x d_y, `w` is d_y x n_classes; rows of
/// `y` and columns of `w` are L2-normalized internally, and both gradients
/// flow through their normalizations.
pub fn a_softmax_loss(
    y: ArrayView2<f64>,
    labels: &[usize],
    w: ArrayView2<f64>,
    p: &AngularMarginParams,
) -> Result<AngularLossOutput> {
    p.validate()?;
    let (n, _d) = y.dim();
    let n_classes = w.ncols();
    if labels.len() != n {
        return Err(DinError::shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    if y.ncols() != w.nrows() {
        return Err(DinError::shape(format!(
            "embedding dim {} does not match weight rows {}",
            y.ncols(),
            w.nrows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(DinError::data(format!("label {bad} outside 0..{n_classes}")));
    }
    if n == 0 {
        return Err(DinError::data("empty batch"));
    }

    let (y_hat, y_norms) = normalize_rows(y, "Y")?;
    let (w_hat_t, w_norms) = normalize_rows(w.t(), "W-column")?; // rows of w^T are columns of w
    let w_hat = w_hat_t.t().to_owned();

    // cosines: N x n_classes
    let cos = linalg::matmul(&y_hat.view(), &w_hat.view());

    let mut loss = 0.0;
    let mut clamped_cosines = 0;
    // d loss / d cos entries (includes the phi' factor for the label column)
    let mut grad_cos = Array2::<f64>::zeros((n, n_classes));
    let inv_n = 1.0 / n as f64;

    for i in 0..n {
        let c = labels[i];
        let (phi_c, dphi_c, clamped) = phi_from_cos(cos[[i, c]], p.m);
        clamped_cosines += clamped as usize;
        // logits: a_c = s*phi, a_j = s*cos (j != c), stabilized by max subtraction
        let a_c = p.s * phi_c;
        let mut mx = a_c;
        let mut argmax = c;
        for j in 0..n_classes {
            if j != c && p.s * cos[[i, j]] > mx {
                mx = p.s * cos[[i, j]];
                argmax = j;
            }
        }
        // the max term contributes exactly exp(0) = 1; summing the rest
        // separately lets ln_1p keep full precision when the rest is tiny
        let mut rest = if argmax == c { 0.0 } else { (a_c - mx).exp() };
        for j in 0..n_classes {
            if j != c && j != argmax {
                rest += (p.s * cos[[i, j]] - mx).exp();
            }
        }
        let denom = 1.0 + rest;
        // group (mx - a_c) first: when the target is the max the term is an
        // exact zero, otherwise the difference is exact (nearby floats) --
        // adding mx before subtracting would absorb a tiny ln_1p entirely
        loss += inv_n * (rest.ln_1p() + (mx - a_c));

        let p_c = (a_c - mx).exp() / denom;
        grad_cos[[i, c]] = inv_n * p.s * (p_c - 1.0) * dphi_c;
        for j in 0..n_classes {
            if j != c {
                let p_j = (p.s * cos[[i, j]] - mx).exp() / denom;
                grad_cos[[i, j]] = inv_n * p.s * p_j;
            }
        }
    }

    // chain rule: cos = y_hat . w_hat
    let grad_y_hat = linalg::matmul_nt(&grad_cos.view(), &w_hat.view());
    let grad_w_hat_t = linalg::matmul(&grad_cos.t(), &y_hat.view()); // n_classes x d_y
    let grad_y = normalization_backward(&grad_y_hat, &y_hat, &y_norms);
    let grad_w = normalization_backward(&grad_w_hat_t, &w_hat_t, &w_norms).t().to_owned();

    Ok(AngularLossOutput { loss, grad_y, grad_w, clamped_cosines })
}
