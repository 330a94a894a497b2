//! Training objectives: the three stage-1 losses and their weighted
//! combination, plus the stage-2 cross-entropy. Every loss returns its
//! value together with analytic gradients.

pub mod angular;
pub mod center;
pub mod contrastive;

pub use angular::{a_softmax_loss, phi, AngularLossOutput, AngularMarginParams};
pub use center::{center_loss, CenterLossOutput, CenterState};
pub use contrastive::{contrastive_loss, ContrastiveLossOutput, ContrastiveMode, ContrastiveParams};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{DinError, Result};

/// Mixing weights for `L = alpha*L1 + beta*L2 + gamma*L3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.2, beta: 0.4, gamma: 0.4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DinError::config(format!("loss weight {name} must be >= 0 and finite")));
            }
        }
        Ok(())
    }
}

/// Weighted combination; the gradient distributes linearly, so callers
/// scale each loss's gradients by its weight.
pub fn combined_loss(l1: f64, l2: f64, l3: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    for (name, v) in [("L1", l1), ("L2", l2), ("L3", l3)] {
        if !v.is_finite() {
            return Err(DinError::numerical(format!("{name} is not finite: {v}")));
        }
    }
    Ok(w.alpha * l1 + w.beta * l2 + w.gamma * l3)
}

#[derive(Debug, Clone)]
pub struct CrossEntropyOutput {
    pub loss: f64,
    pub grad_logits: Array2<f64>,
}

/// Mean of `-log softmax(logits)[label]`, log-sum-exp stabilized.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<CrossEntropyOutput> {
    let (n, k) = logits.dim();
    if labels.len() != n {
        return Err(DinError::shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if n == 0 {
        return Err(DinError::data("empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(DinError::data(format!("label {bad} outside 0..{k}")));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        let row = logits.row(i);
        let argmax = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).expect("k >= 1");
        let mx = row[argmax];
        // ln_1p over the non-max terms (the max contributes exactly 1), and
        // (mx - target) grouped first so a confident correct prediction's
        // tiny loss is not absorbed into mx
        let rest: f64 =
            (0..k).filter(|&j| j != argmax).map(|j| (row[j] - mx).exp()).sum();
        let denom = 1.0 + rest;
        loss += inv_n * (rest.ln_1p() + (mx - row[labels[i]]));
        for j in 0..k {
            let p = (row[j] - mx).exp() / denom;
            grad[[i, j]] = inv_n * (p - if j == labels[i] { 1.0 } else { 0.0 });
        }
    }
    Ok(CrossEntropyOutput { loss, grad_logits: grad })
}
