//! Supervised contrastive loss over {bonafide, TTS, VC} groups.
//!
//! For anchor n with positives c (same group, c != n) and negatives j
//! (different group), the per-anchor term is
//! `-(1/C) * sum_c log[ exp(z_n.z_c/tau) / (exp(z_n.z_c/tau) + sum_j exp(z_n.z_j/tau)) ]`
//! and the loss is the mean over the whole batch the loss sees; anchors
//! without a positive contribute zero (and are counted as skipped). The
//! denominator carries a single positive term (the pair's own), not the
//! sum over all positives. Rows of Z are L2-normalized internally and the
//! default temperature 0.01 makes naive exponentials overflow, so every
//! softmax is log-sum-exp stabilized.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{DinError, Result};
use crate::model::GroupLabel;

/// Whether bonafide utterances participate as a third contrastive group or
/// the loss sees only the two fake-speech generator families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    #[default]
    AllGroups,
    TtsVcOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveParams {
    pub tau: f64,
    pub mode: ContrastiveMode,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        ContrastiveParams { tau: 0.01, mode: ContrastiveMode::AllGroups }
    }
}

impl ContrastiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(DinError::config("contrastive temperature tau must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveLossOutput {
    pub loss: f64,
    pub grad_z: Array2<f64>,
    /// Anchors that had no same-group partner in the batch.
    pub skipped_anchors: usize,
    /// True when the (active part of the) batch held fewer than two
    /// groups, so no negatives existed and the loss is exactly zero.
    pub single_group: bool,
}

pub fn contrastive_loss(
    z: ArrayView2<f64>,
    group_labels: &[GroupLabel],
    p: &ContrastiveParams,
) -> Result<ContrastiveLossOutput> {
    p.validate()?;
    let n = z.nrows();
    if group_labels.len() != n {
        return Err(DinError::shape(format!(
            "{} group labels for {n} embeddings",
            group_labels.len()
        )));
    }
    if n == 0 {
        return Err(DinError::data("empty batch"));
    }

    // active = rows the loss sees at all
    let active: Vec<usize> = (0..n)
        .filter(|&i| p.mode == ContrastiveMode::AllGroups || group_labels[i] != GroupLabel::Bonafide)
        .collect();
    let a = active.len();

    let mut grad_z = Array2::<f64>::zeros(z.dim());
    if a == 0 {
        return Ok(ContrastiveLossOutput { loss: 0.0, grad_z, skipped_anchors: 0, single_group: true });
    }

    // normalize active rows
    let mut z_hat = Array2::<f64>::zeros((a, z.ncols()));
    let mut norms = Array1::<f64>::zeros(a);
    for (r, &i) in active.iter().enumerate() {
        let norm = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return Err(DinError::numerical(format!("degenerate embedding: Z row {i} has (near-)zero norm")));
        }
        for (jc, v) in z.row(i).iter().enumerate() {
            z_hat[[r, jc]] = v / norm;
        }
        norms[r] = norm;
    }
    let groups: Vec<GroupLabel> = active.iter().map(|&i| group_labels[i]).collect();
    let single_group = {
        let first = groups[0];
        groups.iter().all(|&g| g == first)
    };

    // cosine similarities among active rows
    let sims = crate::linalg::matmul_nt(&z_hat.view(), &z_hat.view());

    // first pass: which anchors have positives
    let has_positive: Vec<bool> = (0..a)
        .map(|i| (0..a).any(|c| c != i && groups[c] == groups[i]))
        .collect();
    let n_anchors = has_positive.iter().filter(|&&b| b).count();
    let skipped_anchors = a - n_anchors;
    if n_anchors == 0 {
        return Ok(ContrastiveLossOutput { loss: 0.0, grad_z, skipped_anchors, single_group });
    }

    let mut loss = 0.0;
    // d loss / d sims[i][t]
    let mut grad_sims = Array2::<f64>::zeros((a, a));
    // the outer 1/N runs over the whole batch the loss sees (skipped
    // anchors contribute zero terms but still count in the denominator)
    let inv_anchors = 1.0 / a as f64;

    for i in 0..a {
        if !has_positive[i] {
            continue;
        }
        let positives: Vec<usize> = (0..a).filter(|&c| c != i && groups[c] == groups[i]).collect();
        let negatives: Vec<usize> = (0..a).filter(|&j| groups[j] != groups[i]).collect();
        let weight = inv_anchors / positives.len() as f64;
        for &c in &positives {
            let x_c = sims[[i, c]] / p.tau;
            let mut mx = x_c;
            let mut argmax = usize::MAX; // MAX marks the positive as argmax
            for &j in &negatives {
                if sims[[i, j]] / p.tau > mx {
                    mx = sims[[i, j]] / p.tau;
                    argmax = j;
                }
            }
            // ln_1p over everything but the max term (which is exactly 1)
            let e_c = (x_c - mx).exp();
            let mut rest = if argmax == usize::MAX { 0.0 } else { e_c };
            for &j in &negatives {
                if j != argmax {
                    rest += (sims[[i, j]] / p.tau - mx).exp();
                }
            }
            let denom = 1.0 + rest;
            // (mx - x_c) grouped first to avoid absorbing a tiny ln_1p
            loss += weight * (rest.ln_1p() + (mx - x_c));

            let p_c = e_c / denom;
            grad_sims[[i, c]] += weight * (p_c - 1.0) / p.tau;
            for &j in &negatives {
                let p_j = (sims[[i, j]] / p.tau - mx).exp() / denom;
                grad_sims[[i, j]] += weight * p_j / p.tau;
            }
        }
    }

    // sims[i][t] = z_hat_i . z_hat_t touches both rows:
    // dL/dz_hat = (grad_sims + grad_sims^T) . z_hat
    let sym = &grad_sims + &grad_sims.t();
    let grad_z_hat = crate::linalg::matmul(&sym.view(), &z_hat.view());

    // back through row normalization onto the original row indices
    for (r, &i) in active.iter().enumerate() {
        let dot: f64 = z_hat.row(r).iter().zip(grad_z_hat.row(r)).map(|(h, g)| h * g).sum();
        for (jc, out) in grad_z.row_mut(i).iter_mut().enumerate() {
            *out = (grad_z_hat[[r, jc]] - z_hat[[r, jc]] * dot) / norms[r];
        }
    }

    Ok(ContrastiveLossOutput { loss, grad_z, skipped_anchors, single_group })
}
