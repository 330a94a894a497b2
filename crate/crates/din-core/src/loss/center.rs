//! One-class center loss pulling bonafide embeddings toward a reference
//! center c. The center itself is a constant within a step: gradients flow
//! to the embeddings only, never to c.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{DinError, Result};

/// The running center vector plus its refresh bookkeeping. The training
/// loop mirrors `c` into the parameter store ("center.c") so checkpoints
/// carry it; this struct is the in-memory working copy.
#[derive(Debug, Clone)]
pub struct CenterState {
    pub c: Array1<f64>,
    pub last_refresh_epoch: u32,
    pub refresh_interval: u32,
}

impl CenterState {
    pub fn new(dim: usize, refresh_interval: u32) -> Result<Self> {
        if refresh_interval < 1 {
            return Err(DinError::config("center refresh interval must be >= 1"));
        }
        Ok(CenterState { c: Array1::zeros(dim), last_refresh_epoch: 0, refresh_interval })
    }

    pub fn validate(&self) -> Result<()> {
        if self.c.iter().any(|v| !v.is_finite()) {
            return Err(DinError::numerical("center vector is not finite"));
        }
        if self.refresh_interval < 1 {
            return Err(DinError::config("center refresh interval must be >= 1"));
        }
        Ok(())
    }

    /// Replace c with the mean of the given embeddings (no-op with a
    /// warning flag when the set is empty).
    pub fn set_from_mean(&mut self, embeddings: ArrayView2<f64>) -> bool {
        if embeddings.nrows() == 0 {
            return false;
        }
        let n = embeddings.nrows() as f64;
        for (j, v) in self.c.iter_mut().enumerate() {
            *v = embeddings.column(j).sum() / n;
        }
        true
    }
}

#[derive(Debug, Clone)]
pub struct CenterLossOutput {
    pub loss: f64,
    /// d loss / d X; rows outside the bonafide mask are zero.
    pub grad_x: Array2<f64>,
    pub n_bonafide: usize,
}

/// `L3 = (1/K) * sum_k ||x_k - c||^2` over the K masked (bonafide) rows.
/// K = 0 yields loss 0 with zero gradients.
pub fn center_loss(
    x: ArrayView2<f64>,
    bonafide_mask: &[bool],
    st: &CenterState,
) -> Result<CenterLossOutput> {
    st.validate()?;
    let (n, d) = x.dim();
    if bonafide_mask.len() != n {
        return Err(DinError::shape(format!("{} mask entries for {n} rows", bonafide_mask.len())));
    }
    if st.c.len() != d {
        return Err(DinError::shape(format!(
            "center has dim {}, embeddings have dim {d}",
            st.c.len()
        )));
    }
    let k = bonafide_mask.iter().filter(|&&b| b).count();
    let mut grad_x = Array2::<f64>::zeros((n, d));
    if k == 0 {
        return Ok(CenterLossOutput { loss: 0.0, grad_x, n_bonafide: 0 });
    }
    let inv_k = 1.0 / k as f64;
    let mut loss = 0.0;
    for (i, &is_bonafide) in bonafide_mask.iter().enumerate() {
        if !is_bonafide {
            continue;
        }
        for j in 0..d {
            let diff = x[[i, j]] - st.c[j];
            loss += inv_k * diff * diff;
            grad_x[[i, j]] = 2.0 * inv_k * diff;
        }
    }
    Ok(CenterLossOutput { loss, grad_x, n_bonafide: k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    fn state(c: &[f64]) -> CenterState {
        CenterState {
            c: Array1::from_vec(c.to_vec()),
            last_refresh_epoch: 0,
            refresh_interval: 5,
        }
    }

    #[test]
    fn embeddings_at_the_center_give_zero() {
        let st = state(&[1.0, -2.0]);
        let x = arr2(&[[1.0, -2.0], [1.0, -2.0]]);
        let out = center_loss(x.view(), &[true, true], &st).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_x.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hand_computed_two_point_case() {
        // x1=(0,0), x2=(2,0), c=(1,0): (1 + 1)/2 = 1
        let st = state(&[1.0, 0.0]);
        let x = arr2(&[[0.0, 0.0], [2.0, 0.0]]);
        let out = center_loss(x.view(), &[true, true], &st).unwrap();
        assert_abs_diff_eq!(out.loss, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn matches_scalar_loop_and_closed_form_gradient() {
        let mut r = crate::rng::stream(60, "center-test", 0);
        let x = Array2::from_shape_fn((5, 3), |_| crate::rng::sample_standard_normal(&mut r));
        let c: Vec<f64> = (0..3).map(|_| crate::rng::sample_standard_normal(&mut r)).collect();
        let st = state(&c);
        let mask = [true; 5];
        let out = center_loss(x.view(), &mask, &st).unwrap();
        let mut oracle = 0.0;
        for i in 0..5 {
            for j in 0..3 {
                let d = x[[i, j]] - c[j];
                oracle += d * d;
            }
        }
        oracle /= 5.0;
        assert_abs_diff_eq!(out.loss, oracle, epsilon = 1e-12);
        for i in 0..5 {
            for j in 0..3 {
                let expected = 2.0 / 5.0 * (x[[i, j]] - c[j]);
                assert_abs_diff_eq!(out.grad_x[[i, j]], expected, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn masked_out_rows_do_not_contribute() {
        let st = state(&[0.0, 0.0]);
        let x = arr2(&[[1.0, 0.0], [100.0, 100.0], [0.0, 1.0]]);
        let out = center_loss(x.view(), &[true, false, true], &st).unwrap();
        assert_abs_diff_eq!(out.loss, 1.0, epsilon = 1e-15); // (1 + 1)/2
        assert!(out.grad_x.row(1).iter().all(|&g| g == 0.0));
        assert_eq!(out.n_bonafide, 2);
    }

    #[test]
    fn empty_mask_gives_zero_loss() {
        let st = state(&[0.0]);
        let x = arr2(&[[3.0], [4.0]]);
        let out = center_loss(x.view(), &[false, false], &st).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.n_bonafide, 0);
    }

    #[test]
    fn loss_is_nonnegative_with_equality_only_at_center() {
        let mut r = crate::rng::stream(61, "center-nonneg", 0);
        for _ in 0..20 {
            let x = Array2::from_shape_fn((3, 4), |_| crate::rng::sample_standard_normal(&mut r));
            let st = state(&[0.0, 0.0, 0.0, 0.0]);
            let out = center_loss(x.view(), &[true; 3], &st).unwrap();
            assert!(out.loss >= 0.0);
            let all_at_center = x.iter().all(|&v| v == 0.0);
            assert_eq!(out.loss == 0.0, all_at_center);
        }
    }

    #[test]
    fn set_from_mean_computes_means_and_flags_empty() {
        let mut st = state(&[0.0, 0.0]);
        let emb = arr2(&[[0.0, 0.0], [2.0, 2.0]]);
        assert!(st.set_from_mean(emb.view()));
        assert_abs_diff_eq!(st.c[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(st.c[1], 1.0, epsilon = 1e-15);
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(!st.set_from_mean(empty.view()));
        assert_abs_diff_eq!(st.c[0], 1.0, epsilon = 1e-15); // unchanged
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let st = state(&[0.0, 0.0, 0.0]);
        let x = arr2(&[[1.0, 2.0]]);
        assert!(center_loss(x.view(), &[true], &st).is_err());
        let st2 = state(&[0.0, 0.0]);
        assert!(center_loss(x.view(), &[true, false], &st2).is_err());
    }
}
