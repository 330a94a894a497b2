//! Adam with bias correction and per-group learning rates.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{DinError, Result};
use crate::nn::{GradientTape, ParamGroup, ParameterStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(DinError::config(format!("adam {name} must be in [0, 1), got {b}")));
            }
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(DinError::config(format!("adam eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First/second moment buffers, index-aligned with a [`ParameterStore`].
/// Buffers are allocated lazily on the first gradient a tensor receives.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Option<ArrayD<f64>>>,
    v: Vec<Option<ArrayD<f64>>>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        AdamState { m: vec![None; store.len()], v: vec![None; store.len()], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every trainable tensor with a gradient on the tape.
    /// Tensors without a gradient are left untouched, moments included.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        tape: &GradientTape,
        p: &AdamParams,
        lr_for: impl Fn(ParamGroup) -> f64,
    ) -> Result<()> {
        p.validate()?;
        self.t += 1;
        let bc1 = 1.0 - p.beta1.powi(self.t as i32);
        let bc2 = 1.0 - p.beta2.powi(self.t as i32);
        let ids: Vec<_> = store
            .iter()
            .filter(|(id, param)| param.trainable && tape.get(*id).is_some())
            .map(|(id, param)| (id, param.group))
            .collect();
        for (id, group) in ids {
            let lr = lr_for(group);
            if !lr.is_finite() || lr < 0.0 {
                return Err(DinError::config(format!("learning rate must be >= 0, got {lr}")));
            }
            let grad = tape.get(id).expect("filtered above");
            let m = self.m[id.0].get_or_insert_with(|| ArrayD::zeros(grad.shape()));
            let v = self.v[id.0].get_or_insert_with(|| ArrayD::zeros(grad.shape()));
            let value = store.get_mut(id);
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|w, m, v, &g| {
                    *m = p.beta1 * *m + (1.0 - p.beta1) * g;
                    *v = p.beta2 * *v + (1.0 - p.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= lr * m_hat / (v_hat.sqrt() + p.eps);
                });
        }
        store.check_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn scalar_store(v: f64) -> (ParameterStore, crate::nn::ParamId) {
        let mut store = ParameterStore::new();
        let id = store
            .add("w", ArrayD::from_elem(vec![1], v), ParamGroup::Backbone, true)
            .unwrap();
        (store, id)
    }

    #[test]
    fn first_step_matches_scalar_hand_trace() {
        let (mut store, id) = scalar_store(1.0);
        let mut state = AdamState::new(&store);
        let mut tape = GradientTape::new(&store);
        let g = 0.3;
        tape.accumulate(id, ArrayD::from_elem(vec![1], g));
        let p = AdamParams::default();
        let lr = 0.01;
        state.step(&mut store, &tape, &p, |_| lr).unwrap();
        // Hand trace: m=(1-b1)g, v=(1-b2)g^2; after bias correction
        // m_hat=g, v_hat=g^2, so the update is ~ -lr * g/(|g|+eps).
        let m_hat = (1.0 - p.beta1) * g / (1.0 - p.beta1);
        let v_hat = (1.0 - p.beta2) * g * g / (1.0 - p.beta2);
        let want = 1.0 - lr * m_hat / (v_hat.sqrt() + p.eps);
        let got = store.get(id)[0];
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        assert!((got - (1.0 - lr)).abs() < 1e-6, "first step moves by ~lr toward -sign(g)");
    }

    #[test]
    fn missing_gradient_leaves_parameter_and_moments_unchanged() {
        let (mut store, id) = scalar_store(2.5);
        let mut state = AdamState::new(&store);
        let tape = GradientTape::new(&store);
        state.step(&mut store, &tape, &AdamParams::default(), |_| 0.1).unwrap();
        assert_eq!(store.get(id)[0], 2.5);
        assert!(state.m[id.0].is_none());
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (mut store, id) = scalar_store(-1.25);
        let mut state = AdamState::new(&store);
        let mut tape = GradientTape::new(&store);
        tape.accumulate(id, ArrayD::from_elem(vec![1], 7.0));
        for _ in 0..5 {
            state.step(&mut store, &tape, &AdamParams::default(), |_| 0.0).unwrap();
        }
        assert_eq!(store.get(id)[0], -1.25);
    }

    #[test]
    fn per_group_rates_move_only_the_live_group() {
        let mut store = ParameterStore::new();
        let bb = store
            .add("backbone.w", ArrayD::from_elem(vec![2], 1.0), ParamGroup::Backbone, true)
            .unwrap();
        let hd = store
            .add("head.w", ArrayD::from_elem(vec![2], 1.0), ParamGroup::Head, true)
            .unwrap();
        let mut state = AdamState::new(&store);
        let mut tape = GradientTape::new(&store);
        tape.accumulate(bb, ArrayD::from_elem(vec![2], 1.0));
        tape.accumulate(hd, ArrayD::from_elem(vec![2], 1.0));
        state
            .step(&mut store, &tape, &AdamParams::default(), |g| match g {
                ParamGroup::Backbone => 0.0,
                ParamGroup::Head => 0.5,
            })
            .unwrap();
        assert_eq!(store.get(bb)[0], 1.0);
        assert!(store.get(hd)[0] < 1.0);
    }

    #[test]
    fn frozen_tensors_never_move() {
        let mut store = ParameterStore::new();
        let id = store
            .add("bn.running_mean", ArrayD::from_elem(vec![3], 0.5), ParamGroup::Backbone, false)
            .unwrap();
        let mut state = AdamState::new(&store);
        let mut tape = GradientTape::new(&store);
        tape.accumulate(id, ArrayD::from_elem(vec![3], 9.0));
        state.step(&mut store, &tape, &AdamParams::default(), |_| 0.1).unwrap();
        assert!(store.get(id).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn bias_correction_uses_global_step_count() {
        let (mut store, id) = scalar_store(0.0);
        let mut state = AdamState::new(&store);
        let mut tape = GradientTape::new(&store);
        tape.accumulate(id, ArrayD::from_elem(vec![1], 1.0));
        let p = AdamParams::default();
        state.step(&mut store, &tape, &p, |_| 0.001).unwrap();
        state.step(&mut store, &tape, &p, |_| 0.001).unwrap();
        assert_eq!(state.step_count(), 2);
        // Constant gradient 1: m_hat = 1, v_hat = 1 exactly at every step,
        // so each step subtracts lr/(1+eps).
        let want = -2.0 * 0.001 / (1.0 + p.eps);
        assert!((store.get(id)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        assert!(AdamParams { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamParams { beta2: -0.1, ..Default::default() }.validate().is_err());
        assert!(AdamParams { eps: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamParams::default().validate().is_ok());
    }
}
