//! Neural-network building blocks with explicit forward caches and analytic
//! backward passes.
//!
//! Every layer owns [`ParamId`]s into a shared [`ParameterStore`]. A forward
//! call returns the output plus a cache value; the matching backward call
//! consumes that cache, accumulates parameter gradients into a
//! [`GradientTape`], and returns the gradient w.r.t. its input. Backward
//! without a prior forward is unrepresentable: the cache is the proof.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod depthwise;
pub mod linear;
pub mod pool;

use std::collections::HashMap;

use ndarray::ArrayD;
use rand::Rng;

use crate::error::{DinError, Result};
use crate::rng::sample_standard_normal;

/// Whether BatchNorm uses batch statistics (and updates running stats) or
/// frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Learning-rate / freezing group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
}

/// One named tensor in the store.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub group: ParamGroup,
    /// Running BN statistics and the center vector are stored but never
    /// touched by the optimizer.
    pub trainable: bool,
}

/// Index of a parameter in its store. Valid only for the store that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// All tensors of a model: weights, biases, BN scale/shift and running
/// statistics. Names are unique; iteration order is insertion order, which
/// fixes the checkpoint layout and the optimizer walk order.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: ArrayD<f64>,
        group: ParamGroup,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DinError::config(format!("duplicate parameter name {name:?}")));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(DinError::numerical(format!("non-finite init for parameter {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, group, trainable });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total element count over trainable tensors.
    pub fn n_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for p in &self.params {
            if p.value.iter().any(|v| !v.is_finite()) {
                return Err(DinError::numerical(format!(
                    "parameter {:?} became non-finite",
                    p.name
                )));
            }
        }
        Ok(())
    }
}

/// Per-parameter gradients, index-aligned with a [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct GradientTape {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradientTape {
    pub fn new(store: &ParameterStore) -> Self {
        GradientTape { grads: vec![None; store.len()] }
    }

    /// Add `grad` into the slot for `id`, allocating it on first touch.
    pub fn accumulate(&mut self, id: ParamId, grad: ArrayD<f64>) {
        match &mut self.grads[id.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), grad.shape());
                *g += &grad;
            }
            slot @ None => *slot = Some(grad),
        }
    }

    /// Gradient for `id`; `None` when nothing flowed into it.
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// L2 norm over all accumulated gradients.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Multiply every accumulated gradient by `s`.
    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }
}

/// Kaiming fan-in normal init: N(0, sqrt(2 / fan_in)).
pub fn kaiming_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(shape, |_| sample_standard_normal(rng) * std)
}
