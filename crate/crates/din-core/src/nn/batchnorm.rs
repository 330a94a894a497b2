//! Batch normalization over feature maps (2d) and feature vectors (1d).
//!
//! Training mode normalizes with biased batch statistics and updates the
//! running estimates with the unbiased variance (momentum 0.1); eval mode
//! normalizes with the frozen running statistics, so a sample's output is
//! independent of its batch neighbours.

use ndarray::{Array1, ArrayD, Axis};

use crate::error::{DinError, Result};
use crate::nn::{GradientTape, Mode, ParamGroup, ParamId, ParameterStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Shared implementation; `NORM_AXES` semantics come from the rank of the
/// input (rank 4 -> reduce over N,H,W; rank 2 -> reduce over N).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

#[derive(Debug)]
pub struct BatchNormCache {
    x_hat: ArrayD<f64>,
    inv_std: Array1<f64>,
    set_size: usize,
    mode: Mode,
}

impl BatchNorm {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        channels: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        let gamma =
            store.add(format!("{prefix}.gamma"), ArrayD::ones(vec![channels]), group, true)?;
        let beta =
            store.add(format!("{prefix}.beta"), ArrayD::zeros(vec![channels]), group, true)?;
        let running_mean = store.add(
            format!("{prefix}.running_mean"),
            ArrayD::zeros(vec![channels]),
            group,
            false,
        )?;
        let running_var = store.add(
            format!("{prefix}.running_var"),
            ArrayD::ones(vec![channels]),
            group,
            false,
        )?;
        Ok(BatchNorm { gamma, beta, running_mean, running_var, channels })
    }

    /// Channel axis is 1 for rank-4 inputs and 1 for rank-2 inputs; all
    /// other axes form the normalization set.
    pub fn forward(
        &self,
        store: &mut ParameterStore,
        x: &ArrayD<f64>,
        mode: Mode,
    ) -> Result<(ArrayD<f64>, BatchNormCache)> {
        let c = x.shape()[1];
        if c != self.channels {
            return Err(DinError::shape(format!(
                "batchnorm expects {} channels, got {c}",
                self.channels
            )));
        }
        let set_size = x.len() / c;
        let (mean, var) = match mode {
            Mode::Train => {
                if set_size < 2 {
                    return Err(DinError::data(
                        "batchnorm in training mode needs a normalization set of at least 2",
                    ));
                }
                let (mean, var) = channel_moments(x, c);
                // running update uses the unbiased variance
                let unbiased = set_size as f64 / (set_size - 1) as f64;
                {
                    let rm = store.get_mut(self.running_mean);
                    for i in 0..c {
                        rm[[i]] = (1.0 - BN_MOMENTUM) * rm[[i]] + BN_MOMENTUM * mean[i];
                    }
                }
                {
                    let rv = store.get_mut(self.running_var);
                    for i in 0..c {
                        rv[[i]] = (1.0 - BN_MOMENTUM) * rv[[i]] + BN_MOMENTUM * var[i] * unbiased;
                    }
                }
                (mean, var)
            }
            Mode::Eval => {
                let rm = store.get(self.running_mean);
                let rv = store.get(self.running_var);
                let mean = Array1::from_iter((0..c).map(|i| rm[[i]]));
                let var = Array1::from_iter((0..c).map(|i| rv[[i]]));
                (mean, var)
            }
        };

        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut x_hat = ArrayD::<f64>::zeros(x.raw_dim());
        let mut y = ArrayD::<f64>::zeros(x.raw_dim());
        if let Some((n, hw)) = plane_geometry(x) {
            let xs = x.as_slice().unwrap();
            let xh = x_hat.as_slice_mut().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let o = (ni * c + ci) * hw;
                    let (m, is) = (mean[ci], inv_std[ci]);
                    let (g, b) = (gamma[[ci]], beta[[ci]]);
                    for i in o..o + hw {
                        let v = (xs[i] - m) * is;
                        xh[i] = v;
                        ys[i] = g * v + b;
                    }
                }
            }
        } else {
            for (ci, mut lane) in x_hat.axis_iter_mut(Axis(1)).enumerate() {
                let (m, is) = (mean[ci], inv_std[ci]);
                ndarray::Zip::from(&mut lane)
                    .and(&x.index_axis(Axis(1), ci))
                    .for_each(|o, &v| *o = (v - m) * is);
            }
            for (ci, mut lane) in y.axis_iter_mut(Axis(1)).enumerate() {
                let (g, b) = (gamma[[ci]], beta[[ci]]);
                ndarray::Zip::from(&mut lane)
                    .and(&x_hat.index_axis(Axis(1), ci))
                    .for_each(|o, &v| *o = g * v + b);
            }
        }
        Ok((y, BatchNormCache { x_hat, inv_std, set_size, mode }))
    }

    /// Eval-mode forward that neither mutates the store nor produces a
    /// cache; usable from shared references during concurrent scoring.
    pub fn forward_eval(&self, store: &ParameterStore, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let c = x.shape()[1];
        if c != self.channels {
            return Err(DinError::shape(format!(
                "batchnorm expects {} channels, got {c}",
                self.channels
            )));
        }
        let rm = store.get(self.running_mean);
        let rv = store.get(self.running_var);
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        if let Some((n, hw)) = plane_geometry(x) {
            let inv_std: Vec<f64> = (0..c).map(|ci| 1.0 / (rv[[ci]] + BN_EPS).sqrt()).collect();
            let xs = x.as_slice().unwrap();
            let mut y = ArrayD::<f64>::zeros(x.raw_dim());
            let ys = y.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let o = (ni * c + ci) * hw;
                    let (m, is) = (rm[[ci]], inv_std[ci]);
                    let (g, b) = (gamma[[ci]], beta[[ci]]);
                    for i in o..o + hw {
                        ys[i] = g * ((xs[i] - m) * is) + b;
                    }
                }
            }
            return Ok(y);
        }
        let mut y = x.clone();
        for (ci, mut lane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let inv_std = 1.0 / (rv[[ci]] + BN_EPS).sqrt();
            let (m, g, b) = (rm[[ci]], gamma[[ci]], beta[[ci]]);
            lane.mapv_inplace(|v| g * (v - m) * inv_std + b);
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        store: &ParameterStore,
        tape: &mut GradientTape,
        cache: &BatchNormCache,
        grad_out: &ArrayD<f64>,
    ) -> ArrayD<f64> {
        let c = self.channels;
        let m = cache.set_size as f64;
        let gamma = store.get(self.gamma);

        let mut grad_gamma = Array1::<f64>::zeros(c);
        let mut grad_beta = Array1::<f64>::zeros(c);
        let fast = match (plane_geometry(grad_out), plane_geometry(&cache.x_hat)) {
            (Some(a), Some(b)) if a == b => Some(a),
            _ => None,
        };
        if let Some((n, hw)) = fast {
            let gs = grad_out.as_slice().unwrap();
            let xhs = cache.x_hat.as_slice().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let o = (ni * c + ci) * hw;
                    let (mut gb, mut gg) = (0.0, 0.0);
                    for i in o..o + hw {
                        gb += gs[i];
                        gg += gs[i] * xhs[i];
                    }
                    grad_beta[ci] += gb;
                    grad_gamma[ci] += gg;
                }
            }
            let mut grad_x = ArrayD::<f64>::zeros(grad_out.raw_dim());
            let gx = grad_x.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let o = (ni * c + ci) * hw;
                    let scale = gamma[[ci]] * cache.inv_std[ci];
                    match cache.mode {
                        Mode::Train => {
                            let mean_g = grad_beta[ci] / m;
                            let mean_gxh = grad_gamma[ci] / m;
                            for i in o..o + hw {
                                gx[i] = scale * (gs[i] - mean_g - xhs[i] * mean_gxh);
                            }
                        }
                        Mode::Eval => {
                            for i in o..o + hw {
                                gx[i] = gs[i] * scale;
                            }
                        }
                    }
                }
            }
            tape.accumulate(self.gamma, grad_gamma.into_dyn());
            tape.accumulate(self.beta, grad_beta.into_dyn());
            return grad_x;
        }
        for ci in 0..c {
            let g_lane = grad_out.index_axis(Axis(1), ci);
            let xh_lane = cache.x_hat.index_axis(Axis(1), ci);
            grad_beta[ci] = g_lane.sum();
            grad_gamma[ci] = g_lane.iter().zip(xh_lane.iter()).map(|(g, xh)| g * xh).sum();
        }

        let mut grad_x = grad_out.clone();
        match cache.mode {
            Mode::Train => {
                for (ci, mut lane) in grad_x.axis_iter_mut(Axis(1)).enumerate() {
                    let mean_g = grad_beta[ci] / m;
                    let mean_gxh = grad_gamma[ci] / m;
                    let scale = gamma[[ci]] * cache.inv_std[ci];
                    let xh_lane = cache.x_hat.index_axis(Axis(1), ci);
                    ndarray::Zip::from(&mut lane).and(&xh_lane).for_each(|g, &xh| {
                        *g = scale * (*g - mean_g - xh * mean_gxh);
                    });
                }
            }
            Mode::Eval => {
                for (ci, mut lane) in grad_x.axis_iter_mut(Axis(1)).enumerate() {
                    let scale = gamma[[ci]] * cache.inv_std[ci];
                    lane.mapv_inplace(|g| g * scale);
                }
            }
        }
        tape.accumulate(self.gamma, grad_gamma.into_dyn());
        tape.accumulate(self.beta, grad_beta.into_dyn());
        grad_x
    }

    /// Force identity behaviour: gamma 1, beta 0, running mean 0, var 1.
    /// In eval mode the layer then computes x / sqrt(1 + eps).
    #[cfg(test)]
    pub fn set_identity(&self, store: &mut ParameterStore) {
        store.get_mut(self.gamma).fill(1.0);
        store.get_mut(self.beta).fill(0.0);
        store.get_mut(self.running_mean).fill(0.0);
        store.get_mut(self.running_var).fill(1.0 - BN_EPS);
    }
}

/// `Some((n, plane_len))` when the array is standard layout, so channel
/// lane `ci` of sample `ni` is the contiguous slice starting at
/// `(ni * c + ci) * plane_len`. Covers rank 2 (`plane_len` 1) and rank 4.
fn plane_geometry(x: &ArrayD<f64>) -> Option<(usize, usize)> {
    if x.ndim() < 2 || x.as_slice().is_none() {
        return None;
    }
    Some((x.shape()[0], x.shape()[2..].iter().product()))
}

fn channel_moments(x: &ArrayD<f64>, c: usize) -> (Array1<f64>, Array1<f64>) {
    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    if let Some((n, hw)) = plane_geometry(x) {
        let xs = x.as_slice().unwrap();
        let set = (n * hw) as f64;
        for ni in 0..n {
            for ci in 0..c {
                let o = (ni * c + ci) * hw;
                mean[ci] += xs[o..o + hw].iter().sum::<f64>();
            }
        }
        mean.mapv_inplace(|s| s / set);
        for ni in 0..n {
            for ci in 0..c {
                let o = (ni * c + ci) * hw;
                let m = mean[ci];
                var[ci] += xs[o..o + hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        }
        var.mapv_inplace(|s| s / set);
    } else {
        for ci in 0..c {
            let lane = x.index_axis(Axis(1), ci);
            let n = lane.len() as f64;
            let m = lane.sum() / n;
            mean[ci] = m;
            var[ci] = lane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        }
    }
    (mean, var)
}
