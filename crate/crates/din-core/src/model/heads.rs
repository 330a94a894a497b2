//! The three interchangeable heads over backbone embeddings.

use ndarray::Array2;
use rand::Rng;

use crate::error::Result;
use crate::nn::activation::{gelu_backward, gelu_forward, GeluCache};
use crate::nn::batchnorm::{BatchNorm, BatchNormCache};
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::{GradientTape, Mode, ParamGroup, ParameterStore};

fn to2(x: ndarray::ArrayD<f64>) -> Array2<f64> {
    x.into_dimensionality::<ndarray::Ix2>().expect("rank-2 embedding")
}

/// Y = GELU(BN(FC(X))). The class-weight FC that follows in Fig. 1 lives
/// in the A-Softmax loss as its weight matrix.
#[derive(Debug, Clone)]
pub struct SoftmaxHead {
    pub fc: Linear,
    pub bn: BatchNorm,
}

#[derive(Debug)]
pub struct SoftmaxHeadCache {
    fc: LinearCache,
    bn: BatchNormCache,
    gelu: GeluCache,
}

impl SoftmaxHead {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fc = Linear::init(store, "softmax_head.fc", in_dim, hidden, ParamGroup::Head, rng)?;
        let bn = BatchNorm::init(store, "softmax_head.bn", hidden, ParamGroup::Head)?;
        Ok(SoftmaxHead { fc, bn })
    }

    pub fn forward(
        &self,
        store: &mut ParameterStore,
        x: &Array2<f64>,
        mode: Mode,
    ) -> Result<(Array2<f64>, SoftmaxHeadCache)> {
        let (y, fc) = self.fc.forward(store, x);
        let (y, bn) = self.bn.forward(store, &y.into_dyn(), mode)?;
        let (y, gelu) = gelu_forward(&y);
        Ok((to2(y), SoftmaxHeadCache { fc, bn, gelu }))
    }

    pub fn backward(
        &self,
        store: &ParameterStore,
        tape: &mut GradientTape,
        cache: &SoftmaxHeadCache,
        grad_out: &Array2<f64>,
    ) -> Array2<f64> {
        let g = gelu_backward(&cache.gelu, &grad_out.clone().into_dyn());
        let g = self.bn.backward(store, tape, &cache.bn, &g);
        self.fc.backward(store, tape, &cache.fc, &to2(g))
    }
}

/// Z = GELU(BN(FC(GELU(BN(FC(X)))))): two identically configured dense
/// layers, each of width d_z.
#[derive(Debug, Clone)]
pub struct ContrastiveHead {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
}

#[derive(Debug)]
pub struct ContrastiveHeadCache {
    fc1: LinearCache,
    bn1: BatchNormCache,
    gelu1: GeluCache,
    fc2: LinearCache,
    bn2: BatchNormCache,
    gelu2: GeluCache,
}

impl ContrastiveHead {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        in_dim: usize,
        d_z: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fc1 = Linear::init(store, "contrastive_head.fc1", in_dim, d_z, ParamGroup::Head, rng)?;
        let bn1 = BatchNorm::init(store, "contrastive_head.bn1", d_z, ParamGroup::Head)?;
        let fc2 = Linear::init(store, "contrastive_head.fc2", d_z, d_z, ParamGroup::Head, rng)?;
        let bn2 = BatchNorm::init(store, "contrastive_head.bn2", d_z, ParamGroup::Head)?;
        Ok(ContrastiveHead { fc1, bn1, fc2, bn2 })
    }

    pub fn forward(
        &self,
        store: &mut ParameterStore,
        x: &Array2<f64>,
        mode: Mode,
    ) -> Result<(Array2<f64>, ContrastiveHeadCache)> {
        let (y, fc1) = self.fc1.forward(store, x);
        let (y, bn1) = self.bn1.forward(store, &y.into_dyn(), mode)?;
        let (y, gelu1) = gelu_forward(&y);
        let (y, fc2) = self.fc2.forward(store, &to2(y));
        let (y, bn2) = self.bn2.forward(store, &y.into_dyn(), mode)?;
        let (y, gelu2) = gelu_forward(&y);
        Ok((to2(y), ContrastiveHeadCache { fc1, bn1, gelu1, fc2, bn2, gelu2 }))
    }

    pub fn backward(
        &self,
        store: &ParameterStore,
        tape: &mut GradientTape,
        cache: &ContrastiveHeadCache,
        grad_out: &Array2<f64>,
    ) -> Array2<f64> {
        let g = gelu_backward(&cache.gelu2, &grad_out.clone().into_dyn());
        let g = self.bn2.backward(store, tape, &cache.bn2, &g);
        let g = self.fc2.backward(store, tape, &cache.fc2, &to2(g));
        let g = gelu_backward(&cache.gelu1, &g.into_dyn());
        let g = self.bn1.backward(store, tape, &cache.bn1, &g);
        self.fc1.backward(store, tape, &cache.fc1, &to2(g))
    }
}

/// Plain FC producing two-class logits; softmax lives in the loss.
#[derive(Debug, Clone)]
pub struct EntropyHead {
    pub fc: Linear,
}

#[derive(Debug)]
pub struct EntropyHeadCache {
    fc: LinearCache,
}

impl EntropyHead {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        in_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fc = Linear::init(store, "entropy_head.fc", in_dim, classes, ParamGroup::Head, rng)?;
        Ok(EntropyHead { fc })
    }

    pub fn forward(
        &self,
        store: &ParameterStore,
        x: &Array2<f64>,
    ) -> (Array2<f64>, EntropyHeadCache) {
        let (logits, fc) = self.fc.forward(store, x);
        (logits, EntropyHeadCache { fc })
    }

    pub fn backward(
        &self,
        store: &ParameterStore,
        tape: &mut GradientTape,
        cache: &EntropyHeadCache,
        grad_out: &Array2<f64>,
    ) -> Array2<f64> {
        self.fc.backward(store, tape, &cache.fc, grad_out)
    }
}
