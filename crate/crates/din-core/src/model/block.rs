//! Backbone layers: the stem and the Dew-Inc block.

use ndarray::Array4;
use rand::Rng;

use crate::error::{DinError, Result};
use crate::nn::activation::{gelu_backward, gelu_forward, GeluCache};
use crate::nn::batchnorm::{BatchNorm, BatchNormCache};
use crate::nn::conv::{Conv2d, Conv2dCache};
use crate::nn::depthwise::{DepthwiseCache, DepthwiseConv2d};
use crate::nn::{GradientTape, Mode, ParamGroup, ParameterStore};

fn to4(x: ndarray::ArrayD<f64>) -> Array4<f64> {
    x.into_dimensionality::<ndarray::Ix4>().expect("rank-4 feature map")
}

/// Conv 4x4 stride 2 (same padding) -> BN -> GELU.
#[derive(Debug, Clone)]
pub struct Stem {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

#[derive(Debug)]
pub struct StemCache {
    conv: Conv2dCache,
    bn: BatchNormCache,
    gelu: GeluCache,
}

impl Stem {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Conv2d::init(
            store, "stem.conv", in_c, out_c, kernel, kernel, stride, ParamGroup::Backbone, rng,
        )?;
        let bn = BatchNorm::init(store, "stem.bn", out_c, ParamGroup::Backbone)?;
        Ok(Stem { conv, bn })
    }

    pub fn forward(
        &self,
        store: &mut ParameterStore,
        x: &Array4<f64>,
        mode: Mode,
    ) -> Result<(Array4<f64>, StemCache)> {
        let (y, conv_cache) = self.conv.forward(store, x);
        let (y, bn_cache) = self.bn.forward(store, &y.into_dyn(), mode)?;
        let (y, gelu_cache) = gelu_forward(&y);
        Ok((to4(y), StemCache { conv: conv_cache, bn: bn_cache, gelu: gelu_cache }))
    }

    pub fn forward_eval(&self, store: &ParameterStore, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (y, _) = self.conv.forward(store, x);
        let y = self.bn.forward_eval(store, &y.into_dyn())?;
        Ok(to4(y.mapv(crate::nn::activation::gelu)))
    }

    pub fn backward(
        &self,
        store: &ParameterStore,
        tape: &mut GradientTape,
        cache: &StemCache,
        grad_out: &Array4<f64>,
    ) -> Array4<f64> {
        let g = gelu_backward(&cache.gelu, &grad_out.clone().into_dyn());
        let g = self.bn.backward(store, tape, &cache.bn, &g);
        self.conv.backward(store, tape, &cache.conv, &to4(g))
    }
}

/// Pointwise branch: 1x1 conv at the block stride -> BN -> GELU.
#[derive(Debug, Clone)]
pub struct PwBranch {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

#[derive(Debug)]
pub struct PwBranchCache {
    conv: Conv2dCache,
    bn: BatchNormCache,
    gelu: GeluCache,
}

impl PwBranch {
    fn init<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Conv2d::init(
            store,
            &format!("{prefix}.pw"),
            in_c,
            out_c,
            1,
            1,
            stride,
            ParamGroup::Backbone,
            rng,
        )?;
        let bn = BatchNorm::init(store, &format!("{prefix}.bn"), out_c, ParamGroup::Backbone)?;
        Ok(PwBranch { conv, bn })
    }

    fn forward(
        &self,
        store: &mut ParameterStore,
        x: &Array4<f64>,
        mode: Mode,
    ) -> Result<(Array4<f64>, PwBranchCache)> {
        let (y, conv) = self.conv.forward(store, x);
        let (y, bn) = self.bn.forward(store, &y.into_dyn(), mode)?;
        let (y, gelu) = gelu_forward(&y);
        Ok((to4(y), PwBranchCache { conv, bn, gelu }))
    }

    fn forward_eval(&self, store: &ParameterStore, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (y, _) = self.conv.forward(store, x);
        let y = self.bn.forward_eval(store, &y.into_dyn())?;
        Ok(to4(y.mapv(crate::nn::activation::gelu)))
    }

    fn backward(
        &self,
        store: &ParameterStore,
        tape: &mut GradientTape,
        cache: &PwBranchCache,
        grad_out: &Array4<f64>,
    ) -> Array4<f64> {
        let g = gelu_backward(&cache.gelu, &grad_out.clone().into_dyn());
        let g = self.bn.backward(store, tape, &cache.bn, &g);
        self.conv.backward(store, tape, &cache.conv, &to4(g))
    }
}

/// Depthwise-then-pointwise branch: DW conv (block stride) -> BN -> GELU ->
/// 1x1 conv (stride 1) -> BN -> GELU.
#[derive(Debug, Clone)]
pub struct DwPwBranch {
    pub dw: DepthwiseConv2d,
    pub dw_bn: BatchNorm,
    pub pw: Conv2d,
    pub pw_bn: BatchNorm,
}

#[derive(Debug)]
pub struct DwPwBranchCache {
    dw: DepthwiseCache,
    dw_bn: BatchNormCache,
    dw_gelu: GeluCache,
    pw: Conv2dCache,
    pw_bn: BatchNormCache,
    pw_gelu: GeluCache,
}

impl DwPwBranch {
    #[allow(clippy::too_many_arguments)]
    fn init<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dw = DepthwiseConv2d::init(
            store,
            &format!("{prefix}.dw"),
            in_c,
            kh,
            kw,
            stride,
            ParamGroup::Backbone,
            rng,
        )?;
        let dw_bn = BatchNorm::init(store, &format!("{prefix}.dw_bn"), in_c, ParamGroup::Backbone)?;
        let pw = Conv2d::init(
            store,
            &format!("{prefix}.pw"),
            in_c,
            out_c,
            1,
            1,
            1,
            ParamGroup::Backbone,
            rng,
        )?;
        let pw_bn =
            BatchNorm::init(store, &format!("{prefix}.pw_bn"), out_c, ParamGroup::Backbone)?;
        Ok(DwPwBranch { dw, dw_bn, pw, pw_bn })
    }

    fn forward(
        &self,
        store: &mut ParameterStore,
        x: &Array4<f64>,
        mode: Mode,
    ) -> Result<(Array4<f64>, DwPwBranchCache)> {
        let (y, dw) = self.dw.forward(store, x);
        let (y, dw_bn) = self.dw_bn.forward(store, &y.into_dyn(), mode)?;
        let (y, dw_gelu) = gelu_forward(&y);
        let (y, pw) = self.pw.forward(store, &to4(y));
        let (y, pw_bn) = self.pw_bn.forward(store, &y.into_dyn(), mode)?;
        let (y, pw_gelu) = gelu_forward(&y);
        Ok((to4(y), DwPwBranchCache { dw, dw_bn, dw_gelu, pw, pw_bn, pw_gelu }))
    }

    fn forward_eval(&self, store: &ParameterStore, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (y, _) = self.dw.forward(store, x);
        let y = self.dw_bn.forward_eval(store, &y.into_dyn())?;
        let y = to4(y.mapv(crate::nn::activation::gelu));
        let (y, _) = self.pw.forward(store, &y);
        let y = self.pw_bn.forward_eval(store, &y.into_dyn())?;
        Ok(to4(y.mapv(crate::nn::activation::gelu)))
    }

    fn backward(
        &self,
        store: &ParameterStore,
        tape: &mut GradientTape,
        cache: &DwPwBranchCache,
        grad_out: &Array4<f64>,
    ) -> Array4<f64> {
        let g = gelu_backward(&cache.pw_gelu, &grad_out.clone().into_dyn());
        let g = self.pw_bn.backward(store, tape, &cache.pw_bn, &g);
        let g = self.pw.backward(store, tape, &cache.pw, &to4(g));
        let g = gelu_backward(&cache.dw_gelu, &g.into_dyn());
        let g = self.dw_bn.backward(store, tape, &cache.dw_bn, &g);
        self.dw.backward(store, tape, &cache.dw, &to4(g))
    }
}

/// Projection shortcut: 1x1 conv at the block stride -> BN (no GELU,
/// ResNet convention for the residual path).
#[derive(Debug, Clone)]
pub struct Projection {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

#[derive(Debug)]
pub struct ProjectionCache {
    conv: Conv2dCache,
    bn: BatchNormCache,
}

/// One Dew-Inc block: four branches (1x1 pointwise; depthwise 3x3, 3x1,
/// 5x1 each followed by a pointwise 1x1), channel-concatenated, plus a
/// residual shortcut. No activation after the add.
///
/// Asymmetric kernels are (kh, kw) = (3,1) and (5,1): they mix along the
/// frequency axis only.
#[derive(Debug, Clone)]
pub struct DewIncBlock {
    pub a: PwBranch,
    pub b: DwPwBranch,
    pub c: DwPwBranch,
    pub d: DwPwBranch,
    pub shortcut: Option<Projection>,
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
}

#[derive(Debug)]
pub struct DewIncBlockCache {
    a: PwBranchCache,
    b: DwPwBranchCache,
    c: DwPwBranchCache,
    d: DwPwBranchCache,
    shortcut: Option<ProjectionCache>,
}

impl DewIncBlock {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        index: usize,
        in_c: usize,
        out_c: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if out_c % 4 != 0 {
            return Err(DinError::config(format!(
                "block {index}: out_channels {out_c} not divisible by 4"
            )));
        }
        let q = out_c / 4;
        let p = format!("block{index}");
        let a = PwBranch::init(store, &format!("{p}.branch_a"), in_c, q, stride, rng)?;
        let b = DwPwBranch::init(store, &format!("{p}.branch_b"), in_c, q, 3, 3, stride, rng)?;
        let c = DwPwBranch::init(store, &format!("{p}.branch_c"), in_c, q, 3, 1, stride, rng)?;
        let d = DwPwBranch::init(store, &format!("{p}.branch_d"), in_c, q, 5, 1, stride, rng)?;
        let shortcut = if in_c == out_c && stride == 1 {
            None
        } else {
            let conv = Conv2d::init(
                store,
                &format!("{p}.shortcut.conv"),
                in_c,
                out_c,
                1,
                1,
                stride,
                ParamGroup::Backbone,
                rng,
            )?;
            let bn =
                BatchNorm::init(store, &format!("{p}.shortcut.bn"), out_c, ParamGroup::Backbone)?;
            Some(Projection { conv, bn })
        };
        Ok(DewIncBlock { a, b, c, d, shortcut, in_c, out_c, stride })
    }

    pub fn forward(
        &self,
        store: &mut ParameterStore,
        x: &Array4<f64>,
        mode: Mode,
    ) -> Result<(Array4<f64>, DewIncBlockCache)> {
        let (ya, ca) = self.a.forward(store, x, mode)?;
        let (yb, cb) = self.b.forward(store, x, mode)?;
        let (yc, cc) = self.c.forward(store, x, mode)?;
        let (yd, cd) = self.d.forward(store, x, mode)?;
        let cat = concat_channels(&[&ya, &yb, &yc, &yd]);
        let (residual, shortcut_cache) = match &self.shortcut {
            None => (x.clone(), None),
            Some(p) => {
                let (s, conv) = p.conv.forward(store, x);
                let (s, bn) = p.bn.forward(store, &s.into_dyn(), mode)?;
                (to4(s), Some(ProjectionCache { conv, bn }))
            }
        };
        let out = cat + &residual;
        Ok((out, DewIncBlockCache { a: ca, b: cb, c: cc, d: cd, shortcut: shortcut_cache }))
    }

    pub fn forward_eval(&self, store: &ParameterStore, x: &Array4<f64>) -> Result<Array4<f64>> {
        let ya = self.a.forward_eval(store, x)?;
        let yb = self.b.forward_eval(store, x)?;
        let yc = self.c.forward_eval(store, x)?;
        let yd = self.d.forward_eval(store, x)?;
        let cat = concat_channels(&[&ya, &yb, &yc, &yd]);
        let residual = match &self.shortcut {
            None => x.clone(),
            Some(p) => {
                let (s, _) = p.conv.forward(store, x);
                to4(p.bn.forward_eval(store, &s.into_dyn())?)
            }
        };
        Ok(cat + &residual)
    }

    pub fn backward(
        &self,
        store: &ParameterStore,
        tape: &mut GradientTape,
        cache: &DewIncBlockCache,
        grad_out: &Array4<f64>,
    ) -> Array4<f64> {
        let q = self.out_c / 4;
        let ga = grad_out.slice(ndarray::s![.., 0..q, .., ..]).to_owned();
        let gb = grad_out.slice(ndarray::s![.., q..2 * q, .., ..]).to_owned();
        let gc = grad_out.slice(ndarray::s![.., 2 * q..3 * q, .., ..]).to_owned();
        let gd = grad_out.slice(ndarray::s![.., 3 * q..4 * q, .., ..]).to_owned();
        let mut grad_x = self.a.backward(store, tape, &cache.a, &ga);
        grad_x += &self.b.backward(store, tape, &cache.b, &gb);
        grad_x += &self.c.backward(store, tape, &cache.c, &gc);
        grad_x += &self.d.backward(store, tape, &cache.d, &gd);
        match (&self.shortcut, &cache.shortcut) {
            (None, None) => grad_x += grad_out,
            (Some(p), Some(c)) => {
                let g = p.bn.backward(store, tape, &c.bn, &grad_out.clone().into_dyn());
                grad_x += &p.conv.backward(store, tape, &c.conv, &to4(g));
            }
            _ => unreachable!("shortcut cache mismatches block structure"),
        }
        grad_x
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }
}

/// Channel-axis concatenation into a standard-layout array
/// (`ndarray::concatenate` returns a layout whose planes are not
/// contiguous, which every downstream kernel would pay for).
fn concat_channels(parts: &[&Array4<f64>]) -> Array4<f64> {
    let (n, _, h, w) = parts[0].dim();
    let c_total: usize = parts.iter().map(|p| p.dim().1).sum();
    let mut out = Array4::<f64>::zeros((n, c_total, h, w));
    let mut c0 = 0;
    for p in parts {
        let c = p.dim().1;
        out.slice_mut(ndarray::s![.., c0..c0 + c, .., ..]).assign(p);
        c0 += c;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn stem_halves_resolution_with_default_geometry() {
        let mut store = ParameterStore::new();
        let mut rng = crate::rng::stream(81, "stem", 0);
        let stem = Stem::init(&mut store, 3, 32, 4, 2, &mut rng).unwrap();
        let x = Array4::<f64>::zeros((2, 3, 128, 128));
        let (y, _) = stem.forward(&mut store, &x, Mode::Train).unwrap();
        assert_eq!(y.dim(), (2, 32, 64, 64));
    }

    #[test]
    fn stem_zero_input_zero_bias_gives_zero_output() {
        // conv(0)=0 (bias 0), BN with beta 0 maps 0 to 0, GELU(0)=0
        let mut store = ParameterStore::new();
        let mut rng = crate::rng::stream(82, "stem-zero", 0);
        let stem = Stem::init(&mut store, 3, 8, 4, 2, &mut rng).unwrap();
        let x = Array4::<f64>::zeros((2, 3, 8, 8));
        let (y, _) = stem.forward(&mut store, &x, Mode::Train).unwrap();
        assert!(y.iter().all(|&v| v == 0.0), "max {:?}", y.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn stem_scalar_case_equals_hand_evaluation() {
        // 1x1 spatial input in eval mode with identity BN: the 4x4 kernel
        // sees the input only at tap (1,1) (same-padding alignment), so
        // output c = GELU(sum_i w[c,i,1,1] * x_i + bias)
        let mut store = ParameterStore::new();
        let mut rng = crate::rng::stream(83, "stem-scalar", 0);
        let stem = Stem::init(&mut store, 2, 3, 4, 2, &mut rng).unwrap();
        stem.bn.set_identity(&mut store);
        let mut x = Array4::<f64>::zeros((1, 2, 1, 1));
        x[[0, 0, 0, 0]] = 0.7;
        x[[0, 1, 0, 0]] = -1.3;
        let y = stem.forward_eval(&store, &x).unwrap();
        assert_eq!(y.dim(), (1, 3, 1, 1));
        let w = store.get(stem.conv.weight);
        let b = store.get(stem.conv.bias);
        for c in 0..3 {
            let mix = w[ndarray::IxDyn(&[c, 0, 1, 1])] * 0.7
                + w[ndarray::IxDyn(&[c, 1, 1, 1])] * (-1.3)
                + b[[c]];
            assert_abs_diff_eq!(
                y[[0, c, 0, 0]],
                crate::nn::activation::gelu(mix),
                epsilon = 1e-12
            );
        }
    }

    fn toy_block(in_c: usize, out_c: usize, stride: usize) -> (ParameterStore, DewIncBlock) {
        let mut store = ParameterStore::new();
        let mut rng = crate::rng::stream(84, "block", (in_c * 100 + out_c) as u64);
        let block = DewIncBlock::init(&mut store, 1, in_c, out_c, stride, &mut rng).unwrap();
        (store, block)
    }

    #[test]
    fn block_output_shape_follows_stride_and_concat() {
        let (mut store, block) = toy_block(32, 64, 2);
        let x = Array4::<f64>::zeros((2, 32, 64, 64));
        let (y, _) = block.forward(&mut store, &x, Mode::Train).unwrap();
        assert_eq!(y.dim(), (2, 64, 32, 32));
    }

    #[test]
    fn identity_shortcut_passes_input_through_zeroed_branches() {
        // zero all branch tensors; with identity shortcut and BN mapping
        // 0 -> 0 the block output must equal its input exactly
        let (mut store, block) = toy_block(8, 8, 1);
        for (_, p) in store.iter_mut() {
            if p.trainable && !p.name.contains("running") {
                p.value.fill(0.0);
            }
        }
        let mut rng = crate::rng::stream(85, "block-id", 0);
        let x = Array4::from_shape_fn((2, 8, 6, 6), |_| {
            crate::rng::sample_standard_normal(&mut rng)
        });
        let (y, _) = block.forward(&mut store, &x, Mode::Train).unwrap();
        for (a, b) in y.iter().zip(x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn odd_out_channels_are_rejected() {
        let mut store = ParameterStore::new();
        let mut rng = crate::rng::stream(86, "block-odd", 0);
        assert!(DewIncBlock::init(&mut store, 0, 8, 10, 1, &mut rng).is_err());
    }

    #[test]
    fn projection_shortcut_appears_iff_shape_changes() {
        let (_, b1) = toy_block(8, 8, 1);
        assert!(b1.shortcut.is_none());
        let (_, b2) = toy_block(8, 16, 1);
        assert!(b2.shortcut.is_some());
        let (_, b3) = toy_block(8, 8, 2);
        assert!(b3.shortcut.is_some());
    }

    #[test]
    fn backward_matches_finite_difference_probe() {
        let (mut store, block) = toy_block(4, 8, 2);
        let mut rng = crate::rng::stream(87, "block-fd", 0);
        let x = Array4::from_shape_fn((2, 4, 6, 6), |_| {
            crate::rng::sample_standard_normal(&mut rng)
        });
        let loss = |store: &mut ParameterStore, x: &Array4<f64>| -> f64 {
            let saved: Vec<_> = store
                .iter()
                .filter(|(_, p)| !p.trainable)
                .map(|(id, p)| (id, p.value.clone()))
                .collect();
            let (y, _) = block.forward(store, x, Mode::Train).unwrap();
            for (id, v) in saved {
                store.get_mut(id).assign(&v);
            }
            y.iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        let (y, cache) = block.forward(&mut store, &x, Mode::Train).unwrap();
        let mut tape = GradientTape::new(&store);
        let grad_x = block.backward(&store, &mut tape, &cache, &y);

        let h = 1e-5;
        // probe input gradient
        let probe = [1usize, 2, 3, 4];
        let mut xp = x.clone();
        xp[probe] += h;
        let mut xm = x.clone();
        xm[probe] -= h;
        // undo the running-stat updates from the probe forwards
        let fd = (loss(&mut store, &xp) - loss(&mut store, &xm)) / (2.0 * h);
        assert_abs_diff_eq!(grad_x[probe], fd, epsilon = 1e-5);

        // probe one depthwise weight and the shortcut conv weight
        for name in ["block1.branch_c.dw.weight", "block1.shortcut.conv.weight"] {
            let id = store.id(name).unwrap();
            let idx: Vec<usize> = store.get(id).shape().iter().map(|_| 0).collect();
            let mut sp = store.clone();
            sp.get_mut(id)[ndarray::IxDyn(&idx)] += h;
            let mut sm = store.clone();
            sm.get_mut(id)[ndarray::IxDyn(&idx)] -= h;
            let fd = (loss(&mut sp, &x) - loss(&mut sm, &x)) / (2.0 * h);
            let analytic = tape.get(id).unwrap()[ndarray::IxDyn(&idx)];
            assert_abs_diff_eq!(analytic, fd, epsilon = 1e-5);
        }
    }
}
