//! Depthwise 2-D convolution: one kernel per channel, no channel mixing.
//! Kernels here are small (3x3, 3x1, 5x1) so a direct loop beats im2col.

use ndarray::{Array3, Array4};
use rand::Rng;

use crate::error::Result;
use crate::nn::conv::{same_padding, valid_range};
use crate::nn::{kaiming_normal, GradientTape, ParamGroup, ParamId, ParameterStore};

#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub weight: ParamId, // (channels, kh, kw)
    pub bias: ParamId,   // (channels)
    pub channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

#[derive(Debug)]
pub struct DepthwiseCache {
    input: Array4<f64>,
}

impl DepthwiseConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{prefix}.weight"),
            kaiming_normal(&[channels, kh, kw], kh * kw, rng),
            group,
            true,
        )?;
        let bias = store.add(
            format!("{prefix}.bias"),
            ndarray::ArrayD::zeros(vec![channels]),
            group,
            true,
        )?;
        Ok(DepthwiseConv2d { weight, bias, channels, kh, kw, stride })
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        (same_padding(h, self.kh, self.stride).0, same_padding(w, self.kw, self.stride).0)
    }

    pub fn forward(
        &self,
        store: &ParameterStore,
        x: &Array4<f64>,
    ) -> (Array4<f64>, DepthwiseCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "depthwise channels {c} != {}", self.channels);
        let (oh, pad_top, _) = same_padding(h, self.kh, self.stride);
        let (ow, pad_left, _) = same_padding(w, self.kw, self.stride);
        let ws = weight_slice(store, self.weight);
        let bias = store.get(self.bias);
        let s = self.stride;
        let xs = x.as_slice().expect("depthwise input must be contiguous");

        let mut out = Array4::<f64>::zeros((n, c, oh, ow));
        {
            let os = out.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let xp = &xs[(ni * c + ci) * h * w..][..h * w];
                    let op = &mut os[(ni * c + ci) * oh * ow..][..oh * ow];
                    let wk = &ws[ci * self.kh * self.kw..][..self.kh * self.kw];
                    op.fill(bias[[ci]]);
                    for oy in 0..oh {
                        let orow = &mut op[oy * ow..][..ow];
                        for ki in 0..self.kh {
                            let iy = (oy * s + ki) as isize - pad_top as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xp[(iy as usize) * w..][..w];
                            for kj in 0..self.kw {
                                let wv = wk[ki * self.kw + kj];
                                let sx = kj as isize - pad_left as isize;
                                let (lo, hi) = valid_range(sx, s, w, ow);
                                if lo >= hi {
                                    continue;
                                }
                                if s == 1 {
                                    let start = (lo as isize + sx) as usize;
                                    for (o, &xv) in orow[lo..hi]
                                        .iter_mut()
                                        .zip(&xrow[start..start + (hi - lo)])
                                    {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for (i, o) in orow[lo..hi].iter_mut().enumerate() {
                                        *o += wv
                                            * xrow[(((lo + i) * s) as isize + sx) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (out, DepthwiseCache { input: x.clone() })
    }

    pub fn backward(
        &self,
        store: &ParameterStore,
        tape: &mut GradientTape,
        cache: &DepthwiseCache,
        grad_out: &Array4<f64>,
    ) -> Array4<f64> {
        let x = &cache.input;
        let (n, c, h, w) = x.dim();
        let (oh, pad_top, _) = same_padding(h, self.kh, self.stride);
        let (ow, pad_left, _) = same_padding(w, self.kw, self.stride);
        debug_assert_eq!(grad_out.dim(), (n, c, oh, ow));
        let ws = weight_slice(store, self.weight);
        let s = self.stride;
        let xs = x.as_slice().expect("depthwise input must be contiguous");
        let gs = grad_out.as_slice().expect("depthwise grad must be contiguous");

        let mut grad_w = Array3::<f64>::zeros((c, self.kh, self.kw));
        let gw = grad_w.as_slice_mut().unwrap();
        let mut grad_b = ndarray::Array1::<f64>::zeros(c);
        let mut grad_x = Array4::<f64>::zeros((n, c, h, w));
        let gxs = grad_x.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let xp = &xs[(ni * c + ci) * h * w..][..h * w];
                let gp = &gs[(ni * c + ci) * oh * ow..][..oh * ow];
                let gxp = &mut gxs[(ni * c + ci) * h * w..][..h * w];
                let wk = &ws[ci * self.kh * self.kw..][..self.kh * self.kw];
                let gwk = &mut gw[ci * self.kh * self.kw..][..self.kh * self.kw];
                grad_b[ci] += gp.iter().sum::<f64>();
                for oy in 0..oh {
                    let grow = &gp[oy * ow..][..ow];
                    for ki in 0..self.kh {
                        let iy = (oy * s + ki) as isize - pad_top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xp[(iy as usize) * w..][..w];
                        let gxrow = &mut gxp[(iy as usize) * w..][..w];
                        for kj in 0..self.kw {
                            let wv = wk[ki * self.kw + kj];
                            let sx = kj as isize - pad_left as isize;
                            let (lo, hi) = valid_range(sx, s, w, ow);
                            if lo >= hi {
                                continue;
                            }
                            if s == 1 {
                                let start = (lo as isize + sx) as usize;
                                let len = hi - lo;
                                let mut acc = 0.0;
                                for ((gx, &g), &xv) in gxrow[start..start + len]
                                    .iter_mut()
                                    .zip(&grow[lo..hi])
                                    .zip(&xrow[start..start + len])
                                {
                                    acc += g * xv;
                                    *gx += g * wv;
                                }
                                gwk[ki * self.kw + kj] += acc;
                            } else {
                                let mut acc = 0.0;
                                for (i, &g) in grow[lo..hi].iter().enumerate() {
                                    let ix = (((lo + i) * s) as isize + sx) as usize;
                                    acc += g * xrow[ix];
                                    gxrow[ix] += g * wv;
                                }
                                gwk[ki * self.kw + kj] += acc;
                            }
                        }
                    }
                }
            }
        }
        tape.accumulate(self.weight, grad_w.into_dyn());
        tape.accumulate(self.bias, grad_b.into_dyn());
        grad_x
    }
}

fn weight_slice(store: &ParameterStore, id: ParamId) -> &[f64] {
    store.get(id).as_slice().expect("depthwise weight must be contiguous")
}
