//! Dense 2-D convolution (stem 4x4 and all pointwise 1x1 convs) via
//! im2col + GEMM, with same-padding and analytic backward.
//!
//! Work is organized per sample: each sample's patch matrix is gathered
//! into a reused buffer and multiplied in one GEMM, and 1x1 stride-1 convs
//! skip the gather entirely (the input plane already is the patch matrix).

use ndarray::{Array2, Array4, ArrayView2};
use rand::Rng;

use crate::error::Result;
use crate::linalg;
use crate::nn::{kaiming_normal, GradientTape, ParamGroup, ParamId, ParameterStore};

/// Same-padding amounts: output length ceil(in/stride), any odd padding
/// goes after the data (TensorFlow convention).
pub fn same_padding(in_len: usize, kernel: usize, stride: usize) -> (usize, usize, usize) {
    let out = in_len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(in_len);
    let before = total / 2;
    (out, before, total - before)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

/// Backward needs the forward input (columns are re-gathered on demand).
#[derive(Debug)]
pub struct Conv2dCache {
    input: Array4<f64>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_c * kh * kw;
        let weight = store.add(
            format!("{prefix}.weight"),
            kaiming_normal(&[out_c, in_c, kh, kw], fan_in, rng),
            group,
            true,
        )?;
        let bias = store.add(
            format!("{prefix}.bias"),
            ndarray::ArrayD::zeros(vec![out_c]),
            group,
            true,
        )?;
        Ok(Conv2d { weight, bias, in_c, out_c, kh, kw, stride })
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        (same_padding(h, self.kh, self.stride).0, same_padding(w, self.kw, self.stride).0)
    }

    fn is_pointwise_identity(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    pub fn forward(&self, store: &ParameterStore, x: &Array4<f64>) -> (Array4<f64>, Conv2dCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "conv input channels {c} != {}", self.in_c);
        let (oh, ow) = self.out_shape(h, w);
        let p = oh * ow;
        let (in_plane, out_plane) = (c * h * w, self.out_c * p);
        let w_mat = weight_matrix(store, self.weight, self.out_c);
        let xs = x.as_slice().expect("conv input must be contiguous");

        let mut out = Array4::<f64>::zeros((n, self.out_c, oh, ow));
        {
            let os = out.as_slice_mut().unwrap();
            if self.is_pointwise_identity() {
                for ni in 0..n {
                    let x2 = ArrayView2::from_shape((c, p), &xs[ni * in_plane..][..in_plane])
                        .unwrap();
                    linalg::matmul_into(&w_mat.view(), &x2, &mut os[ni * out_plane..][..out_plane]);
                }
            } else {
                let geo = self.geometry(h, w);
                let mut cols = vec![0.0f64; c * self.kh * self.kw * p];
                for ni in 0..n {
                    im2col_sample(&xs[ni * in_plane..][..in_plane], &geo, &mut cols);
                    let c2 =
                        ArrayView2::from_shape((c * self.kh * self.kw, p), &cols[..]).unwrap();
                    linalg::matmul_into(&w_mat.view(), &c2, &mut os[ni * out_plane..][..out_plane]);
                }
            }
            let bias = store.get(self.bias);
            for ni in 0..n {
                for co in 0..self.out_c {
                    let b = bias[[co]];
                    for v in &mut os[ni * out_plane + co * p..][..p] {
                        *v += b;
                    }
                }
            }
        }
        (out, Conv2dCache { input: x.clone() })
    }

    /// Accumulates weight/bias gradients into `tape`; returns grad w.r.t. input.
    pub fn backward(
        &self,
        store: &ParameterStore,
        tape: &mut GradientTape,
        cache: &Conv2dCache,
        grad_out: &Array4<f64>,
    ) -> Array4<f64> {
        let (n, c, h, w) = cache.input.dim();
        let (oc, oh, ow) = (grad_out.dim().1, grad_out.dim().2, grad_out.dim().3);
        debug_assert_eq!(oc, self.out_c);
        let p = oh * ow;
        let (in_plane, out_plane) = (c * h * w, oc * p);
        let w_mat = weight_matrix(store, self.weight, self.out_c);
        let xs = cache.input.as_slice().expect("conv input must be contiguous");
        let gs = grad_out.as_slice().expect("conv grad must be contiguous");

        let kdim = c * self.kh * self.kw;
        let mut grad_w = Array2::<f64>::zeros((oc, kdim));
        let mut grad_b = ndarray::Array1::<f64>::zeros(oc);
        let mut grad_x = Array4::<f64>::zeros((n, c, h, w));
        {
            let gxs = grad_x.as_slice_mut().unwrap();
            if self.is_pointwise_identity() {
                for ni in 0..n {
                    let g2 = ArrayView2::from_shape((oc, p), &gs[ni * out_plane..][..out_plane])
                        .unwrap();
                    let x2 = ArrayView2::from_shape((c, p), &xs[ni * in_plane..][..in_plane])
                        .unwrap();
                    linalg::matmul_nt_acc(&g2, &x2, &mut grad_w);
                    linalg::matmul_tn_into(&w_mat.view(), &g2, &mut gxs[ni * in_plane..][..in_plane]);
                }
            } else {
                let geo = self.geometry(h, w);
                let mut cols = vec![0.0f64; kdim * p];
                let mut gcols = vec![0.0f64; kdim * p];
                for ni in 0..n {
                    im2col_sample(&xs[ni * in_plane..][..in_plane], &geo, &mut cols);
                    let g2 = ArrayView2::from_shape((oc, p), &gs[ni * out_plane..][..out_plane])
                        .unwrap();
                    let c2 = ArrayView2::from_shape((kdim, p), &cols[..]).unwrap();
                    linalg::matmul_nt_acc(&g2, &c2, &mut grad_w);
                    linalg::matmul_tn_into(&w_mat.view(), &g2, &mut gcols);
                    col2im_sample(&gcols, &geo, &mut gxs[ni * in_plane..][..in_plane]);
                }
            }
        }
        for ni in 0..n {
            for co in 0..oc {
                grad_b[co] += gs[ni * out_plane + co * p..][..p].iter().sum::<f64>();
            }
        }
        tape.accumulate(
            self.weight,
            grad_w
                .into_shape_with_order(vec![self.out_c, self.in_c, self.kh, self.kw])
                .unwrap(),
        );
        tape.accumulate(self.bias, grad_b.into_dyn());
        grad_x
    }

    fn geometry(&self, h: usize, w: usize) -> PatchGeometry {
        let (oh, pad_top, _) = same_padding(h, self.kh, self.stride);
        let (ow, pad_left, _) = same_padding(w, self.kw, self.stride);
        PatchGeometry {
            c: self.in_c,
            h,
            w,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad_top,
            pad_left,
            oh,
            ow,
        }
    }
}

fn weight_matrix(store: &ParameterStore, id: ParamId, out_c: usize) -> Array2<f64> {
    let w = store.get(id);
    w.view()
        .into_shape_with_order((out_c, w.len() / out_c))
        .unwrap()
        .to_owned()
}

/// Everything the per-sample patch gather/scatter needs.
struct PatchGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

/// Output positions whose input index `ox*stride + shift` lands in
/// [0, limit): returns the half-open `ox` range.
pub(crate) fn valid_range(
    shift: isize,
    stride: usize,
    limit: usize,
    out_len: usize,
) -> (usize, usize) {
    let lo = if shift >= 0 { 0 } else { ((-shift) as usize).div_ceil(stride) };
    let max_in = limit as isize - 1 - shift;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = (max_in as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Gather one sample's patches: cols[(c*kh + ki)*kw + kj, oy*ow + ox] =
/// x[c, oy*stride - pad_top + ki, ox*stride - pad_left + kj], zero outside
/// the input (same-padding).
fn im2col_sample(xp: &[f64], g: &PatchGeometry, cols: &mut [f64]) {
    let p = g.oh * g.ow;
    debug_assert_eq!(xp.len(), g.c * g.h * g.w);
    debug_assert_eq!(cols.len(), g.c * g.kh * g.kw * p);
    for ci in 0..g.c {
        let plane = &xp[ci * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ki) * g.kw + kj) * p..][..p];
                let sy = ki as isize - g.pad_top as isize;
                let sx = kj as isize - g.pad_left as isize;
                let clips = sy < 0
                    || sx < 0
                    || ((g.oh - 1) * g.stride) as isize + sy >= g.h as isize
                    || ((g.ow - 1) * g.stride) as isize + sx >= g.w as isize;
                if clips {
                    row.fill(0.0);
                }
                let (lo, hi) = valid_range(sx, g.stride, g.w, g.ow);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = (oy * g.stride) as isize + sy;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow = &plane[(iy as usize) * g.w..][..g.w];
                    let orow = &mut row[oy * g.ow..][..g.ow];
                    if g.stride == 1 {
                        let start = (lo as isize + sx) as usize;
                        orow[lo..hi].copy_from_slice(&xrow[start..start + (hi - lo)]);
                    } else {
                        for (ox, o) in orow[lo..hi].iter_mut().enumerate() {
                            *o = xrow[(((lo + ox) * g.stride) as isize + sx) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add one sample's column gradients back to input positions.
fn col2im_sample(gcols: &[f64], g: &PatchGeometry, gxp: &mut [f64]) {
    let p = g.oh * g.ow;
    debug_assert_eq!(gxp.len(), g.c * g.h * g.w);
    debug_assert_eq!(gcols.len(), g.c * g.kh * g.kw * p);
    for ci in 0..g.c {
        let plane = &mut gxp[ci * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &gcols[((ci * g.kh + ki) * g.kw + kj) * p..][..p];
                let sy = ki as isize - g.pad_top as isize;
                let sx = kj as isize - g.pad_left as isize;
                let (lo, hi) = valid_range(sx, g.stride, g.w, g.ow);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = (oy * g.stride) as isize + sy;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow = &mut plane[(iy as usize) * g.w..][..g.w];
                    let grow = &row[oy * g.ow..][..g.ow];
                    if g.stride == 1 {
                        let start = (lo as isize + sx) as usize;
                        for (dst, src) in xrow[start..start + (hi - lo)]
                            .iter_mut()
                            .zip(&grow[lo..hi])
                        {
                            *dst += *src;
                        }
                    } else {
                        for (ox, src) in grow[lo..hi].iter().enumerate() {
                            xrow[(((lo + ox) * g.stride) as isize + sx) as usize] += *src;
                        }
                    }
                }
            }
        }
    }
}
