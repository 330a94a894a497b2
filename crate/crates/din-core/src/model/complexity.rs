//! Parameter and FLOP accounting for the deployable network.
//!
//! Conventions (fixed so the numbers are reproducible): one
//! multiply-accumulate counts as 2 FLOPs, a bias add as 1 FLOP per output
//! element, batch norm (eval form) and GELU as 2 FLOPs per element each,
//! the residual add as 1 FLOP per element, and global max pooling as 1
//! comparison FLOP per input element.

use crate::error::Result;
use crate::model::{DinConfig, DinModel, Stage};
use crate::nn::conv::same_padding;

/// Number of trainable parameters a freshly built model of the given stage
/// exposes to the optimizer. The deployed count is `Stage::Stage2`
/// (backbone + Entropy head).
pub fn count_parameters(cfg: &DinConfig, stage: Stage) -> Result<u64> {
    let model = match stage {
        Stage::Stage1 => DinModel::new_stage1(cfg, 0)?,
        Stage::Stage2 => DinModel::new_stage2(cfg, 0)?,
    };
    Ok(model.store.n_trainable() as u64)
}

/// Analytic FLOP count for one inference pass of the deployed network
/// (backbone + Entropy head) on a single `in_channels x h x w` input.
pub fn count_flops(cfg: &DinConfig, input_hw: (usize, usize)) -> Result<u64> {
    cfg.validate()?;
    let (mut h, mut w) = input_hw;
    let mut flops: u64 = 0;

    // stem: conv + BN + GELU
    let (oh, _, _) = same_padding(h, cfg.stem_kernel, cfg.stem_stride);
    let (ow, _, _) = same_padding(w, cfg.stem_kernel, cfg.stem_stride);
    flops += conv_flops(cfg.in_channels, cfg.stem_channels, cfg.stem_kernel, cfg.stem_kernel, oh, ow);
    flops += elementwise_flops(cfg.stem_channels, oh, ow, 2); // BN
    flops += elementwise_flops(cfg.stem_channels, oh, ow, 2); // GELU
    (h, w) = (oh, ow);

    let mut in_c = cfg.stem_channels;
    for i in 0..4 {
        let out_c = cfg.block_channels[i];
        let s = cfg.block_strides[i];
        let (oh, _, _) = same_padding(h, 1, s);
        let (ow, _, _) = same_padding(w, 1, s);
        flops += block_flops(in_c, out_c, s, oh, ow);
        (h, w) = (oh, ow);
        in_c = out_c;
    }

    // global max pooling: one comparison per input element
    flops += elementwise_flops(cfg.embedding_dim, h, w, 1);

    // entropy head on the pooled vector
    flops += 2 * (cfg.embedding_dim * cfg.entropy_classes) as u64 + cfg.entropy_classes as u64;

    Ok(flops)
}

fn elementwise_flops(c: usize, h: usize, w: usize, per_element: u64) -> u64 {
    (c * h * w) as u64 * per_element
}

/// Dense conv producing `out_c x oh x ow`: 2 FLOPs per MAC plus the bias.
fn conv_flops(in_c: usize, out_c: usize, kh: usize, kw: usize, oh: usize, ow: usize) -> u64 {
    let out_elems = (out_c * oh * ow) as u64;
    out_elems * (2 * (in_c * kh * kw) as u64) + out_elems
}

/// Depthwise conv keeps the channel count: MACs per element = kh*kw.
fn dw_flops(c: usize, kh: usize, kw: usize, oh: usize, ow: usize) -> u64 {
    let out_elems = (c * oh * ow) as u64;
    out_elems * (2 * (kh * kw) as u64) + out_elems
}

/// One Dew-Inc block at output resolution `oh x ow`. The depthwise convs
/// carry the block stride, so every sub-layer already runs at (oh, ow).
fn block_flops(in_c: usize, out_c: usize, stride: usize, oh: usize, ow: usize) -> u64 {
    let q = out_c / 4;
    let bn_gelu = |c: usize| elementwise_flops(c, oh, ow, 4);
    let pw = conv_flops(in_c, q, 1, 1, oh, ow) + bn_gelu(q);

    // branch A: pointwise only
    let mut flops = pw;
    // branches B, C, D: depthwise (+BN+GELU) then pointwise (+BN+GELU)
    for (kh, kw) in [(3, 3), (3, 1), (5, 1)] {
        flops += dw_flops(in_c, kh, kw, oh, ow) + bn_gelu(in_c) + pw;
    }
    // projection shortcut: conv + BN, no GELU
    if in_c != out_c || stride != 1 {
        flops += conv_flops(in_c, out_c, 1, 1, oh, ow) + elementwise_flops(out_c, oh, ow, 2);
    }
    // residual add
    flops += elementwise_flops(out_c, oh, ow, 1);
    flops
}
