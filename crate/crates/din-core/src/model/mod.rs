//! The Depthwise-Inception Network: configuration, model assembly,
//! forward/backward, and complexity accounting.

pub mod block;
pub mod complexity;
pub mod heads;

pub use block::{DewIncBlock, Stem};
pub use complexity::{count_flops, count_parameters};
pub use heads::{ContrastiveHead, EntropyHead, SoftmaxHead};

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{DinError, Result};
use crate::nn::pool::{global_max_pool, global_max_pool_backward, MaxPoolCache};
use crate::nn::{GradientTape, Mode, ParamGroup, ParamId, ParameterStore};
use crate::rng;

/// Which head set a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Backbone + Softmax head + Contrastive head (+ A-Softmax class
    /// weights and the center vector).
    Stage1,
    /// Backbone + Entropy head.
    Stage2,
}

/// Coarse class used by the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupLabel {
    Bonafide,
    Tts,
    Vc,
}

/// Network geometry. The default lands the deployable network (backbone +
/// Entropy head) at 1,770,212 trainable parameters and roughly 1.0 GFLOPs
/// per 3x128x128 segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DinConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub block_channels: [usize; 4],
    pub block_strides: [usize; 4],
    /// Backbone embedding width D; must equal `block_channels[3]`.
    pub embedding_dim: usize,
    pub softmax_head_hidden: usize,
    pub n_classes_stage1: usize,
    pub contrastive_dim: usize,
    pub entropy_classes: usize,
}

impl Default for DinConfig {
    fn default() -> Self {
        DinConfig {
            in_channels: 3,
            stem_channels: 90,
            stem_kernel: 4,
            stem_stride: 2,
            block_channels: [180, 360, 720, 720],
            block_strides: [1, 2, 2, 2],
            embedding_dim: 720,
            softmax_head_hidden: 128,
            n_classes_stage1: 7,
            contrastive_dim: 128,
            entropy_classes: 2,
        }
    }
}

impl DinConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("stem_channels", self.stem_channels),
            ("stem_kernel", self.stem_kernel),
            ("stem_stride", self.stem_stride),
            ("embedding_dim", self.embedding_dim),
            ("softmax_head_hidden", self.softmax_head_hidden),
            ("contrastive_dim", self.contrastive_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DinError::config(format!("{name} must be > 0")));
            }
        }
        for (i, &c) in self.block_channels.iter().enumerate() {
            if c == 0 {
                return Err(DinError::config(format!("block_channels[{i}] must be > 0")));
            }
            if c % 4 != 0 {
                return Err(DinError::config(format!(
                    "block_channels[{i}] = {c} must be divisible by 4 (four branches)"
                )));
            }
        }
        for (i, &s) in self.block_strides.iter().enumerate() {
            if s == 0 {
                return Err(DinError::config(format!("block_strides[{i}] must be > 0")));
            }
        }
        if self.embedding_dim != self.block_channels[3] {
            return Err(DinError::config(format!(
                "embedding_dim {} must equal block_channels[3] = {}",
                self.embedding_dim, self.block_channels[3]
            )));
        }
        if self.n_classes_stage1 < 2 {
            return Err(DinError::config("n_classes_stage1 must be >= 2"));
        }
        if self.entropy_classes < 2 {
            return Err(DinError::config("entropy_classes must be >= 2"));
        }
        Ok(())
    }
}

/// Backbone outputs plus both stage-1 head embeddings for one batch,
/// aligned with per-sample labels.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    /// Backbone embeddings, N x D.
    pub x: Array2<f64>,
    /// Softmax-head embeddings, N x d_y.
    pub y: Array2<f64>,
    /// Contrastive-head embeddings, N x d_z.
    pub z: Array2<f64>,
    /// Stage-1 class labels in [0, n_classes_stage1).
    pub labels: Vec<usize>,
    pub group_labels: Vec<GroupLabel>,
}

impl EmbeddingBatch {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let n = self.x.nrows();
        if self.y.nrows() != n || self.z.nrows() != n {
            return Err(DinError::shape("embedding batch row counts disagree"));
        }
        if self.labels.len() != n || self.group_labels.len() != n {
            return Err(DinError::shape("embedding batch label counts disagree"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= n_classes) {
            return Err(DinError::data(format!(
                "label {bad} outside configured class range 0..{n_classes}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum ModelHeads {
    Stage1 {
        softmax: SoftmaxHead,
        contrastive: ContrastiveHead,
        /// d_y x n_classes A-Softmax class weights (owned by the loss
        /// conceptually, stored here so the optimizer and checkpoints see it).
        asoftmax_weight: ParamId,
        /// Center-loss vector c (length D); never receives gradients.
        center: ParamId,
    },
    Stage2 {
        entropy: EntropyHead,
    },
}

/// Backbone forward trace for one batch.
#[derive(Debug)]
pub struct BackboneTrace {
    stem: block::StemCache,
    blocks: Vec<block::DewIncBlockCache>,
    pool: MaxPoolCache,
}

#[derive(Debug)]
pub struct Stage1Trace {
    backbone: BackboneTrace,
    softmax: heads::SoftmaxHeadCache,
    contrastive: heads::ContrastiveHeadCache,
}

#[derive(Debug)]
pub struct Stage2Trace {
    backbone: BackboneTrace,
    entropy: heads::EntropyHeadCache,
}

#[derive(Debug)]
pub struct DinModel {
    pub cfg: DinConfig,
    pub store: ParameterStore,
    stem: Stem,
    blocks: Vec<DewIncBlock>,
    heads: ModelHeads,
}

impl DinModel {
    pub fn new_stage1(cfg: &DinConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut r = rng::stream(seed, "model-init", 0);
        let (stem, blocks) = build_backbone(&mut store, cfg, &mut r)?;
        let softmax =
            SoftmaxHead::init(&mut store, cfg.embedding_dim, cfg.softmax_head_hidden, &mut r)?;
        let contrastive =
            ContrastiveHead::init(&mut store, cfg.embedding_dim, cfg.contrastive_dim, &mut r)?;
        let mut w = crate::nn::kaiming_normal(
            &[cfg.softmax_head_hidden, cfg.n_classes_stage1],
            cfg.softmax_head_hidden,
            &mut r,
        );
        normalize_columns(&mut w);
        let asoftmax_weight = store.add("asoftmax.weight", w, ParamGroup::Head, true)?;
        let center = store.add(
            "center.c",
            ndarray::ArrayD::zeros(vec![cfg.embedding_dim]),
            ParamGroup::Head,
            false,
        )?;
        Ok(DinModel {
            cfg: cfg.clone(),
            store,
            stem,
            blocks,
            heads: ModelHeads::Stage1 { softmax, contrastive, asoftmax_weight, center },
        })
    }

    pub fn new_stage2(cfg: &DinConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut r = rng::stream(seed, "model-init", 1);
        let (stem, blocks) = build_backbone(&mut store, cfg, &mut r)?;
        let entropy =
            EntropyHead::init(&mut store, cfg.embedding_dim, cfg.entropy_classes, &mut r)?;
        Ok(DinModel {
            cfg: cfg.clone(),
            store,
            stem,
            blocks,
            heads: ModelHeads::Stage2 { entropy },
        })
    }

    pub fn stage(&self) -> Stage {
        match self.heads {
            ModelHeads::Stage1 { .. } => Stage::Stage1,
            ModelHeads::Stage2 { .. } => Stage::Stage2,
        }
    }

    pub fn heads(&self) -> &ModelHeads {
        &self.heads
    }

    pub fn asoftmax_weight(&self) -> Result<ParamId> {
        match &self.heads {
            ModelHeads::Stage1 { asoftmax_weight, .. } => Ok(*asoftmax_weight),
            ModelHeads::Stage2 { .. } => {
                Err(DinError::config("stage-2 model has no A-Softmax weights"))
            }
        }
    }

    pub fn center_id(&self) -> Result<ParamId> {
        match &self.heads {
            ModelHeads::Stage1 { center, .. } => Ok(*center),
            ModelHeads::Stage2 { .. } => Err(DinError::config("stage-2 model has no center")),
        }
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(DinError::shape(format!(
                "input has {c} channels, model expects {}",
                self.cfg.in_channels
            )));
        }
        if h == 0 || w == 0 {
            return Err(DinError::shape("input has empty spatial dims"));
        }
        Ok(())
    }

    /// Training-mode backbone pass: batch-stat BN (running stats update).
    pub fn forward_backbone_train(
        &mut self,
        x: &Array4<f64>,
    ) -> Result<(Array2<f64>, BackboneTrace)> {
        self.check_input(x)?;
        let n = x.dim().0;
        let (mut h, mut w) = self.stem.conv.out_shape(x.dim().2, x.dim().3);
        let (mut fmap, stem_cache) = self.stem.forward(&mut self.store, x, Mode::Train)?;
        assert_eq!(fmap.dim(), (n, self.cfg.stem_channels, h, w), "stem shape audit");
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (next, cache) = block.forward(&mut self.store, &fmap, Mode::Train)?;
            (h, w) = block.out_shape(h, w);
            assert_eq!(
                next.dim(),
                (n, self.cfg.block_channels[i], h, w),
                "block {i} shape audit"
            );
            fmap = next;
            block_caches.push(cache);
        }
        let (x_emb, pool_cache) = global_max_pool(&fmap);
        assert_eq!(x_emb.dim(), (n, self.cfg.embedding_dim), "embedding shape audit");
        Ok((x_emb, BackboneTrace { stem: stem_cache, blocks: block_caches, pool: pool_cache }))
    }

    /// Inference-mode backbone pass: frozen BN statistics, no mutation, no
    /// caches. Safe to call concurrently from scoring workers.
    pub fn embed_eval(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut fmap = self.stem.forward_eval(&self.store, x)?;
        for block in &self.blocks {
            fmap = block.forward_eval(&self.store, &fmap)?;
        }
        let (x_emb, _) = global_max_pool(&fmap);
        Ok(x_emb)
    }

    pub fn backward_backbone(
        &self,
        tape: &mut GradientTape,
        trace: &BackboneTrace,
        grad_x: &Array2<f64>,
    ) {
        let mut g = global_max_pool_backward(&trace.pool, grad_x);
        for (block, cache) in self.blocks.iter().zip(trace.blocks.iter()).rev() {
            g = block.backward(&self.store, tape, cache, &g);
        }
        self.stem.backward(&self.store, tape, &trace.stem, &g);
    }

    /// Stage-1 training pass: X, Y, Z for one batch.
    pub fn forward_stage1_train(
        &mut self,
        input: &Array4<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>, Stage1Trace)> {
        let (x_emb, backbone) = self.forward_backbone_train(input)?;
        let ModelHeads::Stage1 { softmax, contrastive, .. } = &self.heads else {
            return Err(DinError::config("stage-1 forward on a stage-2 model"));
        };
        let (y, softmax_cache) = softmax.forward(&mut self.store, &x_emb, Mode::Train)?;
        let (z, contrastive_cache) = contrastive.forward(&mut self.store, &x_emb, Mode::Train)?;
        Ok((
            x_emb,
            y,
            z,
            Stage1Trace { backbone, softmax: softmax_cache, contrastive: contrastive_cache },
        ))
    }

    /// Stage-1 backward: `grad_x` flows straight into the backbone output
    /// (center loss), `grad_y`/`grad_z` chain through their heads first.
    pub fn backward_stage1(
        &self,
        tape: &mut GradientTape,
        trace: &Stage1Trace,
        grad_x: &Array2<f64>,
        grad_y: &Array2<f64>,
        grad_z: &Array2<f64>,
    ) -> Result<()> {
        let ModelHeads::Stage1 { softmax, contrastive, .. } = &self.heads else {
            return Err(DinError::config("stage-1 backward on a stage-2 model"));
        };
        let mut total = softmax.backward(&self.store, tape, &trace.softmax, grad_y);
        total += &contrastive.backward(&self.store, tape, &trace.contrastive, grad_z);
        total += grad_x;
        self.backward_backbone(tape, &trace.backbone, &total);
        Ok(())
    }

    /// Stage-2 training pass: entropy logits for one batch.
    pub fn forward_stage2_train(
        &mut self,
        input: &Array4<f64>,
    ) -> Result<(Array2<f64>, Stage2Trace)> {
        let (x_emb, backbone) = self.forward_backbone_train(input)?;
        let ModelHeads::Stage2 { entropy } = &self.heads else {
            return Err(DinError::config("stage-2 forward on a stage-1 model"));
        };
        let (logits, entropy_cache) = entropy.forward(&self.store, &x_emb);
        Ok((logits, Stage2Trace { backbone, entropy: entropy_cache }))
    }

    pub fn backward_stage2(
        &self,
        tape: &mut GradientTape,
        trace: &Stage2Trace,
        grad_logits: &Array2<f64>,
    ) -> Result<()> {
        let ModelHeads::Stage2 { entropy } = &self.heads else {
            return Err(DinError::config("stage-2 backward on a stage-1 model"));
        };
        let grad_x = entropy.backward(&self.store, tape, &trace.entropy, grad_logits);
        self.backward_backbone(tape, &trace.backbone, &grad_x);
        Ok(())
    }

    /// Inference-mode entropy logits (stage-2 models only).
    pub fn logits_eval(&self, input: &Array4<f64>) -> Result<Array2<f64>> {
        let x_emb = self.embed_eval(input)?;
        let ModelHeads::Stage2 { entropy } = &self.heads else {
            return Err(DinError::config("logits_eval on a stage-1 model"));
        };
        let (logits, _) = entropy.forward(&self.store, &x_emb);
        Ok(logits)
    }
}

fn build_backbone<R: rand::Rng>(
    store: &mut ParameterStore,
    cfg: &DinConfig,
    rng: &mut R,
) -> Result<(Stem, Vec<DewIncBlock>)> {
    let stem = Stem::init(
        store,
        cfg.in_channels,
        cfg.stem_channels,
        cfg.stem_kernel,
        cfg.stem_stride,
        rng,
    )?;
    let mut blocks = Vec::with_capacity(4);
    let mut in_c = cfg.stem_channels;
    for i in 0..4 {
        let out_c = cfg.block_channels[i];
        blocks.push(DewIncBlock::init(store, i + 1, in_c, out_c, cfg.block_strides[i], rng)?);
        in_c = out_c;
    }
    Ok((stem, blocks))
}

fn normalize_columns(w: &mut ndarray::ArrayD<f64>) {
    let view = w.view_mut().into_dimensionality::<ndarray::Ix2>().expect("weight rank 2");
    normalize_columns_2d(view);
}

/// Rescale every column to unit L2 norm (A-Softmax invariant).
pub fn normalize_columns_2d(mut w: ndarray::ArrayViewMut2<f64>) {
    for mut col in w.columns_mut() {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|v| v / norm);
        }
    }
}

/// Stack per-segment f32 feature tensors into one f64 network input batch.
pub fn features_to_batch(feats: &[&Array3<f32>]) -> Result<Array4<f64>> {
    if feats.is_empty() {
        return Err(DinError::data("empty feature batch"));
    }
    let dim = feats[0].dim();
    let mut out = Array4::<f64>::zeros((feats.len(), dim.0, dim.1, dim.2));
    for (i, f) in feats.iter().enumerate() {
        if f.dim() != dim {
            return Err(DinError::shape(format!(
                "feature {i} has shape {:?}, expected {:?}",
                f.dim(),
                dim
            )));
        }
        for ((c, y, x), v) in f.indexed_iter() {
            out[[i, c, y, x]] = *v as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> DinConfig {
        DinConfig {
            in_channels: 3,
            stem_channels: 8,
            stem_kernel: 4,
            stem_stride: 2,
            block_channels: [8, 8, 16, 16],
            block_strides: [1, 2, 2, 2],
            embedding_dim: 16,
            softmax_head_hidden: 8,
            n_classes_stage1: 3,
            contrastive_dim: 8,
            entropy_classes: 2,
        }
    }

    #[test]
    fn default_config_is_valid() {
        DinConfig::default().validate().unwrap();
    }

    #[test]
    fn embedding_dim_mismatch_is_rejected() {
        let mut cfg = DinConfig::default();
        cfg.embedding_dim = 100;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn non_divisible_channels_are_rejected() {
        let mut cfg = DinConfig::default();
        cfg.block_channels[2] = 30;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage1_forward_produces_aligned_shapes() {
        let cfg = tiny_cfg();
        let mut model = DinModel::new_stage1(&cfg, 7).unwrap();
        let mut rng = crate::rng::stream(7, "model-x", 0);
        let x = Array4::from_shape_fn((3, 3, 32, 32), |_| {
            crate::rng::sample_standard_normal(&mut rng)
        });
        let (xe, y, z, _) = model.forward_stage1_train(&x).unwrap();
        assert_eq!(xe.dim(), (3, 16));
        assert_eq!(y.dim(), (3, 8));
        assert_eq!(z.dim(), (3, 8));
    }

    #[test]
    fn stage2_logits_have_two_columns() {
        let cfg = tiny_cfg();
        let mut model = DinModel::new_stage2(&cfg, 7).unwrap();
        let mut rng = crate::rng::stream(8, "model-x2", 0);
        let x = Array4::from_shape_fn((2, 3, 32, 32), |_| {
            crate::rng::sample_standard_normal(&mut rng)
        });
        let (logits, _) = model.forward_stage2_train(&x).unwrap();
        assert_eq!(logits.dim(), (2, 2));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let model = DinModel::new_stage2(&cfg, 3).unwrap();
        let mut rng = crate::rng::stream(9, "model-det", 0);
        let x = Array4::from_shape_fn((2, 3, 32, 32), |_| {
            crate::rng::sample_standard_normal(&mut rng)
        });
        let a = model.embed_eval(&x).unwrap();
        let b = model.embed_eval(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_embedding_is_batch_independent() {
        let cfg = tiny_cfg();
        let model = DinModel::new_stage2(&cfg, 3).unwrap();
        let mut rng = crate::rng::stream(10, "model-bi", 0);
        let x = Array4::from_shape_fn((4, 3, 32, 32), |_| {
            crate::rng::sample_standard_normal(&mut rng)
        });
        let all = model.embed_eval(&x).unwrap();
        let solo = model
            .embed_eval(&x.slice(ndarray::s![2..3, .., .., ..]).to_owned())
            .unwrap();
        for j in 0..16 {
            let diff = (all[[2, j]] - solo[[0, j]]).abs();
            assert!(diff < 1e-6, "dim {j}: {diff}");
        }
    }

    #[test]
    fn stage_mismatch_is_an_error() {
        let cfg = tiny_cfg();
        let mut s1 = DinModel::new_stage1(&cfg, 1).unwrap();
        let x = Array4::<f64>::zeros((2, 3, 32, 32));
        assert!(s1.forward_stage2_train(&x).is_err());
        let mut s2 = DinModel::new_stage2(&cfg, 1).unwrap();
        assert!(s2.forward_stage1_train(&x).is_err());
        assert!(s2.asoftmax_weight().is_err());
    }

    #[test]
    fn asoftmax_columns_are_unit_norm_at_init() {
        let cfg = tiny_cfg();
        let model = DinModel::new_stage1(&cfg, 2).unwrap();
        let w = model.store.get(model.asoftmax_weight().unwrap());
        let w = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for col in w.columns() {
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn features_to_batch_roundtrips_values() {
        let f = Array3::<f32>::from_shape_fn((3, 4, 5), |(c, y, x)| (c * 20 + y * 5 + x) as f32);
        let batch = features_to_batch(&[&f, &f]).unwrap();
        assert_eq!(batch.dim(), (2, 3, 4, 5));
        assert_eq!(batch[[1, 2, 3, 4]], f[[2, 3, 4]] as f64);
    }
}
