//! Two-stage training plus the bonafide Gaussian fit.
//!
//! Stage 1 minimizes `αL1 + βL2 + γL3` (angular softmax, supervised
//! contrastive, center) over 7 classes. Stage 2 swaps in a fresh Entropy
//! head and fine-tunes two-class cross-entropy with a fast head rate and a
//! slow backbone rate. Stage 3 freezes everything and fits a Gaussian to
//! bonafide embeddings.
//!
//! The center vector `c` follows the paper's split rule: a full-dataset
//! bonafide mean at every epoch divisible by the refresh interval (including
//! epoch 0), and the current batch's bonafide mean after every step in
//! between. `c` never receives gradients.

pub mod adam;
pub mod batches;

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Array4, Ix2};
use serde::{Deserialize, Serialize};

pub use adam::{AdamParams, AdamState};
pub use batches::balanced_batches;

use crate::dsp::{spec_augment, SpecAugParams, SpectrogramTensor};
use crate::error::{DinError, Result};
use crate::gaussian::{fit_gaussian, BonafideGaussian};
use crate::io::checkpoint::save_checkpoint;
use crate::loss::{
    a_softmax_loss, center_loss, combined_loss, contrastive_loss, cross_entropy,
    AngularMarginParams, CenterState, ContrastiveParams, LossWeights,
};
use crate::model::{features_to_batch, normalize_columns_2d, DinModel, GroupLabel, Stage};
use crate::nn::GradientTape;
use crate::rng;

/// Everything the two training stages need. Defaults follow the paper where
/// it speaks and the ledger where it is silent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_stage1: u32,
    pub epochs_stage2: u32,
    pub batch_size: usize,
    pub lr_stage1: f64,
    pub lr_stage2_head: f64,
    pub lr_stage2_backbone: f64,
    pub adam: AdamParams,
    pub weights: LossWeights,
    pub angular: AngularMarginParams,
    pub contrastive: ContrastiveParams,
    pub center_refresh_interval: u32,
    pub seed: u64,
    pub min_bonafide_per_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_stage1: 50,
            epochs_stage2: 10,
            batch_size: 64,
            lr_stage1: 1e-4,
            lr_stage2_head: 1e-3,
            lr_stage2_backbone: 1e-5,
            adam: AdamParams::default(),
            weights: LossWeights::default(),
            angular: AngularMarginParams::default(),
            contrastive: ContrastiveParams::default(),
            center_refresh_interval: 5,
            seed: 0,
            min_bonafide_per_batch: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(DinError::config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.min_bonafide_per_batch >= self.batch_size {
            return Err(DinError::config(format!(
                "min_bonafide_per_batch {} must be below batch_size {}",
                self.min_bonafide_per_batch, self.batch_size
            )));
        }
        // Zero is allowed: it freezes a group (the stage-2 backbone-freeze
        // workflow depends on it).
        for (name, lr) in [
            ("lr_stage1", self.lr_stage1),
            ("lr_stage2_head", self.lr_stage2_head),
            ("lr_stage2_backbone", self.lr_stage2_backbone),
        ] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(DinError::config(format!("{name} must be finite and >= 0, got {lr}")));
            }
        }
        self.adam.validate()?;
        self.weights.validate()?;
        if self.angular.m < 1 {
            return Err(DinError::config("angular margin m must be >= 1"));
        }
        if !self.angular.s.is_finite() || self.angular.s <= 0.0 {
            return Err(DinError::config(format!(
                "angular scale s must be > 0, got {}",
                self.angular.s
            )));
        }
        if !self.contrastive.tau.is_finite() || self.contrastive.tau <= 0.0 {
            return Err(DinError::config(format!(
                "contrastive tau must be > 0, got {}",
                self.contrastive.tau
            )));
        }
        if self.center_refresh_interval == 0 {
            return Err(DinError::config("center_refresh_interval must be >= 1"));
        }
        Ok(())
    }
}

/// One training sample: the feature tensor of one segment plus its labels.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub tensor: SpectrogramTensor,
    /// Stage-1 class (0 = bonafide, then one id per attack family).
    pub class_label: usize,
    pub group: GroupLabel,
}

/// An in-memory training set; one entry per segment.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub samples: Vec<TrainSample>,
}

impl TrainSet {
    pub fn new(samples: Vec<TrainSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(DinError::data("training set is empty"));
        }
        let shape = samples[0].tensor.data.dim();
        for (i, s) in samples.iter().enumerate() {
            if s.tensor.data.dim() != shape {
                return Err(DinError::shape(format!(
                    "sample {i} has tensor shape {:?}, first sample has {:?}",
                    s.tensor.data.dim(),
                    shape
                )));
            }
            if (s.group == GroupLabel::Bonafide) != (s.class_label == 0) {
                return Err(DinError::data(format!(
                    "sample {i}: class {} conflicts with group {:?} (bonafide must be class 0)",
                    s.class_label, s.group
                )));
            }
        }
        Ok(TrainSet { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_bonafide(&self) -> usize {
        self.samples.iter().filter(|s| s.group == GroupLabel::Bonafide).count()
    }

    pub fn groups(&self) -> Vec<GroupLabel> {
        self.samples.iter().map(|s| s.group).collect()
    }

    fn check_against(&self, model: &DinModel) -> Result<()> {
        let (c, _, _) = self.samples[0].tensor.data.dim();
        if c != model.cfg.in_channels {
            return Err(DinError::shape(format!(
                "feature tensors have {c} channels, model expects {}",
                model.cfg.in_channels
            )));
        }
        if let Some(bad) =
            self.samples.iter().find(|s| s.class_label >= model.cfg.n_classes_stage1)
        {
            return Err(DinError::data(format!(
                "class label {} outside configured range 0..{}",
                bad.class_label, model.cfg.n_classes_stage1
            )));
        }
        Ok(())
    }
}

/// One line of the training log. All numeric fields are bit-reproducible
/// given the seed except `seconds` (wall time).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub epoch: u32,
    pub step: u64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

impl TrainLogRecord {
    /// Tab-separated `epoch step L1 L2 L3 L grad_norm seconds`.
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}",
            self.epoch, self.step, self.l1, self.l2, self.l3, self.total, self.grad_norm,
            self.seconds
        )
    }
}

/// Append training log lines to `path` (created if absent).
pub fn append_train_log(path: &Path, records: &[TrainLogRecord]) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| DinError::io(path, e))?;
    for r in records {
        writeln!(file, "{}", r.tsv_line()).map_err(|e| DinError::io(path, e))?;
    }
    Ok(())
}

/// Center bookkeeping trail, for schedule verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterEvent {
    /// Full-dataset bonafide mean, taken at an epoch boundary.
    GlobalRefresh { epoch: u32 },
    /// Current batch's bonafide mean, taken after an optimizer step.
    BatchUpdate { epoch: u32, step: u64 },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<TrainLogRecord>,
    pub center_events: Vec<CenterEvent>,
}

/// Inference-mode embeddings for the given sample indices, in order.
pub fn embed_samples(
    model: &DinModel,
    set: &TrainSet,
    indices: &[usize],
    chunk_size: usize,
) -> Result<Array2<f64>> {
    let d = model.cfg.embedding_dim;
    let mut out = Array2::<f64>::zeros((indices.len(), d));
    for (chunk_start, chunk) in indices.chunks(chunk_size.max(1)).enumerate() {
        let refs: Vec<&Array3<f32>> =
            chunk.iter().map(|&i| &set.samples[i].tensor.data).collect();
        let x4 = features_to_batch(&refs)?;
        let emb = model.embed_eval(&x4)?;
        let row0 = chunk_start * chunk_size.max(1);
        out.slice_mut(ndarray::s![row0..row0 + chunk.len(), ..]).assign(&emb);
    }
    Ok(out)
}

fn bonafide_indices(set: &TrainSet) -> Vec<usize> {
    (0..set.len()).filter(|&i| set.samples[i].group == GroupLabel::Bonafide).collect()
}

/// Stack one batch, applying SpecAug per sample when enabled. Mask streams
/// derive from (seed, stage tag + epoch, dataset index), so the same sample
/// gets a fresh mask every epoch and runs are order-independent.
fn assemble_input(
    set: &TrainSet,
    idxs: &[usize],
    specaug: Option<&SpecAugParams>,
    seed: u64,
    stream_label: &str,
) -> Result<Array4<f64>> {
    match specaug {
        Some(p) if p.enabled => {
            let mut augmented = Vec::with_capacity(idxs.len());
            for &i in idxs {
                let mut r = rng::stream(seed, stream_label, i as u64);
                augmented.push(spec_augment(&set.samples[i].tensor, p, &mut r)?.data);
            }
            let refs: Vec<&Array3<f32>> = augmented.iter().collect();
            features_to_batch(&refs)
        }
        _ => {
            let refs: Vec<&Array3<f32>> =
                idxs.iter().map(|&i| &set.samples[i].tensor.data).collect();
            features_to_batch(&refs)
        }
    }
}

fn write_center_to_store(model: &mut DinModel, c: &Array1<f64>) -> Result<()> {
    let id = model.center_id()?;
    model.store.get_mut(id).assign(&c.view().into_dyn());
    Ok(())
}

fn periodic_checkpoint_path(out: &Path, epochs_done: u32) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|s| s.to_string_lossy().into_owned());
    let name = match ext {
        Some(e) => format!("{stem}.epoch{epochs_done:03}.{e}"),
        None => format!("{stem}.epoch{epochs_done:03}"),
    };
    out.with_file_name(name)
}

fn diagnostic_checkpoint_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|s| s.to_string_lossy().into_owned());
    let name = match ext {
        Some(e) => format!("{stem}.diagnostic.{e}"),
        None => format!("{stem}.diagnostic"),
    };
    out.with_file_name(name)
}

/// On a numerical failure mid-training, dump the poisoned weights for
/// inspection, then surface the original error with location context.
fn abort_non_finite(
    model: &DinModel,
    out: Option<&Path>,
    epoch: u32,
    step: u64,
    err: DinError,
) -> DinError {
    let mut msg = format!("training aborted at epoch {epoch} step {step}: {err}");
    if let Some(out) = out {
        let diag = diagnostic_checkpoint_path(out);
        match save_checkpoint(&diag, model) {
            Ok(()) => msg.push_str(&format!("; diagnostic checkpoint at {}", diag.display())),
            Err(e) => msg.push_str(&format!("; diagnostic checkpoint failed: {e}")),
        }
    }
    DinError::Numerical(msg)
}

/// Full-dataset bonafide mean in inference mode (no SpecAug, frozen BN).
/// Returns `false` (and leaves `c` alone) when there are no bonafide items.
fn global_center_refresh(
    model: &DinModel,
    set: &TrainSet,
    center: &mut CenterState,
) -> Result<bool> {
    let bona = bonafide_indices(set);
    if bona.is_empty() {
        eprintln!("warning: no bonafide samples for center refresh; keeping previous center");
        return Ok(false);
    }
    let emb = embed_samples(model, set, &bona, 256)?;
    Ok(center.set_from_mean(emb.view()))
}

/// Stage-1 training: multi-class, three losses, one Adam group.
pub fn train_stage1(
    model: &mut DinModel,
    set: &TrainSet,
    cfg: &TrainConfig,
    specaug: Option<&SpecAugParams>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.stage() != Stage::Stage1 {
        return Err(DinError::config("train_stage1 needs a model with stage-1 heads"));
    }
    set.check_against(model)?;
    let w_id = model.asoftmax_weight()?;
    let mut center = CenterState::new(model.cfg.embedding_dim, cfg.center_refresh_interval)?;
    let mut adam = AdamState::new(&model.store);
    let mut tape = GradientTape::new(&model.store);
    let mut records = Vec::new();
    let mut center_events = Vec::new();

    for epoch in 0..cfg.epochs_stage1 {
        if epoch % cfg.center_refresh_interval == 0
            && global_center_refresh(model, set, &mut center)?
        {
            write_center_to_store(model, &center.c)?;
            center_events.push(CenterEvent::GlobalRefresh { epoch });
        }

        let groups = set.groups();
        let mut batch_rng = rng::stream(cfg.seed, "batches-stage1", epoch as u64);
        let batches = balanced_batches(
            &groups,
            cfg.batch_size,
            cfg.min_bonafide_per_batch,
            &mut batch_rng,
        )?;

        for (step, idxs) in batches.iter().enumerate() {
            let step = step as u64;
            let started = Instant::now();
            let result: Result<(TrainLogRecord, bool)> = (|| {
                let input = assemble_input(
                    set,
                    idxs,
                    specaug,
                    cfg.seed,
                    &format!("specaug-stage1/{epoch}"),
                )?;
                let (x, y, z, trace) = model.forward_stage1_train(&input)?;
                let labels: Vec<usize> =
                    idxs.iter().map(|&i| set.samples[i].class_label).collect();
                let batch_groups: Vec<GroupLabel> =
                    idxs.iter().map(|&i| set.samples[i].group).collect();
                let mask: Vec<bool> =
                    batch_groups.iter().map(|g| *g == GroupLabel::Bonafide).collect();

                let w = model
                    .store
                    .get(w_id)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .map_err(|_| DinError::shape("A-Softmax weight is not rank 2"))?;
                let l1 = a_softmax_loss(y.view(), &labels, w, &cfg.angular)?;
                let l2 = contrastive_loss(z.view(), &batch_groups, &cfg.contrastive)?;
                let l3 = center_loss(x.view(), &mask, &center)?;
                let total = combined_loss(l1.loss, l2.loss, l3.loss, &cfg.weights)?;

                tape.zero();
                let gx = &l3.grad_x * cfg.weights.gamma;
                let gy = &l1.grad_y * cfg.weights.alpha;
                let gz = &l2.grad_z * cfg.weights.beta;
                model.backward_stage1(&mut tape, &trace, &gx, &gy, &gz)?;
                tape.accumulate(w_id, (&l1.grad_w * cfg.weights.alpha).into_dyn());
                let grad_norm = tape.global_norm();
                if !grad_norm.is_finite() {
                    return Err(DinError::numerical(format!(
                        "non-finite gradient norm (losses L1={} L2={} L3={})",
                        l1.loss, l2.loss, l3.loss
                    )));
                }
                adam.step(&mut model.store, &tape, &cfg.adam, |_| cfg.lr_stage1)?;
                let w_mut = model
                    .store
                    .get_mut(w_id)
                    .view_mut()
                    .into_dimensionality::<Ix2>()
                    .map_err(|_| DinError::shape("A-Softmax weight is not rank 2"))?;
                normalize_columns_2d(w_mut);

                // Per-batch center update from this batch's bonafide rows.
                let k = mask.iter().filter(|&&b| b).count();
                let mut updated = false;
                if k > 0 {
                    let mut mean = Array1::<f64>::zeros(x.ncols());
                    for (i, &is_bona) in mask.iter().enumerate() {
                        if is_bona {
                            mean += &x.row(i);
                        }
                    }
                    mean.mapv_inplace(|v| v / k as f64);
                    center.c = mean;
                    updated = true;
                }

                Ok((
                    TrainLogRecord {
                        epoch,
                        step,
                        l1: l1.loss,
                        l2: l2.loss,
                        l3: l3.loss,
                        total,
                        grad_norm,
                        seconds: started.elapsed().as_secs_f64(),
                    },
                    updated,
                ))
            })();
            match result {
                Ok((record, center_updated)) => {
                    if center_updated {
                        write_center_to_store(model, &center.c)?;
                        center_events.push(CenterEvent::BatchUpdate { epoch, step });
                    }
                    records.push(record);
                }
                Err(e) => return Err(abort_non_finite(model, out, epoch, step, e)),
            }
        }

        if let Some(out) = out {
            let done = epoch + 1;
            if done % 5 == 0 && done < cfg.epochs_stage1 {
                save_checkpoint(&periodic_checkpoint_path(out, done), model)?;
            }
        }
    }

    if let Some(out) = out {
        save_checkpoint(out, model)?;
    }
    Ok(TrainOutcome { records, center_events })
}

/// Stage-2 fine-tuning: two-class cross-entropy, split learning rates.
/// The model must already carry a fresh Entropy head (plus, normally, a
/// backbone transferred from the stage-1 checkpoint).
pub fn train_stage2(
    model: &mut DinModel,
    set: &TrainSet,
    cfg: &TrainConfig,
    specaug: Option<&SpecAugParams>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.stage() != Stage::Stage2 {
        return Err(DinError::config("train_stage2 needs a model with the entropy head"));
    }
    set.check_against(model)?;
    if model.cfg.entropy_classes != 2 {
        return Err(DinError::config(format!(
            "stage-2 training is two-class, model has {} entropy classes",
            model.cfg.entropy_classes
        )));
    }
    let mut adam = AdamState::new(&model.store);
    let mut tape = GradientTape::new(&model.store);
    let mut records = Vec::new();

    for epoch in 0..cfg.epochs_stage2 {
        let groups = set.groups();
        let mut batch_rng = rng::stream(cfg.seed, "batches-stage2", epoch as u64);
        let batches = balanced_batches(
            &groups,
            cfg.batch_size,
            cfg.min_bonafide_per_batch,
            &mut batch_rng,
        )?;

        for (step, idxs) in batches.iter().enumerate() {
            let step = step as u64;
            let started = Instant::now();
            let result: Result<TrainLogRecord> = (|| {
                let input = assemble_input(
                    set,
                    idxs,
                    specaug,
                    cfg.seed,
                    &format!("specaug-stage2/{epoch}"),
                )?;
                let (logits, trace) = model.forward_stage2_train(&input)?;
                // Binary labels: 0 bonafide, 1 fake.
                let labels: Vec<usize> = idxs
                    .iter()
                    .map(|&i| usize::from(set.samples[i].group != GroupLabel::Bonafide))
                    .collect();
                let ce = cross_entropy(logits.view(), &labels)?;
                if !ce.loss.is_finite() {
                    return Err(DinError::numerical(format!(
                        "non-finite entropy loss {}",
                        ce.loss
                    )));
                }
                tape.zero();
                model.backward_stage2(&mut tape, &trace, &ce.grad_logits)?;
                let grad_norm = tape.global_norm();
                if !grad_norm.is_finite() {
                    return Err(DinError::numerical("non-finite gradient norm in stage 2"));
                }
                adam.step(&mut model.store, &tape, &cfg.adam, |g| match g {
                    crate::nn::ParamGroup::Head => cfg.lr_stage2_head,
                    crate::nn::ParamGroup::Backbone => cfg.lr_stage2_backbone,
                })?;
                Ok(TrainLogRecord {
                    epoch,
                    step,
                    l1: 0.0,
                    l2: 0.0,
                    l3: 0.0,
                    total: ce.loss,
                    grad_norm,
                    seconds: started.elapsed().as_secs_f64(),
                })
            })();
            match result {
                Ok(record) => records.push(record),
                Err(e) => return Err(abort_non_finite(model, out, epoch, step, e)),
            }
        }

        if let Some(out) = out {
            let done = epoch + 1;
            if done % 5 == 0 && done < cfg.epochs_stage2 {
                save_checkpoint(&periodic_checkpoint_path(out, done), model)?;
            }
        }
    }

    if let Some(out) = out {
        save_checkpoint(out, model)?;
    }
    Ok(TrainOutcome { records, center_events: Vec::new() })
}

/// Stage 3: Gaussian over all bonafide segment embeddings, inference mode.
pub fn fit_bonafide_gaussian(
    model: &DinModel,
    set: &TrainSet,
    epsilon: Option<f64>,
) -> Result<BonafideGaussian> {
    let bona = bonafide_indices(set);
    if bona.is_empty() {
        return Err(DinError::data("no bonafide samples to fit the Gaussian on"));
    }
    let emb = embed_samples(model, set, &bona, 256)?;
    fit_gaussian(emb.view(), epsilon)
}
