//! DINC checkpoints: every model tensor plus the network geometry.
//!
//! Layout: header (magic `DINC`, format version u32, tensor count u32), then
//! per tensor: name length u16, UTF-8 name, rank u8, each dim as u32, and the
//! payload as little-endian f32 in logical index order. After the last tensor
//! a JSON-encoded [`DinConfig`] trailer runs to end of file.
//!
//! BN running statistics and the centre vector travel alongside the
//! trainable weights, so a restored model scores identically to the saved
//! one. The training stage is not stored explicitly; it is inferred from
//! which head tensors are present.

use std::collections::HashSet;
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{DinError, Result};
use crate::io::{atomic_write, Cursor, PutLe};
use crate::model::{DinConfig, DinModel, Stage};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DINC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Guard rails against corrupt headers allocating absurd buffers.
const MAX_TENSOR_NAME: usize = 1024;
const MAX_TENSOR_RANK: u8 = 8;
const MAX_TENSOR_ELEMS: u64 = 1 << 28;

/// A parsed checkpoint: tensors in file order plus the geometry trailer.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: DinConfig,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

/// Serialize the model's full parameter store. Values are rounded to f32 by
/// the format; saving a freshly loaded checkpoint reproduces the file
/// byte-for-byte.
pub fn save_checkpoint(path: &Path, model: &DinModel) -> Result<()> {
    let store = &model.store;
    let n = u32::try_from(store.len())
        .map_err(|_| DinError::data("too many tensors for checkpoint header"))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.put_u32(CHECKPOINT_VERSION);
    buf.put_u32(n);
    for (_, param) in store.iter() {
        let name = param.name.as_bytes();
        if name.len() > MAX_TENSOR_NAME {
            return Err(DinError::data(format!("tensor name too long: {:?}", param.name)));
        }
        buf.put_u16(name.len() as u16);
        buf.extend_from_slice(name);
        let shape = param.value.shape();
        if shape.len() > MAX_TENSOR_RANK as usize {
            return Err(DinError::data(format!(
                "tensor {:?} rank {} exceeds format limit",
                param.name,
                shape.len()
            )));
        }
        buf.push(shape.len() as u8);
        for &d in shape {
            let d = u32::try_from(d)
                .map_err(|_| DinError::data(format!("dimension of {:?} exceeds u32", param.name)))?;
            buf.put_u32(d);
        }
        for &v in param.value.iter() {
            buf.put_f32(v as f32);
        }
    }
    serde_json::to_writer(&mut buf, &model.cfg)
        .map_err(|e| DinError::data(format!("cannot encode config trailer: {e}")))?;
    atomic_write(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| DinError::io(path, e))?;
    let mut c = Cursor::new(&bytes, path);
    c.magic(CHECKPOINT_MAGIC, "DINC")?;
    let version = c.u32_le("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(DinError::format(
            path,
            format!("unsupported DINC version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let n_tensors = c.u32_le("tensor count")? as usize;

    let mut tensors = Vec::with_capacity(n_tensors);
    let mut seen: HashSet<String> = HashSet::new();
    for i in 0..n_tensors {
        let name_len = c.u16_le("name length")? as usize;
        if name_len == 0 || name_len > MAX_TENSOR_NAME {
            return Err(DinError::format(path, format!("tensor {i}: bad name length {name_len}")));
        }
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| DinError::format(path, format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(DinError::format(path, format!("duplicate tensor name {name:?}")));
        }
        let rank = c.u8("rank")?;
        if rank > MAX_TENSOR_RANK {
            return Err(DinError::format(path, format!("tensor {name:?}: rank {rank} too large")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut elems: u64 = 1;
        for d in 0..rank {
            let dim = c.u32_le(&format!("dim {d} of {name:?}"))? as u64;
            elems = elems.saturating_mul(dim);
            dims.push(dim as usize);
        }
        if elems > MAX_TENSOR_ELEMS {
            return Err(DinError::format(
                path,
                format!("tensor {name:?}: {elems} elements exceeds format limit"),
            ));
        }
        let vals = c.f32_vec(elems as usize, &format!("payload of {name:?}"))?;
        let value = ArrayD::from_shape_vec(dims, vals).expect("length matches dim product");
        tensors.push((name, value));
    }

    let trailer = c.rest();
    if trailer.is_empty() {
        return Err(DinError::format(path, "missing config trailer"));
    }
    let config: DinConfig = serde_json::from_slice(trailer)
        .map_err(|e| DinError::format(path, format!("bad config trailer: {e}")))?;
    config.validate()?;
    Ok(Checkpoint { config, tensors })
}

impl Checkpoint {
    /// Infer the training stage from head tensor names.
    pub fn stage(&self) -> Result<Stage> {
        let has = |prefix: &str| self.tensors.iter().any(|(n, _)| n.starts_with(prefix));
        match (has("softmax_head."), has("entropy_head.")) {
            (true, false) => Ok(Stage::Stage1),
            (false, true) => Ok(Stage::Stage2),
            (true, true) => Err(DinError::data(
                "checkpoint holds both stage-1 and stage-2 head tensors; stage is ambiguous",
            )),
            (false, false) => Err(DinError::data(
                "checkpoint holds no head tensors; cannot infer training stage",
            )),
        }
    }

    /// Rebuild a model with this checkpoint's geometry and overwrite every
    /// tensor from the file. The tensor name sets must match exactly.
    pub fn build_model(&self) -> Result<DinModel> {
        let stage = self.stage()?;
        let mut model = match stage {
            Stage::Stage1 => DinModel::new_stage1(&self.config, 0)?,
            Stage::Stage2 => DinModel::new_stage2(&self.config, 0)?,
        };
        let mut assigned: HashSet<&str> = HashSet::new();
        for (name, value) in &self.tensors {
            let id = model.store.id(name).ok_or_else(|| {
                DinError::data(format!(
                    "checkpoint tensor {name:?} does not exist in a {stage:?} model with this config"
                ))
            })?;
            let slot = model.store.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(DinError::shape(format!(
                    "checkpoint tensor {name:?} has shape {:?}, model expects {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            slot.assign(value);
            assigned.insert(name);
        }
        if assigned.len() != model.store.len() {
            let missing: Vec<&str> = model
                .store
                .iter()
                .map(|(_, p)| p.name.as_str())
                .filter(|n| !assigned.contains(n))
                .collect();
            return Err(DinError::data(format!("checkpoint is missing tensors: {missing:?}")));
        }
        model.store.check_finite()?;
        Ok(model)
    }

    /// Copy backbone tensors (`stem.*`, `block*`) into an existing model,
    /// leaving head tensors untouched. Used to seed stage 2 from a stage-1
    /// checkpoint; BN running statistics come along. Returns how many tensors
    /// were copied.
    pub fn load_backbone_into(&self, model: &mut DinModel) -> Result<usize> {
        if self.config != model.cfg {
            return Err(DinError::config(
                "checkpoint geometry differs from target model; cannot transfer backbone",
            ));
        }
        let mut copied = 0usize;
        let mut expected = 0usize;
        for (_, p) in model.store.iter() {
            if is_backbone_name(&p.name) {
                expected += 1;
            }
        }
        for (name, value) in &self.tensors {
            if !is_backbone_name(name) {
                continue;
            }
            let id = model
                .store
                .id(name)
                .ok_or_else(|| DinError::data(format!("backbone tensor {name:?} not in target model")))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(DinError::shape(format!(
                    "backbone tensor {name:?} has shape {:?}, model expects {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            slot.assign(value);
            copied += 1;
        }
        if copied != expected {
            return Err(DinError::data(format!(
                "checkpoint supplied {copied} backbone tensors, target model has {expected}"
            )));
        }
        Ok(copied)
    }
}

fn is_backbone_name(name: &str) -> bool {
    name.starts_with("stem.") || name.starts_with("block")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

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
            n_classes_stage1: 7,
            contrastive_dim: 8,
            entropy_classes: 2,
        }
    }

    fn input(n: usize, hw: usize, seed: u64) -> ndarray::Array4<f64> {
        let mut rng = crate::rng::stream(seed, "ckpt-test-input", 0);
        ndarray::Array4::from_shape_fn((n, 3, hw, hw), |_| {
            crate::rng::sample_standard_normal(&mut rng)
        })
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let d = tempfile::tempdir().unwrap();
        let p1 = d.path().join("a.dinc");
        let p2 = d.path().join("b.dinc");
        let model = DinModel::new_stage1(&tiny_cfg(), 42).unwrap();
        save_checkpoint(&p1, &model).unwrap();
        let ckpt = load_checkpoint(&p1).unwrap();
        let rebuilt = ckpt.build_model().unwrap();
        save_checkpoint(&p2, &rebuilt).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rebuilt_values_match_f32_rounded_originals() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("m.dinc");
        let model = DinModel::new_stage2(&tiny_cfg(), 7).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let rebuilt = load_checkpoint(&path).unwrap().build_model().unwrap();
        assert_eq!(rebuilt.store.len(), model.store.len());
        for (id, p) in model.store.iter() {
            let r = rebuilt.store.param(id);
            assert_eq!(r.name, p.name);
            assert_eq!(r.group, p.group, "{}", p.name);
            assert_eq!(r.trainable, p.trainable, "{}", p.name);
            for (a, b) in p.value.iter().zip(r.value.iter()) {
                assert_eq!(*a as f32, *b as f32, "{}", p.name);
                assert_eq!(*b, (*a as f32) as f64, "{}", p.name);
            }
        }
    }

    #[test]
    fn rebuilt_model_scores_like_the_original_to_f32_precision() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("m.dinc");
        let model = DinModel::new_stage2(&tiny_cfg(), 3).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let rebuilt = load_checkpoint(&path).unwrap().build_model().unwrap();
        let x = input(2, 16, 5);
        let a = model.embed_eval(&x).unwrap();
        let b = rebuilt.embed_eval(&x).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-4, "{u} vs {v}");
        }
    }

    #[test]
    fn stage_is_inferred_from_head_tensors() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("m.dinc");
        let cfg = tiny_cfg();

        let s1 = DinModel::new_stage1(&cfg, 1).unwrap();
        save_checkpoint(&path, &s1).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.stage().unwrap(), Stage::Stage1);
        assert_eq!(ckpt.build_model().unwrap().stage(), Stage::Stage1);

        let s2 = DinModel::new_stage2(&cfg, 1).unwrap();
        save_checkpoint(&path, &s2).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.stage().unwrap(), Stage::Stage2);

        let headless = Checkpoint {
            config: cfg,
            tensors: vec![("stem.conv.weight".into(), ArrayD::zeros(vec![1]))],
        };
        assert!(headless.stage().unwrap_err().to_string().contains("no head tensors"));
    }

    #[test]
    fn backbone_transfer_copies_stem_blocks_and_running_stats_only() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("s1.dinc");
        let cfg = tiny_cfg();
        let mut s1 = DinModel::new_stage1(&cfg, 11).unwrap();
        // Make running stats distinctive so the transfer is observable.
        let rm_id = s1.store.id("stem.bn.running_mean").expect("stem BN running mean");
        s1.store.get_mut(rm_id).fill(0.25);
        save_checkpoint(&path, &s1).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();

        let mut s2 = DinModel::new_stage2(&cfg, 99).unwrap();
        let entropy_before = s2.store.get(s2.store.id("entropy_head.fc.weight").unwrap()).clone();
        let copied = ckpt.load_backbone_into(&mut s2).unwrap();
        assert!(copied > 0);

        let n_backbone =
            s2.store.iter().filter(|(_, p)| super::is_backbone_name(&p.name)).count();
        assert_eq!(copied, n_backbone);
        let rm = s2.store.get(s2.store.id("stem.bn.running_mean").unwrap());
        assert!(rm.iter().all(|&v| v == 0.25));
        for (a, b) in s1.store.get(s1.store.id("stem.conv.weight").unwrap()).iter().zip(
            s2.store.get(s2.store.id("stem.conv.weight").unwrap()).iter(),
        ) {
            assert_eq!((*a as f32) as f64, *b);
        }
        let entropy_after = s2.store.get(s2.store.id("entropy_head.fc.weight").unwrap());
        assert_eq!(&entropy_before, entropy_after, "head must stay untouched");
    }

    #[test]
    fn backbone_transfer_rejects_geometry_mismatch() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("s1.dinc");
        let s1 = DinModel::new_stage1(&tiny_cfg(), 1).unwrap();
        save_checkpoint(&path, &s1).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        let mut other = DinModel::new_stage2(
            &DinConfig {
                block_channels: [8, 8, 8, 8],
                embedding_dim: 8,
                ..tiny_cfg()
            },
            1,
        )
        .unwrap();
        assert!(ckpt.load_backbone_into(&mut other).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected_with_reasons() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("m.dinc");
        let model = DinModel::new_stage1(&tiny_cfg(), 2).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'Z';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("bad magic"));

        let mut bad = good.clone();
        bad[4] = 77;
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("version"));

        let mut bad = good.clone();
        bad.truncate(40);
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("truncated"));

        // Chop the trailer off: JSON parse must fail loudly.
        let trailer_start = good.iter().rposition(|&b| b == b'{').unwrap();
        let mut bad = good.clone();
        bad.truncate(trailer_start);
        std::fs::write(&path, &bad).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("trailer"), "{err}");
    }

    #[test]
    fn unknown_and_missing_tensors_fail_model_build() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("m.dinc");
        let model = DinModel::new_stage1(&tiny_cfg(), 2).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let mut ckpt = load_checkpoint(&path).unwrap();

        let stolen = ckpt.tensors.pop().unwrap();
        let err = ckpt.build_model().unwrap_err();
        assert!(err.to_string().contains("missing tensors"), "{err}");

        ckpt.tensors.push(stolen);
        ckpt.tensors.push(("rogue.weight".into(), ArrayD::zeros(vec![2, 2])));
        let err = ckpt.build_model().unwrap_err();
        assert!(err.to_string().contains("rogue.weight"), "{err}");
    }

    #[test]
    fn shape_mismatch_fails_model_build() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("m.dinc");
        let model = DinModel::new_stage1(&tiny_cfg(), 2).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let mut ckpt = load_checkpoint(&path).unwrap();
        ckpt.tensors[0].1 = ArrayD::zeros(vec![1, 2, 3]);
        let err = ckpt.build_model().unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn header_counts_tensors() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("m.dinc");
        let model = DinModel::new_stage1(&tiny_cfg(), 2).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"DINC");
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(count, model.store.len());
    }
}
