//! The run configuration: one versioned, human-editable TOML document
//! covering the frontend, the network, training, the generator group
//! map, and the file layout of a run.
//!
//! Unknown keys anywhere in the document are errors, so a typo can
//! never silently fall back to a default. Relative entries under
//! `[paths]` are resolved against the directory containing the config
//! file, which makes a run directory self-contained and relocatable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::FrontendConfig;
use crate::error::{DinError, Result};
use crate::io::atomic_write;
use crate::manifest;
use crate::model::{DinConfig, GroupLabel};
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

/// File layout of a run. All fields have defaults; relative paths are
/// rebased onto the config file's directory at load time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunPaths {
    /// Directory holding `<utt_id>.wav` for every manifest entry.
    pub wav_dir: PathBuf,
    /// Directory of extracted feature caches (`<utt_id>.dinf`).
    pub features_dir: PathBuf,
    /// Directory receiving checkpoints (`stage1.dinc`, `stage2.dinc`).
    pub checkpoint_dir: PathBuf,
    /// Directory receiving training logs (`stage1.tsv`, `stage2.tsv`).
    pub log_dir: PathBuf,
    pub train_manifest: PathBuf,
    pub dev_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    /// Gaussian statistics file written by `fit-gaussian`.
    pub stats_path: PathBuf,
    /// Default scores file for `score` when `--out` is not given.
    pub scores_path: PathBuf,
}

impl Default for RunPaths {
    fn default() -> Self {
        RunPaths {
            wav_dir: "wav".into(),
            features_dir: "features".into(),
            checkpoint_dir: "checkpoints".into(),
            log_dir: "logs".into(),
            train_manifest: "protocol_train.txt".into(),
            dev_manifest: "protocol_dev.txt".into(),
            eval_manifest: "protocol_eval.txt".into(),
            stats_path: "bonafide_gaussian.ding".into(),
            scores_path: "scores.tsv".into(),
        }
    }
}

impl RunPaths {
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.wav_dir,
            &mut self.features_dir,
            &mut self.checkpoint_dir,
            &mut self.log_dir,
            &mut self.train_manifest,
            &mut self.dev_manifest,
            &mut self.eval_manifest,
            &mut self.stats_path,
            &mut self.scores_path,
        ] {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
    }
}

/// Everything a run needs, as one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Must be [`CONFIG_VERSION`]; declared explicitly in every file.
    pub version: u32,
    #[serde(default)]
    pub frontend: FrontendConfig,
    #[serde(default)]
    pub model: DinConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Spoof generator id -> TTS/VC group. Defaults to A01-A04 TTS,
    /// A05-A06 VC.
    #[serde(default = "manifest::default_group_map")]
    pub groups: BTreeMap<String, GroupLabel>,
    #[serde(default)]
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            frontend: FrontendConfig::default(),
            model: DinConfig::default(),
            train: TrainConfig::default(),
            groups: manifest::default_group_map(),
            paths: RunPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(DinError::config(format!(
                "config version {} not supported (this build reads version {})",
                self.version, CONFIG_VERSION
            )));
        }
        self.frontend.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        for (id, group) in &self.groups {
            if id.is_empty() || id.chars().any(char::is_whitespace) || id == "-" {
                return Err(DinError::config(format!(
                    "generator id {id:?} in [groups] must be non-empty, free of \
                     whitespace, and not \"-\""
                )));
            }
            if *group == GroupLabel::Bonafide {
                return Err(DinError::config(format!(
                    "generator {id} mapped to bonafide; generators are TTS or VC"
                )));
            }
        }
        Ok(())
    }

    /// Check that the stage-1 label space matches the group map: class 0
    /// is bonafide and each mapped generator takes one class. Called by
    /// training paths, not scoring (which never uses class labels).
    pub fn validate_label_space(&self) -> Result<()> {
        let want = 1 + self.groups.len();
        if self.model.n_classes_stage1 != want {
            return Err(DinError::config(format!(
                "model.n_classes_stage1 is {} but [groups] maps {} generators \
                 (need 1 bonafide class + one per generator = {want})",
                self.model.n_classes_stage1,
                self.groups.len()
            )));
        }
        Ok(())
    }

    /// Parse, validate, and rebase relative paths onto the directory of
    /// `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DinError::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| DinError::format(path, format!("not a valid run config: {e}")))?;
        cfg.validate()?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        if !base.as_os_str().is_empty() {
            cfg.paths.rebase(base);
        }
        Ok(cfg)
    }

    /// Serialize to TOML (paths as currently held, no un-rebasing).
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| DinError::data(format!("cannot serialize run config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        atomic_write(path, self.to_toml_string()?.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.validate_label_space().unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn load_rebases_relative_paths_onto_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        RunConfig::default().save(&path).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.wav_dir, dir.path().join("wav"));
        assert_eq!(cfg.paths.train_manifest, dir.path().join("protocol_train.txt"));
        // absolute paths are left alone
        let mut custom = RunConfig::default();
        custom.paths.stats_path = PathBuf::from("/abs/stats.ding");
        custom.save(&path).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.stats_path, PathBuf::from("/abs/stats.ding"));
    }

    #[test]
    fn minimal_document_gets_defaults() {
        let cfg: RunConfig = toml::from_str("version = 1\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn version_is_mandatory_and_checked() {
        let err = toml::from_str::<RunConfig>("").unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        let cfg: RunConfig = toml::from_str("version = 2\n").unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }

    #[test]
    fn unknown_keys_are_errors_at_every_level() {
        for doc in [
            "version = 1\nbatch = 3\n",
            "version = 1\n[frontend]\nwindow = 512\n",
            "version = 1\n[model]\nstem_chans = 8\n",
            "version = 1\n[train]\nlearning_rate = 0.1\n",
            "version = 1\n[paths]\nwavs = \"x\"\n",
        ] {
            assert!(toml::from_str::<RunConfig>(doc).is_err(), "accepted: {doc}");
        }
    }

    #[test]
    fn bad_group_values_are_rejected() {
        let cfg: RunConfig =
            toml::from_str("version = 1\n[groups]\nA01 = \"bonafide\"\n").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("A01"));
        let cfg: RunConfig =
            toml::from_str("version = 1\n[groups]\n\"-\" = \"tts\"\n").unwrap();
        assert!(cfg.validate().is_err());
        // arbitrary ids with valid groups are fine (eval maps, custom corpora)
        let cfg: RunConfig =
            toml::from_str("version = 1\n[groups]\nX90 = \"vc\"\n").unwrap();
        cfg.validate().unwrap();
        assert!(cfg.validate_label_space().is_err(), "1 generator needs 2 classes");
    }

    #[test]
    fn label_space_check_follows_group_count() {
        let mut cfg = RunConfig::default();
        cfg.groups.insert("A07".into(), GroupLabel::Tts);
        assert!(cfg.validate_label_space().is_err());
        cfg.model.n_classes_stage1 = 8;
        cfg.validate_label_space().unwrap();
    }
}
