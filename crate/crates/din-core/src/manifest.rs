//! Dataset manifests: countermeasure (CM) protocol parsing and the
//! generator-to-group mapping.
//!
//! A protocol file has one utterance per line, five whitespace-separated
//! fields: `speaker utt_id unused system_id key`. Bonafide lines carry
//! `-` as the system id; spoof lines name the generator (e.g. `A05`).
//! Audio for `utt_id` is expected at `<wav_dir>/<utt_id>.wav`.

use std::collections::BTreeMap;
use std::collections::btree_map::Entry;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DinError, Result};
use crate::model::GroupLabel;

/// Ground-truth key of one utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Key {
    Bonafide,
    Spoof,
}

impl Key {
    pub fn as_str(&self) -> &'static str {
        match self {
            Key::Bonafide => "bonafide",
            Key::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How to treat spoof lines whose system id has no group mapping.
///
/// Training needs every generator mapped to TTS or VC (the contrastive
/// loss is group-driven), so training paths parse with [`GroupPolicy::Strict`].
/// Scoring and embedding export never consult groups, and evaluation
/// protocols routinely contain generators outside the training map
/// (A07-A19), so those paths parse with [`GroupPolicy::Lenient`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupPolicy {
    /// Unmapped system ids fail the parse, listing every offender.
    Strict,
    /// Unmapped system ids yield entries with `group: None`.
    Lenient,
}

/// One utterance of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub wav_path: PathBuf,
    pub utt_id: String,
    pub key: Key,
    /// `None` for bonafide (protocol `-`), the system id for spoof.
    pub generator_id: Option<String>,
    /// Bonafide for bonafide keys; TTS or VC for mapped spoof keys;
    /// `None` only for spoof generators outside the map (lenient parse).
    pub group: Option<GroupLabel>,
}

impl ManifestEntry {
    pub fn validate(&self) -> Result<()> {
        if self.utt_id.is_empty() || self.utt_id.chars().any(char::is_whitespace) {
            return Err(DinError::data(format!(
                "utt_id {:?} must be non-empty and free of whitespace",
                self.utt_id
            )));
        }
        match self.key {
            Key::Bonafide => {
                if self.generator_id.is_some() {
                    return Err(DinError::data(format!(
                        "{}: bonafide entries must not carry a generator id",
                        self.utt_id
                    )));
                }
                if self.group != Some(GroupLabel::Bonafide) {
                    return Err(DinError::data(format!(
                        "{}: bonafide entries must have group bonafide",
                        self.utt_id
                    )));
                }
            }
            Key::Spoof => {
                if self.generator_id.is_none() {
                    return Err(DinError::data(format!(
                        "{}: spoof entries must carry a generator id",
                        self.utt_id
                    )));
                }
                if self.group == Some(GroupLabel::Bonafide) {
                    return Err(DinError::data(format!(
                        "{}: spoof entries cannot have group bonafide",
                        self.utt_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parse a CM protocol file into manifest entries, order-preserving.
///
/// `group_map` assigns spoof system ids to TTS/VC. With
/// [`GroupPolicy::Strict`], any system id absent from the map fails the
/// parse with an error listing all offenders; with
/// [`GroupPolicy::Lenient`] such entries get `group: None`.
pub fn parse_cm_protocol(
    path: &Path,
    wav_dir: &Path,
    group_map: &BTreeMap<String, GroupLabel>,
    policy: GroupPolicy,
) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| DinError::io(path, e))?;
    parse_cm_protocol_str(&text, path, wav_dir, group_map, policy)
}

fn parse_cm_protocol_str(
    text: &str,
    path: &Path,
    wav_dir: &Path,
    group_map: &BTreeMap<String, GroupLabel>,
    policy: GroupPolicy,
) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut unmapped: BTreeMap<String, usize> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(DinError::format(
                path,
                format!(
                    "line {lineno}: expected 5 whitespace-separated fields \
                     (speaker utt_id unused system_id key), got {}",
                    fields.len()
                ),
            ));
        }
        let (utt_id, system_id, key_str) = (fields[1], fields[3], fields[4]);
        if let Some(first) = seen.insert(utt_id, lineno) {
            return Err(DinError::format(
                path,
                format!("line {lineno}: duplicate utt_id {utt_id} (first on line {first})"),
            ));
        }
        let key = match key_str {
            "bonafide" => Key::Bonafide,
            "spoof" => Key::Spoof,
            other => {
                return Err(DinError::format(
                    path,
                    format!("line {lineno}: key must be bonafide or spoof, got {other:?}"),
                ));
            }
        };
        let (generator_id, group) = match key {
            Key::Bonafide => {
                if system_id != "-" {
                    return Err(DinError::format(
                        path,
                        format!(
                            "line {lineno}: bonafide line carries system id {system_id:?} \
                             (must be \"-\")"
                        ),
                    ));
                }
                (None, Some(GroupLabel::Bonafide))
            }
            Key::Spoof => {
                if system_id == "-" {
                    return Err(DinError::format(
                        path,
                        format!("line {lineno}: spoof line must carry a system id"),
                    ));
                }
                let group = group_map.get(system_id).copied();
                if group.is_none() {
                    if let Entry::Vacant(v) = unmapped.entry(system_id.to_string()) {
                        v.insert(lineno);
                    }
                }
                (Some(system_id.to_string()), group)
            }
        };
        entries.push(ManifestEntry {
            wav_path: wav_dir.join(format!("{utt_id}.wav")),
            utt_id: utt_id.to_string(),
            key,
            generator_id,
            group,
        });
    }
    if policy == GroupPolicy::Strict && !unmapped.is_empty() {
        let mut offenders: Vec<String> = unmapped
            .iter()
            .map(|(id, line)| format!("{id} (first on line {line})"))
            .collect();
        offenders.sort();
        return Err(DinError::format(
            path,
            format!(
                "system ids without a group mapping: {}; add them to the \
                 generator group map or parse leniently",
                offenders.join(", ")
            ),
        ));
    }
    Ok(entries)
}

/// Stage-1 class labels induced by a group map: bonafide is class 0 and
/// each generator id gets one class, in sorted id order. The resulting
/// label space has `1 + map.len()` classes.
pub fn class_label_map(group_map: &BTreeMap<String, GroupLabel>) -> BTreeMap<String, usize> {
    group_map.keys().enumerate().map(|(i, id)| (id.clone(), i + 1)).collect()
}

/// The shipped default generator grouping: four TTS systems (A01-A04)
/// and two VC systems (A05-A06). This is configuration data, not a
/// property of the code; evaluation-only generators need no entry.
pub fn default_group_map() -> BTreeMap<String, GroupLabel> {
    let mut map = BTreeMap::new();
    for id in ["A01", "A02", "A03", "A04"] {
        map.insert(id.to_string(), GroupLabel::Tts);
    }
    for id in ["A05", "A06"] {
        map.insert(id.to_string(), GroupLabel::Vc);
    }
    map
}
