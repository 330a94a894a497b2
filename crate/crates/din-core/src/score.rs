//! Utterance scoring: Mahalanobis distance per segment, aggregated per
//! utterance, plus the tab-separated scores file.
//!
//! Polarity is fixed as "larger distance ⇒ more fake". The utterance
//! distance is the arithmetic mean over its segments; max aggregation is
//! available behind a flag.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::dsp::{extract_features, AudioClip, FrontendConfig};
use crate::error::{DinError, Result};
use crate::gaussian::BonafideGaussian;
use crate::io::atomic_write;
use crate::model::{features_to_batch, DinModel};

/// Ground-truth key of a scored utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    Bonafide,
    Fake,
}

impl BinaryLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            BinaryLabel::Bonafide => "bonafide",
            BinaryLabel::Fake => "fake",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(BinaryLabel::Bonafide),
            "fake" => Ok(BinaryLabel::Fake),
            other => Err(DinError::data(format!("unknown label {other:?}"))),
        }
    }
}

/// How segment distances collapse into one utterance distance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

/// One scored utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub utt_id: String,
    pub distance: f64,
    pub n_segments: usize,
    pub label: Option<BinaryLabel>,
    pub generator_id: Option<String>,
}

impl ScoreRecord {
    pub fn validate(&self) -> Result<()> {
        if self.utt_id.is_empty() || self.utt_id.contains(char::is_whitespace) {
            return Err(DinError::data(format!("bad utt_id {:?}", self.utt_id)));
        }
        if !self.distance.is_finite() || self.distance < 0.0 {
            return Err(DinError::data(format!(
                "{}: distance must be finite and >= 0, got {}",
                self.utt_id, self.distance
            )));
        }
        if self.n_segments == 0 {
            return Err(DinError::data(format!("{}: n_segments must be >= 1", self.utt_id)));
        }
        Ok(())
    }
}

/// Distance for each segment tensor, in order.
pub fn segment_distances(
    segments: &[Array3<f32>],
    model: &DinModel,
    g: &BonafideGaussian,
) -> Result<Vec<f64>> {
    if segments.is_empty() {
        return Err(DinError::data("no segments to score"));
    }
    let refs: Vec<&Array3<f32>> = segments.iter().collect();
    let batch = features_to_batch(&refs)?;
    let emb = model.embed_eval(&batch)?;
    g.mahalanobis_rows(emb.view())
}

/// Collapse per-segment distances into the utterance distance.
pub fn aggregate(distances: &[f64], agg: Aggregation) -> Result<f64> {
    if distances.is_empty() {
        return Err(DinError::data("cannot aggregate zero distances"));
    }
    let d = match agg {
        Aggregation::Mean => distances.iter().sum::<f64>() / distances.len() as f64,
        Aggregation::Max => distances.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)),
    };
    if !d.is_finite() {
        return Err(DinError::numerical("non-finite utterance distance"));
    }
    Ok(d)
}

/// Score pre-extracted segments of one utterance.
pub fn score_segments(
    utt_id: &str,
    segments: &[Array3<f32>],
    model: &DinModel,
    g: &BonafideGaussian,
    agg: Aggregation,
) -> Result<ScoreRecord> {
    let per_segment = segment_distances(segments, model, g)?;
    let distance = aggregate(&per_segment, agg)?;
    let record = ScoreRecord {
        utt_id: utt_id.to_string(),
        distance,
        n_segments: segments.len(),
        label: None,
        generator_id: None,
    };
    record.validate()?;
    Ok(record)
}

/// Full path from raw audio: extract features (SpecAug off), embed each
/// segment in inference mode, aggregate.
pub fn score_utterance(
    clip: &AudioClip,
    model: &DinModel,
    g: &BonafideGaussian,
    frontend: &FrontendConfig,
    agg: Aggregation,
) -> Result<ScoreRecord> {
    let feats = extract_features(clip, frontend, false, 0)?;
    let segments: Vec<Array3<f32>> = feats.into_iter().map(|t| t.data).collect();
    score_segments(&clip.utt_id, &segments, model, g, agg)
}

/// Write the scores file: tab-separated
/// `utt_id  distance  n_segments  [label]  [generator_id]`, sorted by
/// utt_id. A record with a generator but no label gets `-` in the label
/// column so the fields stay positional.
pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut sorted: Vec<&ScoreRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    for pair in sorted.windows(2) {
        if pair[0].utt_id == pair[1].utt_id {
            return Err(DinError::data(format!("duplicate utt_id {:?}", pair[0].utt_id)));
        }
    }
    let mut out = String::new();
    for r in sorted {
        r.validate()?;
        out.push_str(&r.utt_id);
        out.push('\t');
        out.push_str(&r.distance.to_string());
        out.push('\t');
        out.push_str(&r.n_segments.to_string());
        match (&r.label, &r.generator_id) {
            (Some(l), Some(g)) => {
                out.push('\t');
                out.push_str(l.as_str());
                out.push('\t');
                out.push_str(g);
            }
            (Some(l), None) => {
                out.push('\t');
                out.push_str(l.as_str());
            }
            (None, Some(g)) => {
                out.push_str("\t-\t");
                out.push_str(g);
            }
            (None, None) => {}
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| DinError::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=5).contains(&fields.len()) {
            return Err(DinError::format(
                path,
                format!("line {lineno}: expected 3-5 tab-separated fields, got {}", fields.len()),
            ));
        }
        let distance: f64 = fields[1].parse().map_err(|_| {
            DinError::format(path, format!("line {lineno}: bad distance {:?}", fields[1]))
        })?;
        let n_segments: usize = fields[2].parse().map_err(|_| {
            DinError::format(path, format!("line {lineno}: bad n_segments {:?}", fields[2]))
        })?;
        let label = match fields.get(3) {
            None => None,
            Some(&"-") => None,
            Some(s) => Some(BinaryLabel::parse(s).map_err(|e| {
                DinError::format(path, format!("line {lineno}: {e}"))
            })?),
        };
        let generator_id = fields.get(4).map(|s| s.to_string());
        let record = ScoreRecord {
            utt_id: fields[0].to_string(),
            distance,
            n_segments,
            label,
            generator_id,
        };
        record
            .validate()
            .map_err(|e| DinError::format(path, format!("line {lineno}: {e}")))?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DinConfig;
    use ndarray::{Array1, Array2};

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

    fn unit_gaussian(d: usize) -> BonafideGaussian {
        BonafideGaussian {
            mu: Array1::zeros(d),
            sigma: Array2::eye(d),
            precision: Array2::eye(d),
            epsilon: 0.0,
            n_samples: 100,
        }
    }

    fn seg(seed: u64) -> Array3<f32> {
        let mut r = crate::rng::stream(seed, "score-seg", 0);
        Array3::from_shape_fn((3, 16, 16), |_| crate::rng::sample_standard_normal(&mut r) as f32)
    }

    #[test]
    fn single_segment_utterance_equals_segment_distance() {
        let model = DinModel::new_stage2(&tiny_cfg(), 4).unwrap();
        let g = unit_gaussian(16);
        let s = seg(1);
        let per = segment_distances(std::slice::from_ref(&s), &model, &g).unwrap();
        let rec = score_segments("u1", &[s], &model, &g, Aggregation::Mean).unwrap();
        assert_eq!(rec.distance, per[0]);
        assert_eq!(rec.n_segments, 1);
    }

    #[test]
    fn duplicated_segment_keeps_the_mean_unchanged() {
        let model = DinModel::new_stage2(&tiny_cfg(), 4).unwrap();
        let g = unit_gaussian(16);
        let s = seg(2);
        let one = score_segments("u", &[s.clone()], &model, &g, Aggregation::Mean).unwrap();
        let two =
            score_segments("u", &[s.clone(), s], &model, &g, Aggregation::Mean).unwrap();
        assert!((one.distance - two.distance).abs() < 1e-9);
        assert_eq!(two.n_segments, 2);
    }

    #[test]
    fn three_segments_match_the_per_segment_oracle() {
        let model = DinModel::new_stage2(&tiny_cfg(), 4).unwrap();
        let g = unit_gaussian(16);
        let segs = vec![seg(3), seg(4), seg(5)];
        // Oracle: each segment scored in isolation, then averaged by hand.
        let mut singles = Vec::new();
        for s in &segs {
            singles.push(
                segment_distances(std::slice::from_ref(s), &model, &g).unwrap()[0],
            );
        }
        let want = singles.iter().sum::<f64>() / 3.0;
        let rec = score_segments("u", &segs, &model, &g, Aggregation::Mean).unwrap();
        assert!((rec.distance - want).abs() < 1e-8, "{} vs {want}", rec.distance);

        let max_rec = score_segments("u", &segs, &model, &g, Aggregation::Max).unwrap();
        let want_max = singles.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        assert!((max_rec.distance - want_max).abs() < 1e-8);
        assert!(max_rec.distance >= rec.distance);
    }

    fn sample_records() -> Vec<ScoreRecord> {
        vec![
            ScoreRecord {
                utt_id: "utt_b".into(),
                distance: 1.25,
                n_segments: 2,
                label: Some(BinaryLabel::Fake),
                generator_id: Some("A03".into()),
            },
            ScoreRecord {
                utt_id: "utt_a".into(),
                distance: 0.5,
                n_segments: 1,
                label: Some(BinaryLabel::Bonafide),
                generator_id: None,
            },
            ScoreRecord {
                utt_id: "utt_c".into(),
                distance: 2.0,
                n_segments: 3,
                label: None,
                generator_id: None,
            },
            ScoreRecord {
                utt_id: "utt_d".into(),
                distance: 3.5,
                n_segments: 1,
                label: None,
                generator_id: Some("A99".into()),
            },
        ]
    }

    #[test]
    fn scores_file_round_trips_and_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.tsv");
        let records = sample_records();
        write_scores(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let ids: Vec<&str> =
            text.lines().map(|l| l.split('\t').next().unwrap()).collect();
        assert_eq!(ids, vec!["utt_a", "utt_b", "utt_c", "utt_d"]);
        assert!(text.lines().nth(3).unwrap().contains("\t-\tA99"));

        let back = read_scores(&path).unwrap();
        let mut sorted = records.clone();
        sorted.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        assert_eq!(back, sorted);

        // Byte-identical rewrite.
        let path2 = dir.path().join("scores2.tsv");
        write_scores(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn duplicate_ids_and_bad_records_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.tsv");
        let mut records = sample_records();
        records.push(records[0].clone());
        assert!(write_scores(&path, &records).unwrap_err().to_string().contains("duplicate"));

        let bad = ScoreRecord {
            utt_id: "x".into(),
            distance: -1.0,
            n_segments: 1,
            label: None,
            generator_id: None,
        };
        assert!(bad.validate().is_err());
        let bad = ScoreRecord {
            utt_id: "has space".into(),
            distance: 1.0,
            n_segments: 1,
            label: None,
            generator_id: None,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn malformed_score_lines_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.tsv");
        std::fs::write(&path, "u1\t0.5\t1\nu2\tnot_a_number\t1\n").unwrap();
        let err = read_scores(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        std::fs::write(&path, "u1\t0.5\t1\tsorta\n").unwrap();
        let err = read_scores(&path).unwrap_err();
        assert!(err.to_string().contains("unknown label"), "{err}");
    }

    #[test]
    fn distances_stay_nonnegative_under_both_aggregations() {
        assert_eq!(aggregate(&[0.0, 0.0], Aggregation::Mean).unwrap(), 0.0);
        assert_eq!(aggregate(&[1.0, 3.0], Aggregation::Mean).unwrap(), 2.0);
        assert_eq!(aggregate(&[1.0, 3.0], Aggregation::Max).unwrap(), 3.0);
        assert!(aggregate(&[], Aggregation::Mean).is_err());
        assert!(aggregate(&[f64::NAN], Aggregation::Mean).is_err());
    }
}
