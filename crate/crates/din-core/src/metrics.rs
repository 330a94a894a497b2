//! Detection metrics over labeled score records: EER, AUC, accuracy, F1,
//! threshold calibration, and the evaluation report.
//!
//! Conventions, fixed project-wide:
//! - larger distance ⇒ predicted fake; an utterance is predicted fake iff
//!   its distance exceeds the threshold (strictly),
//! - FAR(t) = fraction of fake utterances with distance <= t (accepted as
//!   bonafide), FRR(t) = fraction of bonafide utterances with distance > t,
//! - F1 is reported for the fake class unless the caller picks otherwise.
//!
//! The metric functions only require finite scores (not non-negative ones)
//! so that rank symmetries such as label-swap-plus-negation hold exactly;
//! non-negativity is a property of Mahalanobis scores, enforced where
//! records are produced and serialized.

use serde::Serialize;

use crate::error::{DinError, Result};
use crate::score::{BinaryLabel, ScoreRecord};

/// (distance, is_fake) pairs for every labeled record; errors if any record
/// is unlabeled or either class is missing.
fn labeled_scores(records: &[ScoreRecord]) -> Result<Vec<(f64, bool)>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let label = r.label.ok_or_else(|| {
            DinError::data(format!("record {:?} has no label; metrics need ground truth", r.utt_id))
        })?;
        if !r.distance.is_finite() {
            return Err(DinError::data(format!("record {:?} has non-finite distance", r.utt_id)));
        }
        out.push((r.distance, label == BinaryLabel::Fake));
    }
    let n_fake = out.iter().filter(|(_, f)| *f).count();
    if n_fake == 0 || n_fake == out.len() {
        return Err(DinError::data(
            "metrics need at least one bonafide and one fake record",
        ));
    }
    Ok(out)
}

/// Thresholds swept by the EER search: one sentinel below every score, the
/// midpoint of every adjacent pair of distinct scores, one sentinel above.
/// Each candidate comes with its (FAR, FRR).
fn far_frr_curve(scores: &mut Vec<(f64, bool)>) -> Vec<(f64, f64, f64)> {
    scores.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let n_fake = scores.iter().filter(|(_, f)| *f).count();
    let n_bona = scores.len() - n_fake;
    let (nf, nb) = (n_fake as f64, n_bona as f64);

    let mut curve = Vec::with_capacity(scores.len() + 1);
    // Below the minimum: nothing is accepted, every bonafide is rejected.
    curve.push((scores[0].0 - 1.0, 0.0, 1.0));
    let mut fake_le = 0usize; // fakes with distance <= candidate
    let mut bona_le = 0usize;
    for i in 0..scores.len() {
        if scores[i].1 {
            fake_le += 1;
        } else {
            bona_le += 1;
        }
        let t = if i + 1 < scores.len() {
            if scores[i + 1].0 == scores[i].0 {
                continue; // tied scores share one candidate
            }
            0.5 * (scores[i].0 + scores[i + 1].0)
        } else {
            scores[i].0 + 1.0
        };
        curve.push((t, fake_le as f64 / nf, (nb - bona_le as f64) / nb));
    }
    curve
}

/// Equal error rate and its threshold.
///
/// FAR − FRR is nondecreasing in the threshold, from −1 below all scores to
/// +1 above them. The sweep finds the adjacent candidate pair straddling the
/// sign change and interpolates FAR and FRR linearly between them; at the
/// interpolated crossing the two rates agree and that common value is the
/// EER.
pub fn compute_eer(records: &[ScoreRecord]) -> Result<(f64, f64)> {
    let mut scores = labeled_scores(records)?;
    let curve = far_frr_curve(&mut scores);
    for pair in curve.windows(2) {
        let (t0, far0, frr0) = pair[0];
        let (t1, far1, frr1) = pair[1];
        let d0 = far0 - frr0;
        let d1 = far1 - frr1;
        if d0 < 0.0 && d1 >= 0.0 {
            let lambda = if d1 == d0 { 0.0 } else { -d0 / (d1 - d0) };
            let eer = far0 + lambda * (far1 - far0);
            let threshold = t0 + lambda * (t1 - t0);
            return Ok((eer, threshold));
        }
    }
    // Unreachable: the sentinels guarantee d goes from -1 to +1.
    Err(DinError::numerical("EER sweep found no FAR/FRR crossing"))
}

/// Threshold at the dev-set EER crossing. With a separable gap between the
/// classes this is the midpoint of the gap.
pub fn calibrate_threshold(records: &[ScoreRecord]) -> Result<f64> {
    compute_eer(records).map(|(_, t)| t)
}

/// Area under the ROC curve via the rank-sum (Mann-Whitney) formulation:
/// the probability that a random bonafide scores below a random fake, ties
/// counted half. Equals the trapezoidal area under the ROC curve.
pub fn compute_auc(records: &[ScoreRecord]) -> Result<f64> {
    let mut scores = labeled_scores(records)?;
    scores.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let n_fake = scores.iter().filter(|(_, f)| *f).count();
    let n_bona = scores.len() - n_fake;

    // Average rank over each tie group; ranks are 1-based.
    let mut bona_rank_sum = 0.0;
    let mut i = 0;
    while i < scores.len() {
        let mut j = i;
        while j < scores.len() && scores[j].0 == scores[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
        for k in i..j {
            if !scores[k].1 {
                bona_rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let nb = n_bona as f64;
    let pairs = nb * n_fake as f64;
    // Pairs (bonafide, fake) where the fake scored lower, ties half. Both
    // counts are exact in f64 (integers and halves), so subtracting before
    // the one division reproduces direct pair counting bit for bit.
    let u_fake_below = bona_rank_sum - nb * (nb + 1.0) / 2.0;
    Ok((pairs - u_fake_below) / pairs)
}

/// Accuracy and F1 at a fixed threshold. Predicted fake iff distance >
/// threshold; `positive` selects the class F1 is computed for.
pub fn accuracy_f1(
    records: &[ScoreRecord],
    threshold: f64,
    positive: BinaryLabel,
) -> Result<(f64, f64)> {
    if !threshold.is_finite() {
        return Err(DinError::config("threshold must be finite"));
    }
    let scores = labeled_scores(records)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut correct = 0usize;
    for (d, is_fake) in &scores {
        let predicted_fake = *d > threshold;
        if predicted_fake == *is_fake {
            correct += 1;
        }
        let actual_pos = (positive == BinaryLabel::Fake) == *is_fake;
        let predicted_pos = (positive == BinaryLabel::Fake) == predicted_fake;
        match (predicted_pos, actual_pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let accuracy = correct as f64 / scores.len() as f64;
    let denom = 2 * tp + fp + fn_;
    let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    Ok((accuracy, f1))
}

/// Everything `evaluate` reports about one labeled score set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub auc: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub threshold_used: f64,
    pub n_bonafide: usize,
    pub n_fake: usize,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        format!(
            "records         {} bonafide, {} fake\n\
             eer             {:.4} ({:.2}%)\n\
             eer_threshold   {:.6}\n\
             auc             {:.6}\n\
             threshold_used  {:.6}\n\
             accuracy        {:.4}\n\
             f1_fake         {:.4}\n",
            self.n_bonafide,
            self.n_fake,
            self.eer,
            self.eer * 100.0,
            self.eer_threshold,
            self.auc,
            self.threshold_used,
            self.accuracy,
            self.f1,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| DinError::data(format!("cannot serialize report: {e}")))
    }
}

/// Compute the full report. With `threshold` None the set is
/// self-calibrated: accuracy and F1 are taken at the set's own EER
/// threshold.
pub fn evaluate(records: &[ScoreRecord], threshold: Option<f64>) -> Result<EvalReport> {
    let (eer, eer_threshold) = compute_eer(records)?;
    let auc = compute_auc(records)?;
    let threshold_used = threshold.unwrap_or(eer_threshold);
    let (accuracy, f1) = accuracy_f1(records, threshold_used, BinaryLabel::Fake)?;
    let n_fake = records
        .iter()
        .filter(|r| r.label == Some(BinaryLabel::Fake))
        .count();
    Ok(EvalReport {
        eer,
        eer_threshold,
        auc,
        accuracy,
        f1,
        threshold_used,
        n_bonafide: records.len() - n_fake,
        n_fake,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rec(utt_id: &str, distance: f64, label: BinaryLabel) -> ScoreRecord {
        ScoreRecord {
            utt_id: utt_id.to_string(),
            distance,
            n_segments: 1,
            label: Some(label),
            generator_id: None,
        }
    }

    fn records(bona: &[f64], fake: &[f64]) -> Vec<ScoreRecord> {
        let mut out = Vec::new();
        for (i, &d) in bona.iter().enumerate() {
            out.push(rec(&format!("b{i:04}"), d, BinaryLabel::Bonafide));
        }
        for (i, &d) in fake.iter().enumerate() {
            out.push(rec(&format!("f{i:04}"), d, BinaryLabel::Fake));
        }
        out
    }

    #[test]
    fn separable_sets_get_eer_zero_and_gap_midpoint_threshold() {
        let r = records(&[0.1, 0.2], &[0.8, 0.9]);
        let (eer, t) = compute_eer(&r).unwrap();
        assert_eq!(eer, 0.0);
        assert!((t - 0.5).abs() < 1e-12, "threshold {t}");
        assert_eq!(compute_auc(&r).unwrap(), 1.0);
        assert_eq!(calibrate_threshold(&r).unwrap(), t);
    }

    #[test]
    fn inverted_sets_get_eer_one_and_auc_zero() {
        let r = records(&[0.8, 0.9], &[0.1, 0.2]);
        let (eer, _) = compute_eer(&r).unwrap();
        assert_eq!(eer, 1.0);
        assert_eq!(compute_auc(&r).unwrap(), 0.0);
    }

    #[test]
    fn identical_scores_are_chance_level() {
        let r = records(&[0.5, 0.5, 0.5], &[0.5, 0.5]);
        let (eer, _) = compute_eer(&r).unwrap();
        assert!((eer - 0.5).abs() < 1e-12, "eer {eer}");
        assert!((compute_auc(&r).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eer_matches_a_brute_force_grid_oracle() {
        // Independent oracle: 200k-point grid, first sign change of
        // FAR - FRR, linear interpolation between the bracketing grid
        // points. Frozen as the reference for the analytic sweep.
        fn grid_eer(r: &[ScoreRecord]) -> f64 {
            let bona: Vec<f64> = r
                .iter()
                .filter(|x| x.label == Some(BinaryLabel::Bonafide))
                .map(|x| x.distance)
                .collect();
            let fake: Vec<f64> = r
                .iter()
                .filter(|x| x.label == Some(BinaryLabel::Fake))
                .map(|x| x.distance)
                .collect();
            let lo = r.iter().map(|x| x.distance).fold(f64::INFINITY, f64::min) - 0.1;
            let hi = r.iter().map(|x| x.distance).fold(f64::NEG_INFINITY, f64::max) + 0.1;
            let n = 200_000;
            let rates = |t: f64| {
                let far = fake.iter().filter(|&&d| d <= t).count() as f64 / fake.len() as f64;
                let frr = bona.iter().filter(|&&d| d > t).count() as f64 / bona.len() as f64;
                (far, frr)
            };
            let mut prev_t = lo;
            let (mut pf, mut pr) = rates(lo);
            for i in 1..=n {
                let t = lo + (hi - lo) * i as f64 / n as f64;
                let (far, frr) = rates(t);
                if pf - pr < 0.0 && far - frr >= 0.0 {
                    let d0 = pf - pr;
                    let d1 = far - frr;
                    let lambda = if d1 == d0 { 0.0 } else { -d0 / (d1 - d0) };
                    let _ = prev_t;
                    return pf + lambda * (far - pf);
                }
                prev_t = t;
                pf = far;
                pr = frr;
            }
            unreachable!("no crossing")
        }

        for seed in 0..5u64 {
            let mut r1 = rng::stream(seed, "eer-oracle", 0);
            let bona: Vec<f64> =
                (0..60).map(|_| r1.random::<f64>() * 2.0).collect();
            let fake: Vec<f64> =
                (0..80).map(|_| 0.8 + r1.random::<f64>() * 2.0).collect();
            let r = records(&bona, &fake);
            let (eer, t) = compute_eer(&r).unwrap();
            let oracle = grid_eer(&r);
            assert!(
                (eer - oracle).abs() < 1e-3,
                "seed {seed}: eer {eer} vs oracle {oracle}"
            );
            // At the returned threshold FAR and FRR straddle the EER by
            // less than one sample's step.
            let (far, frr) = {
                let far =
                    fake.iter().filter(|&&d| d <= t).count() as f64 / fake.len() as f64;
                let frr =
                    bona.iter().filter(|&&d| d > t).count() as f64 / bona.len() as f64;
                (far, frr)
            };
            assert!((far - frr).abs() <= 1.0 / 60.0 + 1e-12, "far {far} frr {frr}");
        }
    }

    #[test]
    fn auc_matches_exhaustive_pair_counting_exactly() {
        for seed in 0..5u64 {
            let mut r1 = rng::stream(seed, "auc-oracle", 0);
            // Quantized scores force plenty of ties.
            let bona: Vec<f64> =
                (0..70).map(|_| (r1.random::<f64>() * 20.0).round() / 10.0).collect();
            let fake: Vec<f64> = (0..90)
                .map(|_| ((0.5 + r1.random::<f64>() * 2.0) * 10.0).round() / 10.0)
                .collect();
            let r = records(&bona, &fake);
            let auc = compute_auc(&r).unwrap();
            // Oracle: count all bonafide/fake pairs directly.
            let mut wins = 0.0;
            for &b in &bona {
                for &f in &fake {
                    if b < f {
                        wins += 1.0;
                    } else if b == f {
                        wins += 0.5;
                    }
                }
            }
            let oracle = wins / (bona.len() as f64 * fake.len() as f64);
            assert_eq!(auc, oracle, "seed {seed}");
        }
    }

    #[test]
    fn eer_and_auc_are_invariant_under_monotone_transforms() {
        let mut r1 = rng::stream(11, "monotone", 0);
        let bona: Vec<f64> = (0..40).map(|_| r1.random::<f64>() * 3.0).collect();
        let fake: Vec<f64> = (0..50).map(|_| 0.5 + r1.random::<f64>() * 3.0).collect();
        let base = records(&bona, &fake);
        let (eer0, _) = compute_eer(&base).unwrap();
        let auc0 = compute_auc(&base).unwrap();

        let transforms: [&dyn Fn(f64) -> f64; 3] =
            [&|d| d * d + d, &|d| d.exp(), &|d| 2.0 * d + 7.0];
        for (k, tf) in transforms.iter().enumerate() {
            let mapped: Vec<ScoreRecord> = base
                .iter()
                .map(|r| ScoreRecord { distance: tf(r.distance), ..r.clone() })
                .collect();
            let (eer, _) = compute_eer(&mapped).unwrap();
            let auc = compute_auc(&mapped).unwrap();
            assert!((eer - eer0).abs() < 1e-12, "transform {k}: {eer} vs {eer0}");
            assert!((auc - auc0).abs() < 1e-12, "transform {k}: {auc} vs {auc0}");
        }
    }

    #[test]
    fn label_swap_with_negated_scores_preserves_eer_and_auc() {
        let mut r1 = rng::stream(17, "swap", 0);
        let bona: Vec<f64> = (0..35).map(|_| r1.random::<f64>() * 2.0).collect();
        let fake: Vec<f64> = (0..45).map(|_| 0.6 + r1.random::<f64>() * 2.0).collect();
        let base = records(&bona, &fake);
        let swapped: Vec<ScoreRecord> = base
            .iter()
            .map(|r| ScoreRecord {
                distance: -r.distance,
                label: Some(match r.label.unwrap() {
                    BinaryLabel::Bonafide => BinaryLabel::Fake,
                    BinaryLabel::Fake => BinaryLabel::Bonafide,
                }),
                ..r.clone()
            })
            .collect();
        let (eer0, _) = compute_eer(&base).unwrap();
        let (eer1, _) = compute_eer(&swapped).unwrap();
        assert!((eer0 - eer1).abs() < 1e-12, "{eer0} vs {eer1}");
        let auc0 = compute_auc(&base).unwrap();
        let auc1 = compute_auc(&swapped).unwrap();
        assert!((auc0 - auc1).abs() < 1e-12, "{auc0} vs {auc1}");
    }

    #[test]
    fn accuracy_and_f1_match_hand_counted_confusions() {
        // Perfect split.
        let r = records(&[0.1, 0.2], &[0.8, 0.9]);
        let (acc, f1) = accuracy_f1(&r, 0.5, BinaryLabel::Fake).unwrap();
        assert_eq!((acc, f1), (1.0, 1.0));

        // Threshold below everything: every record predicted fake.
        // 50/50 split: accuracy 1/2, F1 = 2*2/(2*2+2+0) = 2/3.
        let r = records(&[0.3, 0.4], &[0.8, 0.9]);
        let (acc, f1) = accuracy_f1(&r, 0.0, BinaryLabel::Fake).unwrap();
        assert_eq!(acc, 0.5);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);

        // Hand-built confusion: bona {0.2, 0.6}, fake {0.4, 0.8}, t=0.5.
        // Predictions: bona->ok, fake(0.4)->miss, bona(0.6)->false alarm,
        // fake(0.8)->hit. tp=1 fp=1 fn=1 tn=1 => acc 0.5, F1 0.5.
        let r = records(&[0.2, 0.6], &[0.4, 0.8]);
        let (acc, f1) = accuracy_f1(&r, 0.5, BinaryLabel::Fake).unwrap();
        assert_eq!((acc, f1), (0.5, 0.5));

        // Same set, bonafide as the positive class: tp=1 fp=1 fn=1 again.
        let (acc_b, f1_b) = accuracy_f1(&r, 0.5, BinaryLabel::Bonafide).unwrap();
        assert_eq!((acc_b, f1_b), (0.5, 0.5));

        // Nothing predicted positive and nothing positive-labeled is not a
        // crash: F1 defined as 0.
        let r = records(&[0.1], &[0.9]);
        let (_, f1) = accuracy_f1(&r, 2.0, BinaryLabel::Fake).unwrap();
        assert_eq!(f1, 0.0);
    }

    #[test]
    fn boundary_scores_are_predicted_bonafide() {
        // Strict inequality: distance exactly at the threshold stays
        // bonafide.
        let r = records(&[0.5], &[0.5000001]);
        let (acc, _) = accuracy_f1(&r, 0.5, BinaryLabel::Fake).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn single_class_sets_are_rejected() {
        let only_bona = records(&[0.1, 0.2], &[]);
        assert!(compute_eer(&only_bona).is_err());
        assert!(compute_auc(&only_bona).is_err());
        let only_fake = records(&[], &[0.8]);
        assert!(compute_eer(&only_fake).is_err());
        assert!(compute_auc(&only_fake).is_err());
        assert!(compute_eer(&[]).is_err());

        let mut unlabeled = records(&[0.1], &[0.9]);
        unlabeled[0].label = None;
        assert!(compute_eer(&unlabeled).is_err());
    }

    #[test]
    fn evaluate_self_calibrates_and_serializes() {
        let r = records(&[0.1, 0.2, 0.3], &[0.7, 0.8, 0.9]);
        let report = evaluate(&r, None).unwrap();
        assert_eq!(report.eer, 0.0);
        assert_eq!(report.auc, 1.0);
        assert_eq!(report.threshold_used, report.eer_threshold);
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.f1, 1.0);
        assert_eq!((report.n_bonafide, report.n_fake), (3, 3));

        let fixed = evaluate(&r, Some(10.0)).unwrap();
        assert_eq!(fixed.threshold_used, 10.0);
        assert_eq!(fixed.accuracy, 0.5); // everything predicted bonafide
        assert_eq!(fixed.f1, 0.0);
        assert_eq!(fixed.eer, 0.0); // EER is threshold-free

        let json = report.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["eer"], 0.0);
        assert_eq!(v["n_fake"], 3);
        assert_eq!(v["threshold_used"], v["eer_threshold"]);
        let text = report.to_text();
        assert!(text.contains("eer"));
        assert!(text.contains("3 bonafide, 3 fake"));
    }

    #[test]
    fn eer_is_between_zero_and_one_on_random_sets() {
        for seed in 0..20u64 {
            let mut r1 = rng::stream(seed, "eer-range", 0);
            let nb = 3 + (r1.random::<u32>() % 40) as usize;
            let nf = 3 + (r1.random::<u32>() % 40) as usize;
            let bona: Vec<f64> = (0..nb).map(|_| r1.random::<f64>()).collect();
            let fake: Vec<f64> = (0..nf).map(|_| r1.random::<f64>()).collect();
            let r = records(&bona, &fake);
            let (eer, t) = compute_eer(&r).unwrap();
            assert!((0.0..=1.0).contains(&eer), "seed {seed}: eer {eer}");
            assert!(t.is_finite());
            let auc = compute_auc(&r).unwrap();
            assert!((0.0..=1.0).contains(&auc), "seed {seed}: auc {auc}");
        }
    }
}
