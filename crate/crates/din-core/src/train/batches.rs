//! Balanced batch construction: every batch carries a bonafide floor so the
//! center loss always has K >= 1 rows to average.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{DinError, Result};
use crate::model::GroupLabel;

/// Split one epoch into batches of exactly `batch_size` indices.
///
/// Each batch reserves `min_bonafide` slots fed from a dedicated shuffled
/// bonafide cycle; the remaining slots walk a shuffled permutation of the
/// whole dataset, so every sample appears at least once per epoch and the
/// free slots are uniform over all classes. The tail batch tops up by
/// wrapping the permutation, so some samples may appear twice.
pub fn balanced_batches<R: Rng>(
    groups: &[GroupLabel],
    batch_size: usize,
    min_bonafide: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let n = groups.len();
    if n == 0 {
        return Err(DinError::data("cannot batch an empty dataset"));
    }
    if batch_size < 2 {
        return Err(DinError::config(format!("batch_size must be >= 2, got {batch_size}")));
    }
    if min_bonafide >= batch_size {
        return Err(DinError::config(format!(
            "min_bonafide_per_batch {min_bonafide} must be below batch_size {batch_size}"
        )));
    }
    let bonafide: Vec<usize> = (0..n).filter(|&i| groups[i] == GroupLabel::Bonafide).collect();
    if bonafide.len() < min_bonafide.max(1) {
        return Err(DinError::data(format!(
            "dataset has {} bonafide samples, need at least {}",
            bonafide.len(),
            min_bonafide.max(1)
        )));
    }

    let mut everyone: Vec<usize> = (0..n).collect();
    everyone.shuffle(rng);
    let mut bonafide_cycle = bonafide.clone();
    bonafide_cycle.shuffle(rng);
    let mut bona_pos = 0usize;
    let mut next_bonafide = |rng: &mut R| -> usize {
        if bona_pos == bonafide_cycle.len() {
            bonafide_cycle.shuffle(rng);
            bona_pos = 0;
        }
        let idx = bonafide_cycle[bona_pos];
        bona_pos += 1;
        idx
    };

    let free_slots = batch_size - min_bonafide;
    let n_batches = n.div_ceil(free_slots);
    let mut batches = Vec::with_capacity(n_batches);
    let mut walk = 0usize;
    for _ in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..min_bonafide {
            batch.push(next_bonafide(rng));
        }
        for _ in 0..free_slots {
            batch.push(everyone[walk % n]);
            walk += 1;
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn mixed_groups(n_bona: usize, n_tts: usize, n_vc: usize) -> Vec<GroupLabel> {
        let mut g = vec![GroupLabel::Bonafide; n_bona];
        g.extend(std::iter::repeat_n(GroupLabel::Tts, n_tts));
        g.extend(std::iter::repeat_n(GroupLabel::Vc, n_vc));
        g
    }

    #[test]
    fn every_batch_is_full_and_meets_the_bonafide_floor() {
        let groups = mixed_groups(100, 50, 50);
        let mut rng = crate::rng::stream(3, "batches", 0);
        let batches = balanced_batches(&groups, 64, 8, &mut rng).unwrap();
        assert_eq!(batches.len(), 200usize.div_ceil(56));
        for batch in &batches {
            assert_eq!(batch.len(), 64);
            let bona = batch.iter().filter(|&&i| groups[i] == GroupLabel::Bonafide).count();
            assert!(bona >= 8, "batch has only {bona} bonafide");
        }
    }

    #[test]
    fn one_epoch_covers_every_sample() {
        let groups = mixed_groups(30, 80, 15);
        let mut rng = crate::rng::stream(7, "batches", 0);
        let batches = balanced_batches(&groups, 16, 4, &mut rng).unwrap();
        let seen: HashSet<usize> = batches.iter().flatten().copied().collect();
        assert_eq!(seen.len(), groups.len());
    }

    #[test]
    fn same_seed_reproduces_the_batch_sequence() {
        let groups = mixed_groups(40, 40, 40);
        let a = balanced_batches(&groups, 32, 8, &mut crate::rng::stream(9, "b", 2)).unwrap();
        let b = balanced_batches(&groups, 32, 8, &mut crate::rng::stream(9, "b", 2)).unwrap();
        assert_eq!(a, b);
        let c = balanced_batches(&groups, 32, 8, &mut crate::rng::stream(9, "b", 3)).unwrap();
        assert_ne!(a, c, "different stream should reshuffle");
    }

    #[test]
    fn tiny_datasets_wrap_to_fill_the_batch() {
        let groups = mixed_groups(2, 3, 0);
        let mut rng = crate::rng::stream(1, "batches", 0);
        let batches = balanced_batches(&groups, 8, 2, &mut rng).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 8);
        let seen: HashSet<usize> = batches[0].iter().copied().collect();
        assert_eq!(seen.len(), 5, "all five samples still appear");
    }

    #[test]
    fn too_few_bonafide_is_an_error() {
        let groups = mixed_groups(3, 50, 0);
        let mut rng = crate::rng::stream(1, "batches", 0);
        let err = balanced_batches(&groups, 16, 4, &mut rng).unwrap_err();
        assert!(err.to_string().contains("bonafide"), "{err}");
        // Zero bonafide fails even with min_bonafide = 0: the center loss
        // needs at least one bonafide sample somewhere.
        let groups = mixed_groups(0, 10, 0);
        assert!(balanced_batches(&groups, 4, 0, &mut rng).is_err());
    }

    #[test]
    fn degenerate_shapes_are_rejected() {
        let groups = mixed_groups(4, 4, 0);
        let mut rng = crate::rng::stream(1, "batches", 0);
        assert!(balanced_batches(&groups, 1, 0, &mut rng).is_err());
        assert!(balanced_batches(&groups, 8, 8, &mut rng).is_err());
        assert!(balanced_batches(&[], 8, 2, &mut rng).is_err());
    }
}
