use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Subset};
use crate::error::{Error, Result};

/// Splits item indices at the video level: every item sharing a source id
/// lands on the same side. The validation side gets `round(videos · fraction)`
/// videos, clamped to leave at least one video on each side.
pub fn split_indices(source_ids: &[String], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Split(format!(
            "validation fraction {val_fraction} must lie in (0, 1)"
        )));
    }
    let videos: Vec<&String> = source_ids.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if videos.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 source videos, got {}",
            videos.len()
        )));
    }
    let mut order = videos.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((videos.len() as f64 * val_fraction).round() as usize).clamp(1, videos.len() - 1);
    let val_videos: BTreeSet<&String> = order[..n_val].iter().copied().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, id) in source_ids.iter().enumerate() {
        if val_videos.contains(id) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((train, val))
}

/// Video-level train/validation split of a dataset.
pub fn split_dataset(ds: Arc<dyn Dataset>, val_fraction: f64, seed: u64) -> Result<(Subset, Subset)> {
    let ids: Vec<String> = (0..ds.len()).map(|i| ds.source_id(i)).collect();
    let (train, val) = split_indices(&ids, val_fraction, seed)?;
    Ok((Subset::new(ds.clone(), train), Subset::new(ds, val)))
}

/// Count of items per label, for balance checks.
pub fn label_histogram(ds: &dyn Dataset) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for i in 0..ds.len() {
        if let Some(l) = ds.label(i) {
            *hist.entry(l).or_insert(0) += 1;
        }
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n_videos: usize, clips_per: usize) -> Vec<String> {
        (0..n_videos)
            .flat_map(|v| std::iter::repeat_n(format!("video{v}"), clips_per))
            .collect()
    }

    #[test]
    fn ten_videos_leave_one_for_validation() {
        let ids = ids(10, 1);
        let (train, val) = split_indices(&ids, 0.1, 7).unwrap();
        assert_eq!((train.len(), val.len()), (9, 1));
    }

    #[test]
    fn deterministic_per_seed() {
        let ids = ids(30, 2);
        assert_eq!(split_indices(&ids, 0.2, 3).unwrap(), split_indices(&ids, 0.2, 3).unwrap());
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(matches!(split_indices(&ids(1, 5), 0.5, 0), Err(Error::Split(_))));
        assert!(split_indices(&ids(4, 1), 0.0, 0).is_err());
        assert!(split_indices(&ids(4, 1), 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_without_video_leakage(n in 2usize..40, per in 1usize..4, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let ids = ids(n, per);
            let (train, val) = split_indices(&ids, frac, seed).unwrap();
            let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..ids.len()).collect::<Vec<_>>());
            let tv: BTreeSet<&String> = train.iter().map(|&i| &ids[i]).collect();
            prop_assert!(val.iter().all(|&i| !tv.contains(&ids[i])));
            prop_assert!(!train.is_empty() && !val.is_empty());
        }
    }
}
