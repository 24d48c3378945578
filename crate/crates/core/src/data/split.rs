//! Speaker-threshold splits and the pretraining train/validation split.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Census, UtteranceRecord};
use crate::error::{KwsError, Result};

/// Partition of all speakers into an online-learning set (everyone with at
/// least `threshold` samples in every vocabulary class) and the pretraining
/// complement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerSplit {
    pub threshold: usize,
    pub online: BTreeSet<String>,
    pub pretrain: BTreeSet<String>,
}

pub fn speaker_split(census: &Census, threshold: usize) -> Result<SpeakerSplit> {
    if threshold < 1 {
        return Err(KwsError::Config("split threshold must be >= 1".into()));
    }
    let mut online = BTreeSet::new();
    let mut pretrain = BTreeSet::new();
    for (speaker, counts) in &census.counts {
        if counts.iter().all(|c| *c >= threshold) {
            online.insert(speaker.clone());
        } else {
            pretrain.insert(speaker.clone());
        }
    }
    Ok(SpeakerSplit {
        threshold,
        online,
        pretrain,
    })
}

/// Record-level seeded shuffle and split; `train_fraction` is the share of
/// records that go to training. Both sides must end up non-empty.
pub fn pretrain_split(
    records: &[UtteranceRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<UtteranceRecord>, Vec<UtteranceRecord>)> {
    if records.len() < 2 {
        return Err(KwsError::Dataset(format!(
            "need at least 2 records to split, got {}",
            records.len()
        )));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(KwsError::Config(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let mut shuffled: Vec<UtteranceRecord> = records.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n_train = (records.len() as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == records.len() {
        return Err(KwsError::Config(format!(
            "train fraction {train_fraction} leaves an empty side for {} records",
            records.len()
        )));
    }
    let val = shuffled.split_off(n_train);
    Ok((shuffled, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{index_gsc, testtree, Vocabulary};
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn census_from(spec: &[(&str, &str, usize)]) -> Census {
        let dir = tempfile::tempdir().unwrap();
        testtree::build(dir.path(), spec);
        index_gsc(dir.path()).unwrap().census(&Vocabulary::custom(
            "mini",
            vec!["yes".into(), "no".into()],
        ))
    }

    #[test]
    fn threshold_selects_fully_covered_speakers() {
        let census = census_from(&[
            ("a", "yes", 3),
            ("a", "no", 3),
            ("b", "yes", 3),
            ("b", "no", 2),
            ("c", "yes", 9),
            ("c", "no", 9),
        ]);
        let split = speaker_split(&census, 3).unwrap();
        assert_eq!(
            split.online.iter().cloned().collect::<Vec<_>>(),
            vec!["a", "c"]
        );
        assert_eq!(split.pretrain.iter().cloned().collect::<Vec<_>>(), vec!["b"]);

        let split9 = speaker_split(&census, 9).unwrap();
        assert_eq!(split9.online.len(), 1);
        assert!(split9.online.contains("c"));
    }

    #[test]
    fn huge_threshold_sends_everyone_to_pretraining() {
        let census = census_from(&[("a", "yes", 3), ("a", "no", 3)]);
        let split = speaker_split(&census, 1000).unwrap();
        assert!(split.online.is_empty());
        assert_eq!(split.pretrain.len(), 1);
    }

    #[test]
    fn threshold_zero_is_rejected() {
        let census = census_from(&[("a", "yes", 1)]);
        assert!(speaker_split(&census, 0).is_err());
    }

    fn dummy_records(n: usize) -> Vec<UtteranceRecord> {
        (0..n)
            .map(|i| UtteranceRecord {
                speaker: format!("s{i}"),
                label: i % 3,
                rel_path: PathBuf::from(format!("yes/s{i}_nohash_0.wav")),
            })
            .collect()
    }

    #[test]
    fn ninety_ten_split_counts() {
        let (train, val) = pretrain_split(&dummy_records(100), 0.9, 7).unwrap();
        assert_eq!(train.len(), 90);
        assert_eq!(val.len(), 10);
    }

    #[test]
    fn same_seed_reproduces_partition() {
        let records = dummy_records(37);
        let a = pretrain_split(&records, 0.9, 3).unwrap();
        let b = pretrain_split(&records, 0.9, 3).unwrap();
        assert_eq!(a, b);
        let c = pretrain_split(&records, 0.9, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_fraction_is_rejected() {
        assert!(pretrain_split(&dummy_records(100), 1.0, 0).is_err());
        assert!(pretrain_split(&dummy_records(100), 0.0, 0).is_err());
        assert!(pretrain_split(&dummy_records(1), 0.9, 0).is_err());
    }

    proptest! {
        /// A split is a partition: every speaker lands on exactly one side.
        #[test]
        fn split_is_a_partition(counts in proptest::collection::vec((0usize..12, 0usize..12), 1..20),
                                threshold in 1usize..10) {
            let spec: Vec<(String, Vec<usize>)> = counts
                .iter()
                .enumerate()
                .map(|(i, (a, b))| (format!("s{i}"), vec![*a, *b]))
                .collect();
            let census = Census {
                counts: spec.iter().cloned().collect(),
                classes: 2,
            };
            let split = speaker_split(&census, threshold).unwrap();
            prop_assert_eq!(split.online.len() + split.pretrain.len(), census.counts.len());
            prop_assert!(split.online.is_disjoint(&split.pretrain));
            for s in &split.online {
                prop_assert!(census.counts[s].iter().all(|c| *c >= threshold));
            }
        }

        /// Shuffle-and-split keeps every record exactly once.
        #[test]
        fn pretrain_split_preserves_records(n in 2usize..60, seed in 0u64..50) {
            let records = dummy_records(n);
            if let Ok((train, val)) = pretrain_split(&records, 0.9, seed) {
                let mut all: Vec<_> = train.iter().chain(val.iter()).map(|r| r.rel_path.clone()).collect();
                all.sort();
                let mut want: Vec<_> = records.iter().map(|r| r.rel_path.clone()).collect();
                want.sort();
                prop_assert_eq!(all, want);
            }
        }
    }
}
