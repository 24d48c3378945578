//! Per-speaker few-shot adaptation sessions.
//!
//! Every class contributes exactly one test and one validation utterance so
//! the evaluation sets stay fixed while `samples_per_class` and the trained
//! class subset vary.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::UtteranceRecord;
use crate::error::{KwsError, Result};

/// Configuration of one adaptation session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSpec {
    pub speaker: String,
    /// Per-class training cap; `None` uses every remaining utterance.
    pub samples_per_class: Option<usize>,
    /// Size of the seeded class subset available for training.
    pub classes: usize,
    pub seed: u64,
}

/// Train/validation/test record lists for one speaker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub spec: SessionSpec,
    pub train: Vec<UtteranceRecord>,
    pub val: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
    /// The classes whose utterances were eligible for training, sorted.
    pub selected_classes: Vec<usize>,
}

/// One splitmix64 round; derives independent rng streams from a session
/// seed so the test/validation picks do not depend on `samples_per_class`
/// or `classes`.
fn sub_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const CLASS_SUBSET_SALT: u64 = 0x636c_6173_7365_73; // "classes"

/// Builds a session from vocabulary-resolved records.
///
/// Per class with at least two of the speaker's utterances: one goes to
/// test, one to validation (chosen by a per-class seeded shuffle). The
/// remaining utterances of the `classes`-sized seeded class subset feed
/// training, capped at `samples_per_class`. A selected class with fewer
/// than three utterances is an error.
pub fn make_session(
    records: &[UtteranceRecord],
    vocab_size: usize,
    spec: &SessionSpec,
) -> Result<Session> {
    if spec.classes > vocab_size {
        return Err(KwsError::Config(format!(
            "classes-per-speaker {} exceeds vocabulary size {vocab_size}",
            spec.classes
        )));
    }

    let mut per_class: Vec<Vec<UtteranceRecord>> = vec![Vec::new(); vocab_size];
    for r in records {
        if r.speaker == spec.speaker {
            per_class[r.label].push(r.clone());
        }
    }
    // deterministic candidate order before the seeded shuffle
    for list in per_class.iter_mut() {
        list.sort_by(|a, b| a.rel_path.cmp(&b.rel_path));
    }

    let mut class_ids: Vec<usize> = (0..vocab_size).collect();
    let mut subset_rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, CLASS_SUBSET_SALT));
    class_ids.shuffle(&mut subset_rng);
    let mut selected: Vec<usize> = class_ids[..spec.classes].to_vec();
    selected.sort_unstable();

    let mut session = Session {
        spec: spec.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        selected_classes: selected.clone(),
    };

    for (label, list) in per_class.iter_mut().enumerate() {
        let is_selected = selected.binary_search(&label).is_ok();
        if is_selected && list.len() < 3 {
            return Err(KwsError::Dataset(format!(
                "speaker `{}` has only {} samples in selected class {label}; need >= 3",
                spec.speaker,
                list.len()
            )));
        }
        if list.len() < 2 {
            continue; // class not represented well enough for test + val
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, label as u64));
        list.shuffle(&mut rng);
        session.test.push(list[0].clone());
        session.val.push(list[1].clone());
        if is_selected {
            let available = list.len() - 2;
            let take = spec
                .samples_per_class
                .map_or(available, |k| k.min(available));
            session.train.extend_from_slice(&list[2..2 + take]);
        }
    }
    if session.test.is_empty() {
        return Err(KwsError::Dataset(format!(
            "speaker `{}` has no class with enough samples for a session",
            spec.speaker
        )));
    }
    Ok(session)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;
    use std::path::PathBuf;

    fn records_for(speaker: &str, per_class: &[usize]) -> Vec<UtteranceRecord> {
        let mut out = Vec::new();
        for (label, count) in per_class.iter().enumerate() {
            for i in 0..*count {
                out.push(UtteranceRecord {
                    speaker: speaker.into(),
                    label,
                    rel_path: PathBuf::from(format!("c{label}/{speaker}_nohash_{i}.wav")),
                });
            }
        }
        out
    }

    fn spec(k: Option<usize>, c: usize, seed: u64) -> SessionSpec {
        SessionSpec {
            speaker: "spk".into(),
            samples_per_class: k,
            classes: c,
            seed,
        }
    }

    #[test]
    fn six_per_class_k4_c10_gives_40_10_10() {
        let records = records_for("spk", &[6; 10]);
        let s = make_session(&records, 10, &spec(Some(4), 10, 0)).unwrap();
        assert_eq!(s.train.len(), 40);
        assert_eq!(s.val.len(), 10);
        assert_eq!(s.test.len(), 10);
    }

    #[test]
    fn class_subset_caps_training_but_not_test() {
        let records = records_for("spk", &[6; 10]);
        let s = make_session(&records, 10, &spec(Some(4), 8, 0)).unwrap();
        assert_eq!(s.train.len(), 32);
        assert_eq!(s.selected_classes.len(), 8);
        // the evaluation sets still cover every class
        assert_eq!(s.val.len(), 10);
        assert_eq!(s.test.len(), 10);
        let trained: BTreeSet<usize> = s.train.iter().map(|r| r.label).collect();
        assert_eq!(
            trained,
            s.selected_classes.iter().cloned().collect::<BTreeSet<_>>()
        );
    }

    #[test]
    fn test_lists_are_independent_of_k_and_c() {
        let records = records_for("spk", &[24; 10]);
        let a = make_session(&records, 10, &spec(Some(4), 10, 3)).unwrap();
        let b = make_session(&records, 10, &spec(Some(22), 10, 3)).unwrap();
        let c = make_session(&records, 10, &spec(None, 6, 3)).unwrap();
        assert_eq!(a.test, b.test);
        assert_eq!(a.test, c.test);
        assert_eq!(a.val, c.val);
        // without a cap, all remaining utterances train
        assert_eq!(b.train.len(), 220);
    }

    #[test]
    fn different_seeds_give_different_sessions() {
        let records = records_for("spk", &[8; 10]);
        let a = make_session(&records, 10, &spec(Some(4), 10, 0)).unwrap();
        let b = make_session(&records, 10, &spec(Some(4), 10, 1)).unwrap();
        assert_ne!(a.test, b.test);
    }

    #[test]
    fn scarce_selected_class_is_an_error() {
        let mut counts = vec![6usize; 10];
        counts[4] = 2;
        let records = records_for("spk", &counts);
        let err = make_session(&records, 10, &spec(Some(4), 10, 0)).unwrap_err();
        assert!(err.to_string().contains("class 4"), "{err}");
    }

    #[test]
    fn oversized_class_subset_is_an_error() {
        let records = records_for("spk", &[6; 10]);
        assert!(make_session(&records, 10, &spec(Some(4), 11, 0)).is_err());
    }

    proptest! {
        /// Train/val/test are pairwise disjoint by path and stay inside the
        /// speaker's records.
        #[test]
        fn session_sets_are_disjoint(
            counts in proptest::collection::vec(3usize..9, 4..10),
            k in 1usize..6,
            seed in 0u64..20,
        ) {
            let vocab = counts.len();
            let records = records_for("spk", &counts);
            let c = vocab.min(3);
            let s = make_session(&records, vocab, &spec(Some(k), c, seed)).unwrap();
            let train: BTreeSet<_> = s.train.iter().map(|r| r.rel_path.clone()).collect();
            let val: BTreeSet<_> = s.val.iter().map(|r| r.rel_path.clone()).collect();
            let test: BTreeSet<_> = s.test.iter().map(|r| r.rel_path.clone()).collect();
            prop_assert!(train.is_disjoint(&val));
            prop_assert!(train.is_disjoint(&test));
            prop_assert!(val.is_disjoint(&test));
            prop_assert_eq!(s.val.len(), vocab);
            prop_assert_eq!(s.test.len(), vocab);
            for r in s.train.iter() {
                prop_assert!(s.selected_classes.contains(&r.label));
            }
        }
    }
}
