//! Google Speech Commands indexing, speaker-threshold splits and few-shot
//! session construction.

pub mod manifest;
pub mod session;
pub mod split;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};

/// The ten-word target vocabulary, in its canonical order.
pub const GSC10_WORDS: [&str; 10] = [
    "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go",
];

/// All 35 command words of Speech Commands v2, alphabetical.
pub const GSC35_WORDS: [&str; 35] = [
    "backward", "bed", "bird", "cat", "dog", "down", "eight", "five", "follow", "forward",
    "four", "go", "happy", "house", "learn", "left", "marvin", "nine", "no", "off", "on",
    "one", "right", "seven", "sheila", "six", "stop", "three", "tree", "two", "up", "visual",
    "wow", "yes", "zero",
];

/// An ordered class list with a reverse lookup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub name: String,
    classes: Vec<String>,
}

impl Vocabulary {
    pub fn gsc10() -> Self {
        Vocabulary {
            name: "gsc10".into(),
            classes: GSC10_WORDS.iter().map(|w| w.to_string()).collect(),
        }
    }

    pub fn gsc35() -> Self {
        Vocabulary {
            name: "gsc35".into(),
            classes: GSC35_WORDS.iter().map(|w| w.to_string()).collect(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "gsc10" => Ok(Self::gsc10()),
            "gsc35" => Ok(Self::gsc35()),
            other => Err(KwsError::Config(format!(
                "unknown vocabulary `{other}` (expected gsc10 or gsc35)"
            ))),
        }
    }

    /// Custom word list, for synthetic corpora and tests.
    pub fn custom(name: &str, classes: Vec<String>) -> Self {
        Vocabulary {
            name: name.into(),
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class(&self, index: usize) -> &str {
        &self.classes[index]
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == word)
    }
}

/// One indexed utterance: who said which word, and where the file lives
/// relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub word: String,
    pub rel_path: PathBuf,
}

/// A vocabulary-resolved utterance: the label is a class index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub speaker: String,
    pub label: usize,
    pub rel_path: PathBuf,
}

/// Immutable index over an extracted Speech Commands directory tree.
#[derive(Debug, Clone)]
pub struct GscIndex {
    pub root: PathBuf,
    pub entries: Vec<Utterance>,
    /// Files whose names did not follow `<speaker>_nohash_<n>.wav`.
    pub skipped: usize,
}

/// Per-speaker, per-class sample counts for one vocabulary.
#[derive(Debug, Clone)]
pub struct Census {
    pub counts: BTreeMap<String, Vec<usize>>,
    pub classes: usize,
}

const SPEAKER_MARKER: &str = "_nohash_";

/// Scans a class-per-directory tree and parses speaker ids from filenames.
/// Subdirectories starting with `_` (background noise) are ignored;
/// malformed filenames are counted in `skipped`.
pub fn index_gsc(root: &Path) -> Result<GscIndex> {
    if !root.is_dir() {
        return Err(KwsError::Dataset(format!(
            "dataset root {root:?} is not a directory"
        )));
    }
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && !p
                    .file_name()
                    .map(|n| n.to_string_lossy().starts_with('_'))
                    .unwrap_or(true)
        })
        .collect();
    class_dirs.sort();

    let mut entries = Vec::new();
    let mut skipped = 0usize;
    for dir in class_dirs {
        let word = dir.file_name().unwrap().to_string_lossy().to_string();
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|x| x == "wav").unwrap_or(false))
            .collect();
        files.sort();
        for file in files {
            let stem = file.file_stem().unwrap_or_default().to_string_lossy();
            match stem.split_once(SPEAKER_MARKER) {
                Some((speaker, _)) if !speaker.is_empty() => {
                    entries.push(Utterance {
                        speaker: speaker.to_string(),
                        word: word.clone(),
                        rel_path: PathBuf::from(&word).join(file.file_name().unwrap()),
                    });
                }
                _ => skipped += 1,
            }
        }
    }
    Ok(GscIndex {
        root: root.to_path_buf(),
        entries,
        skipped,
    })
}

impl GscIndex {
    /// Every distinct speaker in the tree, across all words.
    pub fn speakers(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.speaker.clone()).collect()
    }

    /// Per-speaker sample counts restricted to `vocab`. Speakers with no
    /// in-vocabulary utterances still appear, with all-zero counts.
    pub fn census(&self, vocab: &Vocabulary) -> Census {
        let mut counts: BTreeMap<String, Vec<usize>> = self
            .speakers()
            .into_iter()
            .map(|s| (s, vec![0usize; vocab.len()]))
            .collect();
        for e in &self.entries {
            if let Some(label) = vocab.index_of(&e.word) {
                counts.get_mut(&e.speaker).expect("speaker indexed")[label] += 1;
            }
        }
        Census {
            counts,
            classes: vocab.len(),
        }
    }

    /// Vocabulary-resolved records, in index order.
    pub fn records(&self, vocab: &Vocabulary) -> Vec<UtteranceRecord> {
        self.entries
            .iter()
            .filter_map(|e| {
                vocab.index_of(&e.word).map(|label| UtteranceRecord {
                    speaker: e.speaker.clone(),
                    label,
                    rel_path: e.rel_path.clone(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod testtree {
    use std::fs;
    use std::path::Path;

    /// Builds a GSC-shaped tree of empty wav-named files:
    /// `(speaker, word, count)` triples.
    pub fn build(root: &Path, spec: &[(&str, &str, usize)]) {
        for (speaker, word, count) in spec {
            let dir = root.join(word);
            fs::create_dir_all(&dir).unwrap();
            for i in 0..*count {
                fs::write(dir.join(format!("{speaker}_nohash_{i}.wav")), b"").unwrap();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filename_parsing_extracts_speaker_and_label() {
        let dir = tempfile::tempdir().unwrap();
        testtree::build(dir.path(), &[("0a7c2a8d", "yes", 1)]);
        let index = index_gsc(dir.path()).unwrap();
        assert_eq!(index.entries.len(), 1);
        assert_eq!(index.entries[0].speaker, "0a7c2a8d");
        assert_eq!(index.entries[0].word, "yes");
        assert_eq!(
            index.entries[0].rel_path,
            PathBuf::from("yes/0a7c2a8d_nohash_0.wav")
        );
        let records = index.records(&Vocabulary::gsc10());
        assert_eq!(records[0].label, 0);
    }

    #[test]
    fn empty_directory_yields_empty_index() {
        let dir = tempfile::tempdir().unwrap();
        let index = index_gsc(dir.path()).unwrap();
        assert!(index.entries.is_empty());
        assert!(index.speakers().is_empty());
    }

    #[test]
    fn malformed_names_and_noise_dir_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        testtree::build(dir.path(), &[("abc", "go", 2)]);
        fs::write(dir.path().join("go/no-marker.wav"), b"").unwrap();
        fs::create_dir_all(dir.path().join("_background_noise_")).unwrap();
        fs::write(
            dir.path().join("_background_noise_/pink_nohash_0.wav"),
            b"",
        )
        .unwrap();
        let index = index_gsc(dir.path()).unwrap();
        assert_eq!(index.entries.len(), 2);
        assert_eq!(index.skipped, 1);
    }

    #[test]
    fn census_counts_per_class() {
        let dir = tempfile::tempdir().unwrap();
        testtree::build(
            dir.path(),
            &[("a", "yes", 3), ("a", "no", 1), ("b", "bed", 2)],
        );
        let index = index_gsc(dir.path()).unwrap();
        let census = index.census(&Vocabulary::gsc10());
        assert_eq!(census.counts["a"][0], 3);
        assert_eq!(census.counts["a"][1], 1);
        // speaker b only has out-of-vocabulary words but is still counted
        assert_eq!(census.counts["b"], vec![0usize; 10]);
        assert_eq!(index.speakers().len(), 2);
    }

    #[test]
    fn vocabularies_have_expected_sizes() {
        assert_eq!(Vocabulary::gsc10().len(), 10);
        assert_eq!(Vocabulary::gsc35().len(), 35);
        assert_eq!(Vocabulary::gsc10().class(9), "go");
        assert!(Vocabulary::gsc35().index_of("yes").is_some());
        assert!(Vocabulary::by_name("gsc12").is_err());
    }
}
