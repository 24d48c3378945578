//! Line-oriented split manifests.
//!
//! Header lines are `# key: value` with sorted keys; record rows are
//! tab-separated `path  speaker  word  role`. Rewriting the same inputs
//! produces byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{UtteranceRecord, Vocabulary};
use crate::error::{KwsError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordRow {
    pub rel_path: PathBuf,
    pub speaker: String,
    pub word: String,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub header: BTreeMap<String, String>,
    pub rows: Vec<RecordRow>,
}

impl Manifest {
    pub fn new(header: BTreeMap<String, String>) -> Self {
        Manifest {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push_records(&mut self, records: &[UtteranceRecord], vocab: &Vocabulary, role: &str) {
        for r in records {
            self.rows.push(RecordRow {
                rel_path: r.rel_path.clone(),
                speaker: r.speaker.clone(),
                word: vocab.class(r.label).to_string(),
                role: role.to_string(),
            });
        }
    }

    /// Rows of one role, resolved back to class indices.
    pub fn records_with_role(&self, vocab: &Vocabulary, role: &str) -> Result<Vec<UtteranceRecord>> {
        self.rows
            .iter()
            .filter(|r| r.role == role)
            .map(|r| {
                let label = vocab.index_of(&r.word).ok_or_else(|| {
                    KwsError::Dataset(format!(
                        "manifest word `{}` is not in vocabulary {}",
                        r.word, vocab.name
                    ))
                })?;
                Ok(UtteranceRecord {
                    speaker: r.speaker.clone(),
                    label,
                    rel_path: r.rel_path.clone(),
                })
            })
            .collect()
    }

    pub fn to_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            writeln!(out, "# {k}: {v}").unwrap();
        }
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                r.rel_path.display(),
                r.speaker,
                r.word,
                r.role
            )
            .unwrap();
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|_| KwsError::MissingArtifact(path.to_path_buf()))?;
        let mut manifest = Manifest::default();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# ") {
                if let Some((k, v)) = rest.split_once(": ") {
                    manifest.header.insert(k.to_string(), v.to_string());
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(KwsError::Dataset(format!(
                    "{path:?}:{}: expected 4 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            manifest.rows.push(RecordRow {
                rel_path: PathBuf::from(fields[0]),
                speaker: fields[1].to_string(),
                word: fields[2].to_string(),
                role: fields[3].to_string(),
            });
        }
        Ok(manifest)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

pub fn sha256_hex_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        let mut header = BTreeMap::new();
        header.insert("vocab".into(), "gsc10".into());
        header.insert("seed".into(), "0".into());
        let mut m = Manifest::new(header);
        m.push_records(
            &[UtteranceRecord {
                speaker: "abc".into(),
                label: 2,
                rel_path: PathBuf::from("up/abc_nohash_0.wav"),
            }],
            &Vocabulary::gsc10(),
            "train",
        );
        m
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let m = sample();
        m.write(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = Manifest::read(&path).unwrap();
        assert_eq!(back, m);
        back.write(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn role_filter_resolves_labels() {
        let m = sample();
        let records = m
            .records_with_role(&Vocabulary::gsc10(), "train")
            .unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].label, 2);
        assert!(m
            .records_with_role(&Vocabulary::gsc10(), "val")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(
            sha256_hex(b"ukws"),
            sha256_hex(b"ukws"),
        );
        assert_ne!(sha256_hex(b"a"), sha256_hex(b"b"));
    }
}
