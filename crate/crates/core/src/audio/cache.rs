//! On-disk feature cache: one binary record per utterance.
//!
//! Record layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "UKWSFT01"
//! ndim    u32
//! dims    ndim x u32
//! data    prod(dims) x f32
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{KwsError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"UKWSFT01";

/// Cache location of an utterance, mirroring the dataset tree with a
/// `.feat` extension.
pub fn cache_path(cache_root: &Path, rel_wav_path: &Path) -> PathBuf {
    cache_root.join(rel_wav_path.with_extension("feat"))
}

pub fn write_feature(path: &Path, map: &Tensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = Vec::with_capacity(12 + 4 * (map.shape().len() + map.numel()));
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(map.shape().len() as u32).to_le_bytes());
    for d in map.shape() {
        bytes.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in map.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_feature(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|_| KwsError::MissingArtifact(path.to_path_buf()))?;
    let corrupt = |what: &str| KwsError::Checkpoint(format!("feature record {path:?}: {what}"));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let ndim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut at = 12;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = bytes
            .get(at..at + 4)
            .ok_or_else(|| corrupt("truncated dims"))?;
        shape.push(u32::from_le_bytes(d.try_into().unwrap()) as usize);
        at += 4;
    }
    let n: usize = shape.iter().product();
    let payload = bytes
        .get(at..at + 4 * n)
        .ok_or_else(|| corrupt("truncated payload"))?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_shape_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = cache_path(dir.path(), Path::new("yes/abc_nohash_0.wav"));
        assert!(path.ends_with("yes/abc_nohash_0.feat"));
        let map = Tensor::from_vec(&[2, 3, 1], vec![0.5, -1.25, 3e-8, 100.0, -0.0, 7.5]).unwrap();
        write_feature(&path, &map).unwrap();
        let back = read_feature(&path).unwrap();
        assert_eq!(back.shape(), map.shape());
        for (a, b) in back.data().iter().zip(map.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn missing_record_is_a_missing_artifact() {
        let err = read_feature(Path::new("/nonexistent/x.feat")).unwrap_err();
        assert!(matches!(err, KwsError::MissingArtifact(_)));
    }

    #[test]
    fn corrupt_record_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.feat");
        std::fs::write(&path, b"UKWSFT01\x02\x00\x00\x00").unwrap();
        assert!(read_feature(&path).is_err());
    }
}
