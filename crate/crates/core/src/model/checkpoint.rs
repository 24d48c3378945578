//! Versioned binary checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic          8 bytes  "UKWSCKP1"
//! header_len     u32
//! header         JSON: config, vocabulary, feature stats, mfcc config
//! blob_count     u32
//! per blob:
//!   kind         u8   (0 = parameter, 1 = state buffer)
//!   name_len     u32, name (utf8)
//!   ndim         u32, dims (u32 each)
//!   data         f32 (little-endian)
//! speaker_count  u32
//! per speaker:   id_len u32, id (utf8), in row order
//! ```
//!
//! Loading rebuilds the model from the header config and validates every
//! blob shape against it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KwsModel, ModelConfig};
use crate::audio::mfcc::{FeatureStats, MfccConfig};
use crate::data::Vocabulary;
use crate::error::{KwsError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"UKWSCKP1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    vocabulary: Option<Vocabulary>,
    feature_stats: Option<FeatureStats>,
    mfcc: Option<MfccConfig>,
}

const KIND_PARAM: u8 = 0;
const KIND_STATE: u8 = 1;

fn push_blob(out: &mut Vec<u8>, kind: u8, name: &str, tensor: &Tensor) {
    out.push(kind);
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for d in tensor.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the model. Optimizer state is deliberately not persisted.
pub fn save(model: &KwsModel, path: &Path) -> Result<()> {
    let header = Header {
        version: 1,
        config: model.config.clone(),
        vocabulary: model.vocab.clone(),
        feature_stats: model.feature_stats.clone(),
        mfcc: model.mfcc_config.clone(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| KwsError::Checkpoint(e.to_string()))?;

    let mut blobs: Vec<(u8, String, Tensor)> = Vec::new();
    model.visit_params(&mut |name, p| blobs.push((KIND_PARAM, name.to_string(), p.value.clone())));
    model.visit_state(&mut |name, t| blobs.push((KIND_STATE, name.to_string(), t.clone())));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (kind, name, tensor) in &blobs {
        push_blob(&mut out, *kind, name, tensor);
    }
    let ids = model.embedding.ids();
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let slice = self.bytes.get(self.at..self.at + n).ok_or_else(|| {
            KwsError::Checkpoint(format!("{:?}: truncated at offset {}", self.path, self.at))
        })?;
        self.at += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| KwsError::Checkpoint(format!("{:?}: invalid utf8", self.path)))
    }
}

/// Loads a checkpoint saved by [`save`].
pub fn load(path: &Path) -> Result<KwsModel> {
    let bytes = fs::read(path).map_err(|_| KwsError::MissingArtifact(path.to_path_buf()))?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(KwsError::Checkpoint(format!("{path:?}: bad magic")));
    }
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| KwsError::Checkpoint(format!("{path:?}: header: {e}")))?;
    if header.version != 1 {
        return Err(KwsError::Checkpoint(format!(
            "{path:?}: unsupported version {}",
            header.version
        )));
    }

    let blob_count = r.u32()? as usize;
    let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut state: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..blob_count {
        let kind = r.u8()?;
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&shape, data)?;
        match kind {
            KIND_PARAM => params.insert(name, tensor),
            KIND_STATE => state.insert(name, tensor),
            other => {
                return Err(KwsError::Checkpoint(format!(
                    "{path:?}: unknown blob kind {other}"
                )))
            }
        };
    }

    let speaker_count = r.u32()? as usize;
    let mut ids = Vec::with_capacity(speaker_count);
    for _ in 0..speaker_count {
        ids.push(r.string()?);
    }

    let mut model = KwsModel::build(header.config, 0)?;
    model.vocab = header.vocabulary;
    model.feature_stats = header.feature_stats;
    model.mfcc_config = header.mfcc;

    if let Some(weight) = params.remove("embedding.weight") {
        model.embedding.load(ids, weight)?;
    } else if speaker_count != 0 {
        return Err(KwsError::Checkpoint(format!(
            "{path:?}: {speaker_count} speakers but no embedding.weight blob"
        )));
    }

    let mut missing: Vec<String> = Vec::new();
    let mut fill_err: Option<KwsError> = None;
    model.visit_params_mut(&mut |name, p| {
        if name == "embedding.weight" {
            return; // already loaded with the speaker map
        }
        match params.remove(name) {
            Some(t) if t.shape() == p.value.shape() => p.value = t,
            Some(t) => {
                fill_err = Some(KwsError::Checkpoint(format!(
                    "{path:?}: blob `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )))
            }
            None => missing.push(name.to_string()),
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(KwsError::Checkpoint(format!(
            "{path:?}: missing parameter blobs: {missing:?}"
        )));
    }
    let mut state_err: Option<KwsError> = None;
    model.visit_state_mut(&mut |name, t| {
        match state.remove(name) {
            Some(s) if s.shape() == t.shape() => *t = s,
            Some(s) => {
                state_err = Some(KwsError::Checkpoint(format!(
                    "{path:?}: state blob `{name}` has shape {:?}, expected {:?}",
                    s.shape(),
                    t.shape()
                )))
            }
            None => {
                state_err = Some(KwsError::Checkpoint(format!(
                    "{path:?}: missing state blob `{name}`"
                )))
            }
        };
    });
    if let Some(e) = state_err {
        return Err(e);
    }
    Ok(model)
}

/// Sum of parameter-blob element counts in a serialized checkpoint, without
/// constructing a model.
pub fn param_floats(path: &Path) -> Result<u64> {
    let bytes = fs::read(path).map_err(|_| KwsError::MissingArtifact(path.to_path_buf()))?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(KwsError::Checkpoint(format!("{path:?}: bad magic")));
    }
    let header_len = r.u32()? as usize;
    r.take(header_len)?;
    let blob_count = r.u32()? as usize;
    let mut total = 0u64;
    for _ in 0..blob_count {
        let kind = r.u8()?;
        let _name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut n = 1u64;
        for _ in 0..ndim {
            n *= r.u32()? as u64;
        }
        r.take(4 * n as usize)?;
        if kind == KIND_PARAM {
            total += n;
        }
    }
    Ok(total)
}
