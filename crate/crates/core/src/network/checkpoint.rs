//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `LAPSECKP`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header (classifier config,
//! training metadata and a tensor index), then every tensor as raw
//! little-endian `f64` values in index order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{ClassifierConfig, HybridClassifier, NetworkError, ParamSet};
use crate::dataset::EventClass;

pub const MAGIC: &[u8; 8] = b"LAPSECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub event: Option<EventClass>,
    #[serde(default)]
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ClassifierConfig,
    metadata: CheckpointMetadata,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &HybridClassifier,
    metadata: &CheckpointMetadata,
) -> Result<(), NetworkError> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0u64;
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset,
        });
        offset += t.len() as u64 * 8;
    }
    let header = Header {
        config: model.config().clone(),
        metadata: metadata.clone(),
        tensors,
    };
    let header =
        serde_json::to_vec(&header).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(20 + header.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in model.params.iter() {
        for &v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N], NetworkError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|_| NetworkError::Checkpoint("truncated file".into()))?;
    Ok(b)
}

/// Loads a checkpoint, rebuilding the classifier from the stored config.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(HybridClassifier, CheckpointMetadata), NetworkError> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    if &read_exact::<8>(&mut r)? != MAGIC {
        return Err(NetworkError::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != FORMAT_VERSION {
        return Err(NetworkError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    if header_len > r.len() {
        return Err(NetworkError::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&r[..header_len])
        .map_err(|e| NetworkError::Checkpoint(format!("bad header: {e}")))?;
    let data = &r[header_len..];
    let mut params = ParamSet::new();
    for entry in &header.tensors {
        if entry.dtype != "f64" {
            return Err(NetworkError::Checkpoint(format!(
                "{} has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 8;
        let raw = data
            .get(start..end)
            .ok_or_else(|| NetworkError::Checkpoint(format!("{} is truncated", entry.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
        params.insert(entry.name.clone(), t);
    }
    let model = HybridClassifier::from_parts(header.config, params)?;
    Ok((model, header.metadata))
}

/// Loads a checkpoint and refuses it unless its config equals `expected`.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &ClassifierConfig,
) -> Result<(HybridClassifier, CheckpointMetadata), NetworkError> {
    let (model, meta) = load_checkpoint(path)?;
    if model.config() != expected {
        let show = |c: &ClassifierConfig| serde_json::to_string(c).unwrap_or_default();
        return Err(NetworkError::ConfigMismatch(format!(
            "checkpoint has {}, expected {}",
            show(model.config()),
            show(expected)
        )));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{BackboneSpec, HeadKind};

    #[test]
    fn round_trip_is_lossless() {
        let cfg = ClassifierConfig::new(BackboneSpec::stub(16), HeadKind::BiLstm).unwrap();
        let model = HybridClassifier::new(cfg.clone(), 4).unwrap();
        let meta = CheckpointMetadata {
            epoch: 3,
            seed: 4,
            event: Some(EventClass::Bleeding),
            history: vec![EpochRecord {
                epoch: 0,
                train_loss: 0.1 + 0.2,
                train_acc: 1.0 / 3.0,
                val_loss: 0.7,
                val_acc: 0.5,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, &meta).unwrap();
        let (loaded, m2) = load_checkpoint_expecting(&path, &cfg).unwrap();
        assert_eq!(loaded.params, model.params);
        assert_eq!(m2, meta);
    }

    #[test]
    fn mismatched_config_and_garbage_are_rejected() {
        let cfg = ClassifierConfig::new(BackboneSpec::stub(16), HeadKind::Transformer).unwrap();
        let model = HybridClassifier::new(cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, &CheckpointMetadata::default()).unwrap();
        let other = ClassifierConfig::new(BackboneSpec::stub(16), HeadKind::Gru).unwrap();
        assert!(matches!(
            load_checkpoint_expecting(&path, &other),
            Err(NetworkError::ConfigMismatch(_))
        ));
        std::fs::write(&path, b"LAPSECKP\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(NetworkError::Checkpoint(_))
        ));
        std::fs::write(&path, b"hello").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(NetworkError::Checkpoint(_))
        ));
    }
}
