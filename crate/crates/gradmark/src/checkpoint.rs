//! Deterministic model checkpoint serialization.
//!
//! Layout: magic "GSCK", u32 format version, u64 header length, UTF-8 JSON
//! header (model config plus a tensor directory of name/shape/offset), raw
//! little-endian f64 tensor payloads at the listed offsets, and a trailing
//! CRC32 over everything before it. Key material never enters a checkpoint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSCK";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub final_train_accuracy: f64,
    pub final_val_accuracy: Option<f64>,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        TrainingMeta {
            epochs_run: 0,
            final_train_accuracy: 0.0,
            final_val_accuracy: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    metadata: TrainingMeta,
}

/// Serialize a model; `save -> load -> save` is byte-identical.
pub fn save_checkpoint(model: &Model, meta: &TrainingMeta, path: impl AsRef<Path>) -> Result<()> {
    let mut entries = Vec::with_capacity(model.params.len());
    let mut offset = 0u64;
    for p in &model.params {
        entries.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += (p.value.numel() * 8) as u64;
    }
    let header = Header {
        config: model.config.clone(),
        tensors: entries,
        metadata: meta.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut buf = Vec::with_capacity(24 + header_json.len() + offset as usize);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for p in &model.params {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load and validate a checkpoint: magic, version, CRC, and that the tensor
/// directory matches the parameter set implied by the stored config.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, TrainingMeta)> {
    let buf = std::fs::read(path)?;
    if buf.len() < 20 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    if &buf[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let body_len = buf.len() - 4;
    let crc_stored = u32::from_le_bytes(buf[body_len..].try_into().expect("4 bytes"));
    let crc_actual = crc32fast::hash(&buf[..body_len]);
    if crc_stored != crc_actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {crc_stored:#010x}, computed {crc_actual:#010x}"
        )));
    }
    let header_len = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body_len)
        .ok_or_else(|| Error::Checkpoint("header length out of bounds".into()))?;
    let header: Header = serde_json::from_slice(&buf[16..header_end])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    // Reference model gives the expected parameter specs for this config.
    let mut model = build_model(&header.config)?;
    if header.tensors.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "directory lists {} tensors, config implies {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    let payload = &buf[header_end..body_len];
    for (entry, param) in header.tensors.iter().zip(model.params.iter_mut()) {
        if entry.name != param.name || entry.shape != param.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match config parameter `{}` {:?}",
                entry.name,
                entry.shape,
                param.name,
                param.value.shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(n * 8)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` out of bounds", entry.name)))?;
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        param.value = Tensor::new(entry.shape.clone(), data)?;
    }
    Ok((model, header.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::nn::{predict, train, TrainConfig};

    fn trained_tiny() -> Model {
        let ds = make_synthetic(3, 20, (4, 4, 1), 5).unwrap();
        let model = build_model(&ModelConfig::mlp((4, 4, 1), 8, 3, 2)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 10,
            lambda: 0.0,
            seed: 1,
            ..TrainConfig::default()
        };
        train(&model, &ds, &cfg, None).unwrap().0
    }

    #[test]
    fn roundtrip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("m1.gsck");
        let p2 = dir.path().join("m2.gsck");
        let model = trained_tiny();
        let meta = TrainingMeta {
            epochs_run: 2,
            final_train_accuracy: 0.97,
            final_val_accuracy: Some(0.9),
        };
        save_checkpoint(&model, &meta, &p1).unwrap();
        let (loaded, meta2) = load_checkpoint(&p1).unwrap();
        assert_eq!(meta, meta2);
        for (a, b) in model.params.iter().zip(&loaded.params) {
            assert_eq!(a.value.data(), b.value.data());
            assert_eq!(a.name, b.name);
        }
        save_checkpoint(&loaded, &meta2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn predict_unchanged_after_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.gsck");
        let model = trained_tiny();
        save_checkpoint(&model, &TrainingMeta::default(), &p).unwrap();
        let (loaded, _) = load_checkpoint(&p).unwrap();
        let batch = make_synthetic(3, 4, (4, 4, 1), 9).unwrap().images;
        let a = predict(&model, &batch).unwrap();
        let b = predict(&loaded, &batch).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.gsck");
        let model = trained_tiny();
        save_checkpoint(&model, &TrainingMeta::default(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&p, bytes).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.gsck");
        let model = trained_tiny();
        save_checkpoint(&model, &TrainingMeta::default(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&p, bytes).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.gsck");
        let model = trained_tiny();
        save_checkpoint(&model, &TrainingMeta::default(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 99;
        // keep the CRC consistent so the version check is what fires
        let body = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body]);
        let crc_bytes = crc.to_le_bytes();
        bytes[body..].copy_from_slice(&crc_bytes);
        std::fs::write(&p, bytes).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
