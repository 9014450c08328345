//! Binary checkpoint and embedding-file codec.
//!
//! Layout: magic `CTM1`, u32 LE version, u32 tensor count; per tensor a
//! u32 name length + UTF-8 name, u32 rank, u32 dims, f32 LE data; then a
//! u32 length + UTF-8 JSON metadata blob. Checkpoints store the full
//! config plus the vocabulary; precomputed-embedding files share the
//! container with a smaller metadata record. Round trips are byte-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{PrecomputedEncoder, Vocab};
use crate::error::{CtmError, Result};
use crate::model::{CtmConfig, CtmModel};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CTM1";
pub const VERSION: u32 = 1;

/// JSON trailer of a model checkpoint: the config snapshot plus the
/// vocabulary needed to reproduce tokenization at load time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: CtmConfig,
    pub vocab: Vec<String>,
}

/// JSON trailer of a precomputed-embedding file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingsMeta {
    pub hidden_dim: usize,
}

fn encode_container(tensors: &[(String, &Tensor<f32>)], meta_json: &str) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta_json.as_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(CtmError::format(
                self.offset as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn decode_container(bytes: &[u8]) -> Result<(Vec<(String, Tensor<f32>)>, String)> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CtmError::format(0, format!("bad magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CtmError::format(
            4,
            format!("unsupported version {version} (expected {VERSION})"),
        ));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for t in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_bytes = r.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| CtmError::format(r.offset as u64, format!("tensor {t}: name not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(CtmError::format(
                r.offset as u64 - 4,
                format!("tensor {name:?}: implausible rank {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f32("tensor data")?);
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CtmError::format(r.offset as u64, format!("tensor {name:?}: {e}")))?;
        tensors.push((name, tensor));
    }
    let json_len = r.u32("metadata length")? as usize;
    let json_bytes = r.take(json_len, "metadata")?;
    let json = std::str::from_utf8(json_bytes)
        .map_err(|_| CtmError::format(r.offset as u64, "metadata not UTF-8".to_string()))?
        .to_string();
    if r.offset != bytes.len() {
        return Err(CtmError::format(
            r.offset as u64,
            format!("{} trailing bytes", bytes.len() - r.offset),
        ));
    }
    Ok((tensors, json))
}

/// Serialize a model checkpoint to bytes.
pub fn checkpoint_bytes(model: &CtmModel<f32>) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
    };
    let json = serde_json::to_string(&meta)?;
    let tensors: Vec<(String, &Tensor<f32>)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect();
    Ok(encode_container(&tensors, &json))
}

pub fn save_checkpoint(path: &Path, model: &CtmModel<f32>) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

/// Decode a checkpoint and reassemble the model, validating parameter
/// names and shapes against the stored config.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<CtmModel<f32>> {
    let (tensors, json) = decode_container(bytes)?;
    let meta: CheckpointMeta = serde_json::from_str(&json)?;
    meta.config.validate()?;
    let mut params = ParamSet::new();
    for (name, tensor) in tensors {
        params.push(name, tensor);
    }
    CtmModel::from_parts(meta.config, Vocab::from_tokens(meta.vocab), params)
}

pub fn load_checkpoint(path: &Path) -> Result<CtmModel<f32>> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

/// Write precomputed embeddings keyed by `instance/field`.
pub fn save_embeddings(path: &Path, store: &PrecomputedEncoder) -> Result<()> {
    let meta = EmbeddingsMeta {
        hidden_dim: store.hidden_dim(),
    };
    let json = serde_json::to_string(&meta)?;
    let tensors: Vec<(String, &Tensor<f32>)> = store
        .iter()
        .map(|(k, t)| (k.to_string(), t))
        .collect();
    fs::write(path, encode_container(&tensors, &json))?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<PrecomputedEncoder> {
    let bytes = fs::read(path)?;
    let (tensors, json) = decode_container(&bytes)?;
    let meta: EmbeddingsMeta = serde_json::from_str(&json)?;
    PrecomputedEncoder::from_records(tensors, meta.hidden_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::encoder::Vocab;

    fn tiny_model() -> CtmModel<f32> {
        let data = synth_dataset(&SynthSpec {
            questions: 3,
            options: 4,
            vocab_words: 40,
            seed: 2,
        })
        .unwrap();
        let docs: Vec<&[String]> = data.iter().map(|e| e.passage.as_slice()).collect();
        let config = CtmConfig {
            hidden_dim: 4,
            max_len: 16,
            stride: 8,
            vocab_cap: 64,
            ..CtmConfig::default()
        };
        let vocab = Vocab::build(docs, config.vocab_cap);
        CtmModel::new(config, vocab).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = tiny_model();
        let bytes1 = checkpoint_bytes(&model).unwrap();
        let loaded = checkpoint_from_bytes(&bytes1).unwrap();
        let bytes2 = checkpoint_bytes(&loaded).unwrap();
        assert_eq!(bytes1, bytes2);
        assert_eq!(model.params.digest(), loaded.params.digest());
        assert_eq!(model.config, loaded.config);
        assert_eq!(model.vocab.tokens(), loaded.vocab.tokens());
    }

    #[test]
    fn truncation_is_a_format_error_with_offset() {
        let model = tiny_model();
        let bytes = checkpoint_bytes(&model).unwrap();
        for cut in [0, 3, 7, 11, 40, bytes.len() - 1] {
            let err = checkpoint_from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, CtmError::Format { .. }),
                "cut {cut}: {err:?}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let model = tiny_model();
        let mut bytes = checkpoint_bytes(&model).unwrap();
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&wrong_magic),
            Err(CtmError::Format { offset: 0, .. })
        ));
        bytes[4] = 9; // version
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(CtmError::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn embeddings_round_trip_and_dim_check() {
        let mut store = PrecomputedEncoder::new(3);
        store
            .insert(
                "q1#w0",
                "p",
                Tensor::from_rows(&[vec![1.0f32, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap(),
            )
            .unwrap();
        store
            .insert("q1#w0", "a0", Tensor::from_rows(&[vec![0.5f32, 0.25, 0.125]]).unwrap())
            .unwrap();
        let dir = std::env::temp_dir().join("ctm_embed_roundtrip_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("emb.bin");
        save_embeddings(&path, &store).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.hidden_dim(), 3);
        assert_eq!(
            back.get("q1#w0", "p").unwrap().row(1),
            &[4.0f32, 5.0, 6.0]
        );
        fs::remove_dir_all(&dir).ok();
    }
}
