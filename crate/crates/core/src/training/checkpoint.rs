//! Versioned checkpoint container.
//!
//! Layout: 8 magic bytes `RTRVCKPT`, format version (u32 LE), header length
//! (u64 LE), a JSON header, then every tensor's f32 values little-endian,
//! concatenated in header order. The header holds both configs, the
//! vocabulary, the training step and seed, an FNV-1a hash of the payload
//! and a directory `{name, shape, offset}` with offsets in bytes from the
//! start of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{DecoderConfig, EncoderConfig, Model, Params};
use crate::numerics::Tensor;
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 8] = b"RTRVCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint (bad magic bytes)")]
    BadMagic { path: String },
    #[error("{path}: checkpoint format version {found}, this build reads version {expected}")]
    Version {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: corrupt checkpoint: {msg}")]
    Corrupt { path: String, msg: String },
    #[error("{path}: checkpoint is missing tensors: {names:?}")]
    Missing { path: String, names: Vec<String> },
    #[error("{path}: checkpoint has unknown tensors: {names:?}")]
    Unknown { path: String, names: Vec<String> },
}

/// Trained weights with everything needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: Vocabulary,
    pub step: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    decoder: DecoderConfig,
    vocab: Vec<String>,
    step: u64,
    seed: u64,
    payload_bytes: u64,
    payload_fnv1a: String,
    tensors: Vec<TensorEntry>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.model.params.num_scalars() * 4);
        let mut tensors = Vec::with_capacity(self.model.params.len());
        for (name, t) in self.model.params.iter() {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            encoder: self.model.encoder,
            decoder: self.model.decoder,
            vocab: self.vocab.tokens().to_vec(),
            step: self.step,
            seed: self.seed,
            payload_bytes: payload.len() as u64,
            payload_fnv1a: format!("{:016x}", fnv1a(&payload)),
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, CheckpointError> {
        let corrupt = |msg: String| CheckpointError::Corrupt {
            path: origin.to_string(),
            msg,
        };
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic {
                path: origin.to_string(),
            });
        }
        if bytes.len() < 20 {
            return Err(corrupt("truncated preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                path: origin.to_string(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt(format!("header of {header_len} bytes exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| corrupt(format!("header: {e}")))?;
        let payload = &bytes[header_end..];
        if payload.len() as u64 != header.payload_bytes {
            return Err(corrupt(format!(
                "payload is {} bytes, header says {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        if format!("{:016x}", fnv1a(payload)) != header.payload_fnv1a {
            return Err(corrupt("payload hash mismatch".into()));
        }
        let mut map = BTreeMap::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start
                .checked_add(n * 4)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| corrupt(format!("tensor {} runs past the payload", entry.name)))?;
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| corrupt(format!("tensor {}: {e}", entry.name)))?;
            if map.insert(entry.name.clone(), t).is_some() {
                return Err(corrupt(format!("tensor {} listed twice", entry.name)));
            }
        }
        let model = Model {
            encoder: header.encoder,
            decoder: header.decoder,
            params: Params::from_map(map),
        };
        if let Err((missing, unknown)) = model.check_layout() {
            if !unknown.is_empty() {
                return Err(CheckpointError::Unknown {
                    path: origin.to_string(),
                    names: unknown,
                });
            }
            return Err(CheckpointError::Missing {
                path: origin.to_string(),
                names: missing,
            });
        }
        let vocab = Vocabulary::from_tokens(header.vocab)
            .map_err(|e| corrupt(format!("vocabulary: {e}")))?;
        if vocab.len() != model.encoder.vocab_size {
            return Err(corrupt(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                model.encoder.vocab_size
            )));
        }
        Ok(Self {
            model,
            vocab,
            step: header.step,
            seed: header.seed,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let origin = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: origin.clone(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes, &origin)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoder::encode;
    use crate::tokenizer::build_vocab;

    fn sample() -> Checkpoint {
        let vocab = build_vocab(&["red blue shirt"], 40).unwrap();
        let v = vocab.len();
        let enc = EncoderConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 8,
            max_positions: 12,
            vocab_size: v,
            dropout_rate: 0.1,
        };
        let dec = DecoderConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            vocab_size: v,
            max_positions: 12,
        };
        Checkpoint {
            model: Model::init(enc, dec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap(),
            vocab,
            step: 17,
            seed: 4,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let toks = crate::tokenizer::tokenize("red shirt", &ck.vocab);
        assert_eq!(
            encode(&toks, &back.model).unwrap(),
            encode(&toks, &ck.model).unwrap()
        );
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn truncation_and_tampering_are_detected() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::from_bytes(cut, "x"),
            Err(CheckpointError::Corrupt { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..15], "x"),
            Err(CheckpointError::Corrupt { .. })
        ));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped, "x"),
            Err(CheckpointError::Corrupt { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"garbage", "x"),
            Err(CheckpointError::BadMagic { .. })
        ));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v2, "x"),
            Err(CheckpointError::Version { found: 2, .. })
        ));
    }

    #[test]
    fn strict_tensor_set() {
        let mut ck = sample();
        let mut map = ck.model.params.clone().into_map();
        map.insert("decoder.extra".into(), Tensor::zeros(&[2]));
        ck.model.params = Params::from_map(map.clone());
        match Checkpoint::from_bytes(&ck.to_bytes(), "x") {
            Err(CheckpointError::Unknown { names, .. }) => assert_eq!(names, vec!["decoder.extra"]),
            other => panic!("{other:?}"),
        }
        map.remove("decoder.extra");
        map.remove("decoder.out.b");
        ck.model.params = Params::from_map(map);
        match Checkpoint::from_bytes(&ck.to_bytes(), "x") {
            Err(CheckpointError::Missing { names, .. }) => assert_eq!(names, vec!["decoder.out.b"]),
            other => panic!("{other:?}"),
        }
    }
}
