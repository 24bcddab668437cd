//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        4 bytes  "VDCK"
//! version      u32
//! config_len   u32, then config_len bytes of UTF-8 JSON
//! tensor_count u32
//! per tensor:  name_len u32, name bytes, rank u32, rank × u64 dims,
//!              product(dims) × f32 data
//! ```
//!
//! The JSON config block holds the model config, the vocabulary tokens
//! (without the reserved ones), the cleaning rules used at training time and
//! optionally the metrics of the last evaluation.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CleaningRules;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

pub const MAGIC: [u8; 4] = *b"VDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConfigBlock {
    model: ModelConfig,
    vocabulary: Vec<String>,
    cleaning: CleaningRules,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    evaluation: Option<MetricsReport>,
}

/// Everything needed to serve a trained model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub cleaning: CleaningRules,
    pub evaluation: Option<MetricsReport>,
}

impl Checkpoint {
    pub fn new(model: Model, vocab: Vocabulary) -> Self {
        Checkpoint {
            model,
            vocab,
            cleaning: CleaningRules::default(),
            evaluation: None,
        }
    }

    fn config_block(&self) -> ConfigBlock {
        ConfigBlock {
            model: self.model.config().clone(),
            vocabulary: self.vocab.tokens().to_vec(),
            cleaning: self.cleaning.clone(),
            evaluation: self.evaluation.clone(),
        }
    }

    /// Hex SHA-256 of the model config, vocabulary and cleaning rules.
    pub fn config_digest(&self) -> String {
        let block = ConfigBlock {
            evaluation: None,
            ..self.config_block()
        };
        let json = serde_json::to_vec(&block).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config_block()).expect("config serializes");
        let params = self.model.params();
        let payload: usize = params.iter().map(|p| p.tensor.len() * 4 + p.name.len() + 8 * p.tensor.rank() + 8).sum();
        let mut out = Vec::with_capacity(16 + config.len() + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in p.tensor.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let config_len = r.u32("config length")? as usize;
        let config: ConfigBlock = serde_json::from_slice(r.take(config_len, "config block")?)
            .map_err(|e| Error::CheckpointConfig(e.to_string()))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|e| Error::CheckpointConfig(format!("tensor name: {e}")))?
                .to_string();
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64("tensor dims")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or(Error::Truncated("tensor data"))?;
            let data = r
                .take(n, "tensor data")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::CheckpointConfig(format!(
                "{} trailing bytes after the tensor table",
                bytes.len() - r.pos
            )));
        }
        let vocab = Vocabulary::from_tokens(config.vocabulary)?;
        if vocab.len() != config.model.vocab_size {
            return Err(Error::CheckpointConfig(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                config.model.vocab_size
            )));
        }
        let model = Model::from_tensors(config.model, tensors)?;
        Ok(Checkpoint {
            model,
            vocab,
            cleaning: config.cleaning,
            evaluation: config.evaluation,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint(model: &Model, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(model.clone(), vocab.clone()).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, Vocabulary)> {
    let c = Checkpoint::load(path)?;
    Ok((c.model, c.vocab))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated(what))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkpoint() -> Checkpoint {
        let vocab = Vocabulary::from_tokens(["alibi", "home", "."]).unwrap();
        let config = ModelConfig {
            vocab_size: vocab.len(),
            max_len: 6,
            dim: 4,
            heads: 2,
            key_dim: 2,
            ff_dim: 4,
            head_hidden: 3,
            ..ModelConfig::custom()
        };
        Checkpoint::new(Model::build(config, 9).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = checkpoint();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.model.params(), c.model.params());
        assert_eq!(back.model.config(), c.model.config());
        assert_eq!(back.vocab, c.vocab);
        assert_eq!(back.cleaning, c.cleaning);
        assert_eq!(back.config_digest(), c.config_digest());
    }

    #[test]
    fn header_layout() {
        let bytes = checkpoint().to_bytes();
        assert_eq!(&bytes[..4], b"VDCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let config_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&bytes[12..12 + config_len]).unwrap();
        assert_eq!(json["model"]["variant"], "custom");
    }

    #[test]
    fn bad_magic() {
        let mut bytes = checkpoint().to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = checkpoint().to_bytes();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn truncation_detected_everywhere() {
        let bytes = checkpoint().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated("tensor data"))
        ));
        for cut in [0, 3, 6, 10, 20, bytes.len() / 2] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Truncated(_))), "cut {cut}");
        }
    }

    #[test]
    fn missing_tensor() {
        let c = checkpoint();
        // rebuild the file without the last tensor
        let keep: Vec<(String, Tensor)> = c.model.params()[..c.model.params().len() - 1]
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect();
        let full = c.to_bytes();
        let config_len = u32::from_le_bytes(full[8..12].try_into().unwrap()) as usize;
        let mut bytes = full[..12 + config_len].to_vec();
        bytes.extend_from_slice(&(keep.len() as u32).to_le_bytes());
        for (name, t) in &keep {
            bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::MissingTensor(n)) if n == "head.output.bias"
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vdck");
        let c = checkpoint();
        save_checkpoint(&c.model, &c.vocab, &path).unwrap();
        let (model, vocab) = load_checkpoint(&path).unwrap();
        assert_eq!(model.params(), c.model.params());
        assert_eq!(vocab, c.vocab);
        assert!(matches!(load_checkpoint(dir.path().join("absent")), Err(Error::Io(_))));
    }
}
