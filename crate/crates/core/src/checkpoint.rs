//! Self-describing tensor container.
//!
//! Layout: the 8-byte magic `HGDACKPT`, a little-endian `u64` header length,
//! a JSON header (metadata plus tensor names, shapes and offsets), then all
//! tensor data as little-endian `f64`. Values round-trip bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classifier::ClassifierParams;
use crate::crf::CrfParams;
use crate::encoder::{CharParams, EncoderParams, LstmParams};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::params::ParamGroup;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"HGDACKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    metadata: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub metadata: Value,
    pub tensors: Vec<(String, Matrix)>,
}

fn incompatible(msg: impl Into<String>) -> Error {
    Error::IncompatibleCheckpoint(msg.into())
}

impl TensorFile {
    pub fn new(metadata: Value) -> Self {
        TensorFile {
            metadata,
            tensors: Vec::new(),
        }
    }

    /// Adds every tensor of `group` under `prefix.`.
    pub fn push_group<G: ParamGroup>(&mut self, prefix: &str, group: &G) {
        for (name, t) in group.tensors() {
            self.tensors.push((format!("{prefix}.{name}"), t.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn take(&self, name: &str) -> Result<Matrix> {
        self.get(name)
            .cloned()
            .ok_or_else(|| incompatible(format!("missing tensor `{name}`")))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: [t.rows(), t.cols()],
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors: entries,
        })
        .expect("header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(incompatible("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| incompatible("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| incompatible(format!("bad header: {e}")))?;
        let data = &bytes[16 + hlen..];
        if data.len() % 8 != 0 {
            return Err(incompatible("tensor data is not a whole number of f64 values"));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.shape[0] * e.shape[1];
            let slice = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| incompatible(format!("tensor `{}` runs past the data", e.name)))?;
            tensors.push((e.name, Matrix::from_vec(e.shape[0], e.shape[1], slice.to_vec())));
        }
        let expected: usize = tensors.iter().map(|(_, t)| t.len()).sum();
        if expected != values.len() {
            return Err(incompatible("trailing or missing tensor data"));
        }
        Ok(TensorFile {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn lstm(&self, prefix: &str) -> Result<LstmParams> {
        Ok(LstmParams {
            w_ih: self.take(&format!("{prefix}.w_ih"))?,
            w_hh: self.take(&format!("{prefix}.w_hh"))?,
            bias: self.take(&format!("{prefix}.bias"))?,
        })
    }

    /// Rebuilds model parameters stored with [`TensorFile::push_group`] under `prefix`.
    pub fn model(&self, prefix: &str) -> Result<ModelParams> {
        let th = format!("{prefix}.theta");
        let chars = if self.has_prefix(&format!("{th}.chars")) {
            Some(CharParams {
                embedding: self.take(&format!("{th}.chars.embedding"))?,
                lstm: self.lstm(&format!("{th}.chars.lstm"))?,
                cnn_weight: self.take(&format!("{th}.chars.cnn_weight"))?,
                cnn_bias: self.take(&format!("{th}.chars.cnn_bias"))?,
            })
        } else {
            None
        };
        let theta = EncoderParams::from_parts(
            self.take(&format!("{th}.embedding"))?,
            self.lstm(&format!("{th}.forward"))?,
            self.lstm(&format!("{th}.backward"))?,
            chars,
        )
        .map_err(|e| incompatible(e.to_string()))?;
        let ph = format!("{prefix}.phi");
        let phi = CrfParams::from_parts(
            self.take(&format!("{ph}.projection"))?,
            self.take(&format!("{ph}.transition"))?,
            self.take(&format!("{ph}.start"))?,
            self.take(&format!("{ph}.end"))?,
        )
        .map_err(|e| incompatible(e.to_string()))?;
        let om = format!("{prefix}.omega");
        let omega = if self.has_prefix(&om) {
            Some(
                ClassifierParams::from_parts(self.take(&format!("{om}.weight"))?, self.take(&format!("{om}.bias"))?)
                    .map_err(|e| incompatible(e.to_string()))?,
            )
        } else {
            None
        };
        let model = ModelParams { theta, phi, omega };
        model.check_dims().map_err(|e| incompatible(e.to_string()))?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::rng::RngKey;
    use crate::vocab::{CharVocab, TagVocab, Vocab, Vocabularies};

    fn model(chars: bool) -> ModelParams {
        let vocabs = Vocabularies {
            tokens: Vocab::build(["a", "b"]),
            chars: CharVocab::build(["a", "b"]),
            tags: TagVocab::from_types(["X"]),
        };
        let cfg = EncoderConfig {
            embedding_dim: 3,
            hidden_size: 4,
            char_features: chars,
            char_embedding_dim: 2,
            char_output_dim: 2,
        };
        ModelParams::init(&cfg, &vocabs, 2, None, &mut RngKey::new(5).stream()).unwrap()
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        for chars in [false, true] {
            let m = model(chars);
            let mut f = TensorFile::new(serde_json::json!({"seed": 3}));
            f.push_group("model", &m);
            let bytes = f.to_bytes();
            let back = TensorFile::from_bytes(&bytes).unwrap();
            assert_eq!(back.metadata["seed"], 3);
            let m2 = back.model("model").unwrap();
            assert!(m.bitwise_eq(&m2));
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn corrupted_input_is_incompatible() {
        let mut f = TensorFile::new(Value::Null);
        f.push_group("model", &model(false));
        let bytes = f.to_bytes();
        for bad in [&b"garbage"[..], &bytes[..bytes.len() - 3], &bytes[..20]] {
            assert!(matches!(
                TensorFile::from_bytes(bad),
                Err(Error::IncompatibleCheckpoint(_))
            ));
        }
        let mut flipped = bytes.clone();
        flipped[17] = b'!';
        assert!(TensorFile::from_bytes(&flipped).is_err());
        let partial = TensorFile::from_bytes(&bytes).unwrap();
        assert!(matches!(partial.model("other"), Err(Error::IncompatibleCheckpoint(_))));
    }
}
