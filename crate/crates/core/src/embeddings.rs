//! Pretrained token vectors in word2vec text format.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How tokens missing from the table are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UnkPolicy {
    #[default]
    Zeros,
    RandomNormal {
        sigma: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dimension: usize,
    vocab: HashMap<String, Vec<f64>>,
    pub unk_policy: UnkPolicy,
}

impl EmbeddingTable {
    pub fn new(dimension: usize) -> Self {
        EmbeddingTable {
            dimension,
            vocab: HashMap::new(),
            unk_policy: UnkPolicy::Zeros,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dimension {
            return Err(Error::DimensionMismatch(format!(
                "vector of length {} in a {}-d table",
                vector.len(),
                self.dimension
            )));
        }
        self.vocab.entry(token.into()).or_insert(vector);
        Ok(())
    }

    /// Case-sensitive lookup with a lowercase fallback.
    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vocab
            .get(token)
            .or_else(|| self.vocab.get(&token.to_lowercase()))
            .map(Vec::as_slice)
    }

    /// The stored vector, or a fresh one drawn from the unknown-token policy.
    pub fn lookup<R: Rng + ?Sized>(&self, token: &str, rng: &mut R) -> Vec<f64> {
        match self.get(token) {
            Some(v) => v.to_vec(),
            None => self.unk_vector(rng),
        }
    }

    pub fn unk_vector<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.unk_policy {
            UnkPolicy::Zeros => vec![0.0; self.dimension],
            UnkPolicy::RandomNormal { sigma } => {
                let normal = Normal::new(0.0, sigma).expect("sigma must be finite and >= 0");
                (0..self.dimension).map(|_| normal.sample(rng)).collect()
            }
        }
    }
}

/// Parses `token f1 .. fd` lines. A leading `count dim` header is skipped.
/// Duplicate tokens keep their first vector.
pub fn load_embeddings(text: &str, expected_dim: usize) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new(expected_dim);
    for (idx, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if idx == 0 && is_header(token, &values, expected_dim) {
            continue;
        }
        if values.len() != expected_dim {
            return Err(Error::DimensionMismatch(format!(
                "line {}: `{token}` has {} values, expected {expected_dim}",
                idx + 1,
                values.len()
            )));
        }
        let vector = values
            .iter()
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::UnparsableFloat {
                    line: idx + 1,
                    value: v.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        table.insert(token, vector)?;
    }
    Ok(table)
}

fn is_header(first: &str, rest: &[&str], dim: usize) -> bool {
    dim != 1 && rest.len() == 1 && first.parse::<usize>().is_ok() && rest[0].parse::<usize>().ok() == Some(dim)
}

/// Inverse of [`load_embeddings`] for a sorted token list.
pub fn write_embeddings<'a>(rows: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> String {
    let mut out = String::new();
    for (tok, vec) in rows {
        out.push_str(tok);
        for v in vec {
            out.push(' ');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    out
}
