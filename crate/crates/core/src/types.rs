//! Shared domain types and similarity primitives.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::ConfigError;

/// Fixed-dimension, unit-norm embedding.
///
/// The only way to build one is through [`EmbeddingVector::normalize`], so every
/// value in circulation satisfies `|v| = 1` within single-precision rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// L2-normalizes `values`. Zero, empty or non-finite input is rejected.
    pub fn normalize(values: Vec<f32>) -> Result<Self, VectorError> {
        if values.is_empty() {
            return Err(VectorError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VectorError::NonFinite);
        }
        let norm = values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(VectorError::Zero);
        }
        Ok(Self(
            values
                .into_iter()
                .map(|v| (f64::from(v) / norm) as f32)
                .collect(),
        ))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum VectorError {
    #[error("cannot normalize an empty vector")]
    Empty,
    #[error("cannot normalize the zero vector")]
    Zero,
    #[error("vector contains NaN or infinite components")]
    NonFinite,
}

/// Plain dot product, the similarity used on pre-normalized stored vectors.
///
/// Eight independent accumulators keep the loop vectorizable.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let base = i * 8;
        for lane in 0..8 {
            acc[lane] += a[base + lane] * b[base + lane];
        }
    }
    let mut sum = acc.iter().sum::<f32>();
    for i in chunks * 8..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

/// Cosine similarity of two embeddings, accumulated in double precision.
///
/// Both inputs are already unit-norm, but the result is still divided by the
/// product of norms so that `1 - cosine_similarity(a, b)` is exactly the
/// breakpoint distance used by the chunker.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, ConfigError> {
    if a.dim() != b.dim() {
        return Err(ConfigError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Table,
    Image,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Table, Modality::Image];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Table => "table",
            Modality::Image => "image",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Modality::Text),
            "table" => Ok(Modality::Table),
            "image" => Ok(Modality::Image),
            other => Err(format!("unknown modality {other:?}")),
        }
    }
}

/// Identifier of a retrievable chunk: `(document, modality, sequence)`.
///
/// Renders as `doc#modality#seq` with a zero-padded sequence so that the
/// string form and the derived ordering agree.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChunkId {
    pub doc: String,
    pub modality: Modality,
    pub seq: u32,
}

impl ChunkId {
    pub fn new(doc: impl Into<String>, modality: Modality, seq: u32) -> Self {
        Self {
            doc: doc.into(),
            modality,
            seq,
        }
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}#{:06}", self.doc, self.modality, self.seq)
    }
}

impl FromStr for ChunkId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        // Split from the right: document ids may themselves contain '#'.
        let mut parts = s.rsplitn(3, '#');
        let (Some(seq), Some(modality), Some(doc)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(format!("malformed chunk id {s:?}"));
        };
        let seq = seq
            .parse::<u32>()
            .map_err(|_| format!("malformed sequence in chunk id {s:?}"))?;
        Ok(ChunkId::new(doc, modality.parse()?, seq))
    }
}

impl Serialize for ChunkId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ChunkId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Rough token count used for budgets: one token per four characters.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}
