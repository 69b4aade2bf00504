//! Per-modality vector indexes.
//!
//! Two implementations share one contract: [`FlatIndex`] scans every vector
//! and is exact, [`HnswIndex`] is a hierarchical navigable small-world graph.
//! All stored vectors are unit-norm, so similarity is a plain dot product.
//! Results are always sorted by similarity descending, then id ascending.

mod flat;
mod format;
mod hnsw;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

use crate::config::{EngineConfig, IndexKind};
use crate::types::{ChunkId, EmbeddingVector};

pub use flat::FlatIndex;
pub use hnsw::{HnswIndex, HnswParams};

/// Default result cap for thresholded search.
pub const DEFAULT_THRESHOLD_CAP: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("duplicate id {0}")]
    DuplicateId(ChunkId),
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("index file format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("unsupported index format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("index io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: ChunkId,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: ChunkId,
    pub similarity: f32,
}

/// Result order: similarity descending, then id ascending.
pub fn hit_order(a: &SearchHit, b: &SearchHit) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.id.cmp(&b.id))
}

pub fn is_sorted(hits: &[SearchHit]) -> bool {
    hits.windows(2).all(|w| hit_order(&w[0], &w[1]) != Ordering::Greater)
}

/// Ids and vectors shared by both index kinds.
#[derive(Debug, Clone, Default)]
pub(crate) struct VectorStore {
    pub(crate) dim: usize,
    pub(crate) ids: Vec<ChunkId>,
    pub(crate) data: Vec<f32>,
    pub(crate) lookup: HashMap<ChunkId, u32>,
}

impl VectorStore {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.ids.len()
    }

    #[inline]
    pub(crate) fn vector(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub(crate) fn check_dim(&self, actual: usize) -> Result<(), IndexError> {
        if actual != self.dim {
            return Err(IndexError::Dimension {
                expected: self.dim,
                actual,
            });
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, entry: IndexEntry) -> Result<u32, IndexError> {
        self.check_dim(entry.vector.dim())?;
        if self.lookup.contains_key(&entry.id) {
            return Err(IndexError::DuplicateId(entry.id));
        }
        let idx = self.ids.len() as u32;
        self.data.extend_from_slice(entry.vector.as_slice());
        self.lookup.insert(entry.id.clone(), idx);
        self.ids.push(entry.id);
        Ok(idx)
    }

    /// Turns (similarity, node) pairs into sorted hits.
    pub(crate) fn hits(&self, scored: impl IntoIterator<Item = (f32, u32)>) -> Vec<SearchHit> {
        let mut hits: Vec<SearchHit> = scored
            .into_iter()
            .map(|(s, i)| SearchHit {
                id: self.ids[i as usize].clone(),
                similarity: s,
            })
            .collect();
        hits.sort_by(hit_order);
        hits
    }
}

#[derive(Debug)]
pub(crate) enum Backend {
    Flat(FlatIndex),
    Hnsw(HnswIndex),
}

/// A searchable index for one modality.
///
/// Searching takes `&self` and may run from many threads; inserting takes
/// `&mut self`. A search counter is kept for observability.
#[derive(Debug)]
pub struct ModalityIndex {
    backend: Backend,
    searches: AtomicU64,
}

impl ModalityIndex {
    pub fn flat(dim: usize) -> Self {
        Self::wrap(Backend::Flat(FlatIndex::new(dim)))
    }

    pub fn hnsw(dim: usize, params: HnswParams) -> Self {
        Self::wrap(Backend::Hnsw(HnswIndex::new(dim, params)))
    }

    pub fn from_config(config: &EngineConfig) -> Self {
        match config.index_kind {
            IndexKind::Flat => Self::flat(config.embed_dim),
            IndexKind::Hnsw => Self::hnsw(config.embed_dim, HnswParams::from_config(config)),
        }
    }

    fn wrap(backend: Backend) -> Self {
        Self {
            backend,
            searches: AtomicU64::new(0),
        }
    }

    fn store(&self) -> &VectorStore {
        match &self.backend {
            Backend::Flat(f) => &f.store,
            Backend::Hnsw(h) => &h.store,
        }
    }

    pub fn kind(&self) -> IndexKind {
        match self.backend {
            Backend::Flat(_) => IndexKind::Flat,
            Backend::Hnsw(_) => IndexKind::Hnsw,
        }
    }

    pub fn dim(&self) -> usize {
        self.store().dim
    }

    pub fn len(&self) -> usize {
        self.store().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: &ChunkId) -> bool {
        self.store().lookup.contains_key(id)
    }

    pub fn ids(&self) -> &[ChunkId] {
        &self.store().ids
    }

    pub fn vector(&self, id: &ChunkId) -> Option<&[f32]> {
        let idx = *self.store().lookup.get(id)?;
        Some(self.store().vector(idx as usize))
    }

    /// Number of searches served since construction or load.
    pub fn search_count(&self) -> u64 {
        self.searches.load(AtomicOrdering::Relaxed)
    }

    pub fn insert(&mut self, entry: IndexEntry) -> Result<(), IndexError> {
        match &mut self.backend {
            Backend::Flat(f) => f.insert(entry),
            Backend::Hnsw(h) => h.insert(entry),
        }
    }

    /// The `k` most similar entries (exact for flat, approximate for HNSW).
    pub fn search_topk(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<SearchHit>, IndexError> {
        self.store().check_dim(query.dim())?;
        self.searches.fetch_add(1, AtomicOrdering::Relaxed);
        if k == 0 || self.is_empty() {
            return Ok(Vec::new());
        }
        Ok(match &self.backend {
            Backend::Flat(f) => f.search_topk(query.as_slice(), k),
            Backend::Hnsw(h) => h.search_topk(query.as_slice(), k),
        })
    }

    /// Entries with similarity `>= theta`, best first, at most `cap`.
    ///
    /// On HNSW this filters the `max(ef_search, cap)` best candidates, so
    /// qualifying entries outside that pool can be missed.
    pub fn search_threshold(
        &self,
        query: &EmbeddingVector,
        theta: f64,
        cap: usize,
    ) -> Result<Vec<SearchHit>, IndexError> {
        self.store().check_dim(query.dim())?;
        self.searches.fetch_add(1, AtomicOrdering::Relaxed);
        if cap == 0 || self.is_empty() {
            return Ok(Vec::new());
        }
        Ok(match &self.backend {
            Backend::Flat(f) => f.search_threshold(query.as_slice(), theta, cap),
            Backend::Hnsw(h) => h.search_threshold(query.as_slice(), theta, cap),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode(&self.backend)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        format::decode(bytes).map(Self::wrap)
    }

    /// Writes atomically through a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let io = |source| IndexError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("frix.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = std::fs::read(path).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Modality;

    pub(crate) fn unit(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::normalize(v.to_vec()).unwrap()
    }

    fn id(i: u32) -> ChunkId {
        ChunkId::new("d", Modality::Text, i)
    }

    fn both(dim: usize) -> [ModalityIndex; 2] {
        [
            ModalityIndex::flat(dim),
            ModalityIndex::hnsw(dim, HnswParams::default()),
        ]
    }

    #[test]
    fn empty_index_returns_nothing() {
        for idx in both(4) {
            let q = unit(&[1.0, 0.0, 0.0, 0.0]);
            assert!(idx.search_topk(&q, 5).unwrap().is_empty());
            assert!(idx.search_threshold(&q, -1.0, 5).unwrap().is_empty());
        }
    }

    #[test]
    fn self_retrieval_and_orthogonal_basis() {
        for mut idx in both(4) {
            for i in 0..3 {
                let mut v = [0.0f32; 4];
                v[i] = 1.0;
                idx.insert(IndexEntry { id: id(i as u32), vector: unit(&v) }).unwrap();
            }
            let hits = idx.search_topk(&unit(&[0.0, 1.0, 0.0, 0.0]), 1).unwrap();
            assert_eq!(hits.len(), 1);
            assert_eq!(hits[0].id, id(1));
            assert!((hits[0].similarity - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicate_id_and_dimension_errors() {
        for mut idx in both(2) {
            idx.insert(IndexEntry { id: id(0), vector: unit(&[1.0, 0.0]) }).unwrap();
            assert!(matches!(
                idx.insert(IndexEntry { id: id(0), vector: unit(&[0.0, 1.0]) }),
                Err(IndexError::DuplicateId(_))
            ));
            assert!(matches!(
                idx.insert(IndexEntry { id: id(1), vector: unit(&[0.0, 1.0, 0.0]) }),
                Err(IndexError::Dimension { expected: 2, actual: 3 })
            ));
            assert!(idx.search_topk(&unit(&[1.0, 0.0, 0.0]), 1).is_err());
            assert_eq!(idx.len(), 1);
        }
    }

    #[test]
    fn ties_sorted_by_id() {
        for mut idx in both(2) {
            for i in [3u32, 1, 2] {
                idx.insert(IndexEntry { id: id(i), vector: unit(&[1.0, 1.0]) }).unwrap();
            }
            let hits = idx.search_threshold(&unit(&[1.0, 1.0]), 0.5, 10).unwrap();
            assert_eq!(hits.iter().map(|h| h.id.seq).collect::<Vec<_>>(), [1, 2, 3]);
            assert!(is_sorted(&hits));
        }
    }

    #[test]
    fn search_counter_counts() {
        let idx = ModalityIndex::flat(2);
        let q = unit(&[1.0, 0.0]);
        idx.search_topk(&q, 1).unwrap();
        idx.search_threshold(&q, 0.0, 1).unwrap();
        assert_eq!(idx.search_count(), 2);
    }
}
