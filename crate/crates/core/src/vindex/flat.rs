use super::{hit_order, IndexEntry, IndexError, SearchHit, VectorStore};
use crate::types::dot;

/// Exhaustive index: exact answers, linear scan.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    pub(crate) store: VectorStore,
}

impl FlatIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            store: VectorStore::new(dim),
        }
    }

    pub(crate) fn insert(&mut self, entry: IndexEntry) -> Result<(), IndexError> {
        self.store.push(entry).map(|_| ())
    }

    fn scored(&self, query: &[f32]) -> impl Iterator<Item = (f32, u32)> + '_ {
        let q = query.to_vec();
        (0..self.store.len()).map(move |i| (dot(&q, self.store.vector(i)), i as u32))
    }

    pub(crate) fn search_topk(&self, query: &[f32], k: usize) -> Vec<SearchHit> {
        let mut hits = self.store.hits(self.scored(query));
        hits.truncate(k);
        hits
    }

    pub(crate) fn search_threshold(&self, query: &[f32], theta: f64, cap: usize) -> Vec<SearchHit> {
        let mut hits = self
            .store
            .hits(self.scored(query).filter(|&(s, _)| f64::from(s) >= theta));
        hits.sort_by(hit_order);
        hits.truncate(cap);
        hits
    }
}
