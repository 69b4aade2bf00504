//! Hierarchical navigable small-world graph.
//!
//! Layer 0 holds every node with up to `2M` links; each higher layer holds a
//! geometrically thinning subset with up to `M` links. Search descends
//! greedily from the top entry point and runs a beam search of width `ef`
//! on layer 0. Node levels come from a seeded hash of the insertion ordinal,
//! so a given seed and insertion order always produce the same graph.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::sync::Mutex;

use super::{IndexEntry, IndexError, SearchHit, VectorStore};
use crate::config::EngineConfig;
use crate::embed::splitmix64;
use crate::types::dot;

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HnswParams {
    /// Max links per node on layers above 0 (layer 0 allows `2 * m`).
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 64,
            seed: EngineConfig::default().hnsw_seed,
        }
    }
}

impl HnswParams {
    pub fn from_config(c: &EngineConfig) -> Self {
        Self {
            m: c.hnsw_m,
            ef_construction: c.hnsw_ef_construction,
            ef_search: c.hnsw_ef_search,
            seed: c.hnsw_seed,
        }
    }

    /// Level multiplier `1 / ln(M)`.
    pub fn level_lambda(&self) -> f64 {
        1.0 / (self.m as f64).ln()
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }
}

/// Similarity-scored node; orders by similarity, then lower node id first.
#[derive(Debug, Clone, Copy)]
struct Scored {
    sim: f32,
    node: u32,
}

impl PartialEq for Scored {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Scored {}
impl PartialOrd for Scored {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scored {
    fn cmp(&self, o: &Self) -> Ordering {
        self.sim
            .total_cmp(&o.sim)
            .then_with(|| o.node.cmp(&self.node))
    }
}

/// Epoch-stamped visited set, reused across searches.
#[derive(Debug, Default)]
struct Visited {
    marks: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn reset(&mut self, n: usize) {
        if self.marks.len() < n {
            self.marks.resize(n, 0);
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
    }

    /// Marks `i`; returns false if it was already marked.
    #[inline]
    fn insert(&mut self, i: u32) -> bool {
        let m = &mut self.marks[i as usize];
        if *m == self.epoch {
            false
        } else {
            *m = self.epoch;
            true
        }
    }
}

#[derive(Debug)]
pub struct HnswIndex {
    pub(crate) params: HnswParams,
    pub(crate) store: VectorStore,
    /// `links[node][layer]`.
    pub(crate) links: Vec<Vec<Vec<u32>>>,
    pub(crate) entry: Option<u32>,
    pub(crate) max_level: usize,
    pool: Mutex<Vec<Visited>>,
}

impl HnswIndex {
    pub fn new(dim: usize, params: HnswParams) -> Self {
        Self::from_parts(params, VectorStore::new(dim), Vec::new(), None, 0)
    }

    pub(crate) fn from_parts(
        params: HnswParams,
        store: VectorStore,
        links: Vec<Vec<Vec<u32>>>,
        entry: Option<u32>,
        max_level: usize,
    ) -> Self {
        Self {
            params,
            store,
            links,
            entry,
            max_level,
            pool: Mutex::new(Vec::new()),
        }
    }

    pub fn params(&self) -> HnswParams {
        self.params
    }

    /// Level of the node inserted `ordinal`-th.
    pub fn level_for(&self, ordinal: usize) -> usize {
        let h = splitmix64(self.params.seed ^ splitmix64(ordinal as u64));
        // Uniform in (0, 1].
        let u = ((h >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
        ((-u.ln() * self.params.level_lambda()).floor() as usize).min(MAX_LEVEL)
    }

    #[inline]
    fn sim(&self, q: &[f32], node: u32) -> f32 {
        dot(q, self.store.vector(node as usize))
    }

    fn take_visited(&self) -> Visited {
        let mut v = self
            .pool
            .lock()
            .ok()
            .and_then(|mut p| p.pop())
            .unwrap_or_default();
        v.reset(self.store.len());
        v
    }

    fn give_visited(&self, v: Visited) {
        if let Ok(mut p) = self.pool.lock() {
            p.push(v);
        }
    }

    /// Greedy walk to a local optimum on `layer`.
    fn greedy(&self, q: &[f32], mut cur: Scored, layer: usize) -> Scored {
        loop {
            let mut moved = false;
            for &n in &self.links[cur.node as usize][layer] {
                let cand = Scored {
                    sim: self.sim(q, n),
                    node: n,
                };
                if cand > cur {
                    cur = cand;
                    moved = true;
                }
            }
            if !moved {
                return cur;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` nodes, best first.
    fn search_layer(
        &self,
        q: &[f32],
        entries: &[Scored],
        ef: usize,
        layer: usize,
        visited: &mut Visited,
    ) -> Vec<Scored> {
        let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        for &e in entries {
            if visited.insert(e.node) {
                candidates.push(e);
                results.push(Reverse(e));
                if results.len() > ef {
                    results.pop();
                }
            }
        }
        while let Some(c) = candidates.pop() {
            let worst = results.peek().map(|r| r.0);
            if let Some(w) = worst {
                if results.len() >= ef && c < w {
                    break;
                }
            }
            for &n in &self.links[c.node as usize][layer] {
                if !visited.insert(n) {
                    continue;
                }
                let s = Scored {
                    sim: self.sim(q, n),
                    node: n,
                };
                let admit = results.len() < ef || results.peek().is_some_and(|w| s > w.0);
                if admit {
                    candidates.push(s);
                    results.push(Reverse(s));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the
    /// base than to every neighbor kept so far. `candidates` is best first.
    fn select_neighbors(&self, candidates: &[Scored], limit: usize) -> Vec<u32> {
        let mut kept: Vec<Scored> = Vec::with_capacity(limit);
        for &c in candidates {
            if kept.len() >= limit {
                break;
            }
            let cv = self.store.vector(c.node as usize);
            let diverse = kept
                .iter()
                .all(|k| dot(cv, self.store.vector(k.node as usize)) < c.sim);
            if diverse {
                kept.push(c);
            }
        }
        kept.into_iter().map(|s| s.node).collect()
    }

    pub(crate) fn insert(&mut self, entry: IndexEntry) -> Result<(), IndexError> {
        let node = self.store.push(entry)?;
        let level = self.level_for(node as usize);
        self.links.push(vec![Vec::new(); level + 1]);

        let Some(ep) = self.entry else {
            self.entry = Some(node);
            self.max_level = level;
            return Ok(());
        };

        let q = self.store.vector(node as usize).to_vec();
        let mut cur = Scored {
            sim: self.sim(&q, ep),
            node: ep,
        };
        for layer in (level + 1..=self.max_level).rev() {
            cur = self.greedy(&q, cur, layer);
        }

        let mut visited = self.take_visited();
        let mut entries = vec![cur];
        for layer in (0..=level.min(self.max_level)).rev() {
            visited.reset(self.store.len());
            let found = self.search_layer(&q, &entries, self.params.ef_construction, layer, &mut visited);
            let neighbors = self.select_neighbors(&found, self.params.m);
            for &n in &neighbors {
                self.connect(n, node, layer);
            }
            self.links[node as usize][layer] = neighbors;
            entries = found;
        }
        self.give_visited(visited);

        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(node);
        }
        Ok(())
    }

    /// Adds `to` to `from`'s links on `layer`, pruning when over capacity.
    fn connect(&mut self, from: u32, to: u32, layer: usize) {
        let limit = self.params.max_links(layer);
        self.links[from as usize][layer].push(to);
        if self.links[from as usize][layer].len() <= limit {
            return;
        }
        let base = self.store.vector(from as usize);
        let mut scored: Vec<Scored> = self.links[from as usize][layer]
            .iter()
            .map(|&n| Scored {
                sim: dot(base, self.store.vector(n as usize)),
                node: n,
            })
            .collect();
        scored.sort_by(|a, b| b.cmp(a));
        let pruned = self.select_neighbors(&scored, limit);
        self.links[from as usize][layer] = pruned;
    }

    fn candidates(&self, q: &[f32], ef: usize) -> Vec<Scored> {
        let Some(ep) = self.entry else {
            return Vec::new();
        };
        let mut cur = Scored {
            sim: self.sim(q, ep),
            node: ep,
        };
        for layer in (1..=self.max_level).rev() {
            cur = self.greedy(q, cur, layer);
        }
        let mut visited = self.take_visited();
        let out = self.search_layer(q, &[cur], ef, 0, &mut visited);
        self.give_visited(visited);
        out
    }

    pub(crate) fn search_topk(&self, q: &[f32], k: usize) -> Vec<SearchHit> {
        let ef = self.params.ef_search.max(k);
        let mut hits = self
            .store
            .hits(self.candidates(q, ef).into_iter().map(|s| (s.sim, s.node)));
        hits.truncate(k);
        hits
    }

    pub(crate) fn search_threshold(&self, q: &[f32], theta: f64, cap: usize) -> Vec<SearchHit> {
        let ef = self.params.ef_search.max(cap);
        let mut hits = self.store.hits(
            self.candidates(q, ef)
                .into_iter()
                .filter(|s| f64::from(s.sim) >= theta)
                .map(|s| (s.sim, s.node)),
        );
        hits.truncate(cap);
        hits
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ChunkId, EmbeddingVector, Modality};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
        let v: Vec<f32> = (0..dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        EmbeddingVector::normalize(v).unwrap()
    }

    fn build(n: usize, dim: usize, seed: u64) -> HnswIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = HnswIndex::new(dim, HnswParams::default());
        for i in 0..n {
            h.insert(IndexEntry {
                id: ChunkId::new("d", Modality::Text, i as u32),
                vector: random_unit(&mut rng, dim),
            })
            .unwrap();
        }
        h
    }

    #[test]
    fn level_distribution_is_geometric() {
        let h = HnswIndex::new(4, HnswParams::default());
        let n = 20_000;
        let above0 = (0..n).filter(|&i| h.level_for(i) >= 1).count();
        // P(level >= 1) = 1/M = 1/16
        let frac = above0 as f64 / n as f64;
        assert!((frac - 1.0 / 16.0).abs() < 0.01, "{frac}");
    }

    #[test]
    fn link_capacity_respected() {
        let h = build(2000, 16, 7);
        for node in &h.links {
            for (layer, l) in node.iter().enumerate() {
                assert!(l.len() <= h.params.max_links(layer));
                let mut s = l.clone();
                s.sort_unstable();
                s.dedup();
                assert_eq!(s.len(), l.len(), "no duplicate links");
            }
        }
    }

    #[test]
    fn same_seed_same_graph() {
        let a = build(500, 8, 3);
        let b = build(500, 8, 3);
        assert_eq!(a.links, b.links);
        assert_eq!(a.entry, b.entry);
    }

    #[test]
    fn finds_exact_match() {
        let h = build(3000, 16, 11);
        for i in (0..3000).step_by(97) {
            let q = h.store.vector(i).to_vec();
            let hits = h.search_topk(&q, 1);
            assert_eq!(hits[0].id.seq, i as u32);
        }
    }
}
