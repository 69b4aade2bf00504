//! `FRIX` binary index format, little-endian throughout.
//!
//! ```text
//! magic "FRIX" | version u16 | metric u8 | kind u8 | dim u32 | count u64
//! [hnsw] m u32 | ef_construction u32 | ef_search u32 | seed u64 | entry u32 | max_level u32
//! count x ( id_len u16 | id utf-8 | dim x f32 )
//! [hnsw] count x ( top_layer u8 | (top_layer + 1) x ( n u32 | n x u32 ) )
//! checksum u64   (seeded FNV-1a over every preceding byte)
//! ```

use std::collections::HashMap;

use super::{Backend, FlatIndex, HnswIndex, HnswParams, IndexError, VectorStore};
use crate::embed::seeded_hash;
use crate::types::ChunkId;

pub const MAGIC: &[u8; 4] = b"FRIX";
pub const VERSION: u16 = 1;
/// Dot product over unit vectors (cosine).
pub const METRIC_COSINE: u8 = 1;
const KIND_FLAT: u8 = 0;
const KIND_HNSW: u8 = 1;
const NO_ENTRY: u32 = u32::MAX;
const CHECKSUM_SEED: u64 = 0x4652_4958;

pub(crate) fn encode(backend: &Backend) -> Vec<u8> {
    let store = match backend {
        Backend::Flat(f) => &f.store,
        Backend::Hnsw(h) => &h.store,
    };
    let mut out = Vec::with_capacity(32 + store.data.len() * 4 + store.len() * 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(METRIC_COSINE);
    out.push(match backend {
        Backend::Flat(_) => KIND_FLAT,
        Backend::Hnsw(_) => KIND_HNSW,
    });
    out.extend_from_slice(&(store.dim as u32).to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    if let Backend::Hnsw(h) = backend {
        out.extend_from_slice(&(h.params.m as u32).to_le_bytes());
        out.extend_from_slice(&(h.params.ef_construction as u32).to_le_bytes());
        out.extend_from_slice(&(h.params.ef_search as u32).to_le_bytes());
        out.extend_from_slice(&h.params.seed.to_le_bytes());
        out.extend_from_slice(&h.entry.unwrap_or(NO_ENTRY).to_le_bytes());
        out.extend_from_slice(&(h.max_level as u32).to_le_bytes());
    }
    for (i, id) in store.ids.iter().enumerate() {
        let s = id.to_string();
        out.extend_from_slice(&(s.len() as u16).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
        for v in store.vector(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Backend::Hnsw(h) = backend {
        for layers in &h.links {
            out.push((layers.len() - 1) as u8);
            for l in layers {
                out.extend_from_slice(&(l.len() as u32).to_le_bytes());
                for n in l {
                    out.extend_from_slice(&n.to_le_bytes());
                }
            }
        }
    }
    let sum = seeded_hash(CHECKSUM_SEED, &out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> IndexError {
        IndexError::Format {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IndexError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated while reading {what} ({n} bytes needed, {} left)",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, IndexError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16, IndexError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Backend, IndexError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(IndexError::Format {
            offset: 0,
            message: "bad magic header (not a FRIX index)".into(),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(IndexError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let metric = r.u8("metric")?;
    if metric != METRIC_COSINE {
        return Err(r.err(format!("unknown metric id {metric}")));
    }
    let kind = r.u8("kind")?;
    if kind != KIND_FLAT && kind != KIND_HNSW {
        return Err(r.err(format!("unknown index kind {kind}")));
    }
    let dim = r.u32("dimension")? as usize;
    if dim == 0 {
        return Err(r.err("zero dimension"));
    }
    let count = r.u64("entry count")? as usize;
    // Each entry needs at least 2 + 4*dim bytes; reject absurd counts early.
    if count > bytes.len() / (2 + 4 * dim) + 1 {
        return Err(r.err(format!("truncated: entry count {count} exceeds file size")));
    }

    let hnsw_header = if kind == KIND_HNSW {
        let params = HnswParams {
            m: r.u32("m")? as usize,
            ef_construction: r.u32("ef_construction")? as usize,
            ef_search: r.u32("ef_search")? as usize,
            seed: r.u64("seed")?,
        };
        let entry = r.u32("entry point")?;
        let max_level = r.u32("max level")? as usize;
        Some((params, entry, max_level))
    } else {
        None
    };

    let mut store = VectorStore {
        dim,
        ids: Vec::with_capacity(count),
        data: Vec::with_capacity(count * dim),
        lookup: HashMap::with_capacity(count),
    };
    for i in 0..count {
        let len = r.u16("id length")? as usize;
        let at = r.pos;
        let raw = r.take(len, "id")?;
        let id: ChunkId = std::str::from_utf8(raw)
            .map_err(|_| IndexError::Format {
                offset: at,
                message: "id is not utf-8".into(),
            })?
            .parse()
            .map_err(|e: String| IndexError::Format { offset: at, message: e })?;
        let vec_bytes = r.take(4 * dim, "vector")?;
        store.data.extend(
            vec_bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
        if store.lookup.insert(id.clone(), i as u32).is_some() {
            return Err(IndexError::Format {
                offset: at,
                message: format!("duplicate id {id}"),
            });
        }
        store.ids.push(id);
    }

    let backend = match hnsw_header {
        None => Backend::Flat(FlatIndex { store }),
        Some((params, entry, max_level)) => {
            let mut links = Vec::with_capacity(count);
            for _ in 0..count {
                let top = r.u8("node level")? as usize;
                let mut layers = Vec::with_capacity(top + 1);
                for _ in 0..=top {
                    let n = r.u32("link count")? as usize;
                    let raw = r.take(4 * n, "links")?;
                    let l: Vec<u32> = raw
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    if l.iter().any(|&x| x as usize >= count) {
                        return Err(r.err("link points past the last node"));
                    }
                    layers.push(l);
                }
                links.push(layers);
            }
            let entry = (entry != NO_ENTRY).then_some(entry);
            if entry.is_some_and(|e| e as usize >= count) || (entry.is_none() && count > 0) {
                return Err(r.err("invalid entry point"));
            }
            Backend::Hnsw(HnswIndex::from_parts(params, store, links, entry, max_level))
        }
    };

    let body_end = r.pos;
    let sum = r.u64("checksum")?;
    if sum != seeded_hash(CHECKSUM_SEED, &bytes[..body_end]) {
        return Err(IndexError::Format {
            offset: body_end,
            message: "checksum mismatch".into(),
        });
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after checksum"));
    }
    Ok(backend)
}
