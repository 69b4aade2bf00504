//! Multimodal retrieval engine for long financial filings.
//!
//! Text is split into semantically merged chunks, table and figure regions are
//! turned into structured records by a batched LLM extraction protocol, each
//! modality gets its own vector index, and queries go through a tiered
//! text-first decision with table/image fallback.

pub mod calibrate;
pub mod chunk;
pub mod config;
pub mod embed;
pub mod error;
pub mod evaluate;
pub mod extract;
pub mod gateway;
pub mod http;
pub mod ingest;
pub mod retrieve;
pub mod store;
pub mod synthetic;
pub mod types;
pub mod vindex;

pub use config::{BreakpointScope, EngineConfig, IndexKind};
pub use embed::{Embedder, EmbedderSpec, HashEmbedder};
pub use error::{ConfigError, Error, ErrorClass, Result};
pub use types::{ChunkId, EmbeddingVector, Modality};
