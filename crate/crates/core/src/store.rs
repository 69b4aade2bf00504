//! Knowledge-base persistence.
//!
//! ```text
//! <root>/kb.json                 format version, config snapshot, documents, counts
//! <root>/chunks/text.jsonl       one record per line, append-only
//! <root>/chunks/tables.jsonl
//! <root>/chunks/images.jsonl
//! <root>/index/{text,table,image}.frix
//! <root>/stubs/                  extraction stub files
//! <root>/images/                 copies of region images
//! <root>/kb.lock                 present while a writer holds the KB
//! ```
//!
//! Writes go record line first, index second. Index files and `kb.json` are
//! only rewritten by [`KnowledgeBase::commit`], so a record line without an
//! index entry is an orphan from an interrupted build; opening drops it.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::chunk::TextChunk;
use crate::config::EngineConfig;
use crate::extract::{ImageRecord, TableRecord};
use crate::types::{ChunkId, EmbeddingVector, Modality};
use crate::vindex::{IndexEntry, IndexError, ModalityIndex};

pub const KB_FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "kb.json";
const LOCK_FILE: &str = "kb.lock";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("knowledge base at {root} is incomplete; missing: {}", .missing.join(", "))]
    Missing { root: PathBuf, missing: Vec<String> },
    #[error("{0} exists and is not empty")]
    NotEmpty(PathBuf),
    #[error("knowledge base format version {found} is not supported (expected {expected}); rebuild or upgrade it")]
    Version { found: u32, expected: u32 },
    #[error("knowledge base is locked by a writer ({0}); remove the lock file if no build is running")]
    Locked(PathBuf),
    #[error("knowledge base was opened read-only")]
    ReadOnly,
    #[error("configuration differs from the one the knowledge base was built with: {}", .0.join("; "))]
    ConfigDrift(Vec<String>),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("record {0} has no embedding")]
    MissingEmbedding(ChunkId),
    #[error("record {0} already stored")]
    Duplicate(ChunkId),
    #[error("record {id} has modality {actual}, store expects {expected}")]
    WrongModality {
        id: ChunkId,
        expected: Modality,
        actual: Modality,
    },
    #[error("knowledge base is dirty after a failed write; rebuild it")]
    Dirty,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Index(#[from] IndexError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Stored form of a text chunk; the embedding lives in the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: ChunkId,
    pub content: String,
    pub sentences: Vec<usize>,
    pub token_estimate: usize,
}

impl From<&TextChunk> for TextRecord {
    fn from(c: &TextChunk) -> Self {
        Self {
            id: c.id.clone(),
            content: c.content.clone(),
            sentences: c.sentences.clone(),
            token_estimate: c.token_estimate,
        }
    }
}

/// A record kind with its own JSONL store and index.
pub trait StoredRecord: Serialize + DeserializeOwned + Clone + 'static {
    const MODALITY: Modality;
    fn id(&self) -> &ChunkId;
}

impl StoredRecord for TextRecord {
    const MODALITY: Modality = Modality::Text;
    fn id(&self) -> &ChunkId {
        &self.id
    }
}

impl StoredRecord for TableRecord {
    const MODALITY: Modality = Modality::Table;
    fn id(&self) -> &ChunkId {
        &self.id
    }
}

impl StoredRecord for ImageRecord {
    const MODALITY: Modality = Modality::Image;
    fn id(&self) -> &ChunkId {
        &self.id
    }
}

/// Sorted keys, no insignificant whitespace.
pub fn canonical_json(value: &Value) -> String {
    serde_json::to_string(&canonicalize(value.clone())).expect("json value serializes")
}

/// Rebuilds every object with keys in sorted order.
pub fn canonicalize(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, canonicalize(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub text: usize,
    pub table: usize,
    pub image: usize,
}

impl Counts {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Table => self.table,
            Modality::Image => self.image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbManifest {
    pub format_version: u32,
    pub config: EngineConfig,
    pub documents: Vec<String>,
    pub counts: Counts,
}

/// Records of one modality in insertion order.
#[derive(Debug, Clone)]
pub struct RecordStore<R> {
    records: Vec<R>,
    by_id: HashMap<ChunkId, usize>,
}

impl<R: StoredRecord> RecordStore<R> {
    fn new() -> Self {
        Self {
            records: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    fn push(&mut self, r: R) {
        self.by_id.insert(r.id().clone(), self.records.len());
        self.records.push(r);
    }

    pub fn get(&self, id: &ChunkId) -> Option<&R> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn all(&self) -> &[R] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn read_jsonl<R: StoredRecord>(path: &Path) -> Result<Vec<R>, StoreError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let lines: Vec<&str> = text.split('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<R>(line) {
            Ok(r) => out.push(r),
            // A torn final line is what an interrupted append leaves behind.
            Err(_) if i + 1 == lines.len() => {
                log::warn!("{}: ignoring torn final line", path.display());
            }
            Err(e) => {
                return Err(StoreError::Corrupt {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

struct Lock(PathBuf);

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn acquire_lock(root: &Path) -> Result<Lock, StoreError> {
    let path = root.join(LOCK_FILE);
    match OpenOptions::new().write(true).create_new(true).open(&path) {
        Ok(mut f) => {
            let _ = writeln!(f, "{}", std::process::id());
            Ok(Lock(path))
        }
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(StoreError::Locked(path)),
        Err(e) => Err(io_err(&path)(e)),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// One modality's record store, index and append handle.
struct Side<R> {
    store: RecordStore<R>,
    index: ModalityIndex,
    writer: Option<BufWriter<File>>,
    orphans: Vec<ChunkId>,
}

impl<R: StoredRecord> Side<R> {
    fn empty(config: &EngineConfig) -> Self {
        Self {
            store: RecordStore::new(),
            index: ModalityIndex::from_config(config),
            writer: None,
            orphans: Vec::new(),
        }
    }
}

/// An open knowledge base, read-only or holding the writer lock.
pub struct KnowledgeBase {
    root: PathBuf,
    manifest: KbManifest,
    text: Side<TextRecord>,
    tables: Side<TableRecord>,
    images: Side<ImageRecord>,
    lock: Option<Lock>,
    dirty: bool,
}

impl std::fmt::Debug for KnowledgeBase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KnowledgeBase")
            .field("root", &self.root)
            .field("counts", &self.counts())
            .field("writable", &self.lock.is_some())
            .finish()
    }
}

pub fn chunk_store_path(root: &Path, m: Modality) -> PathBuf {
    root.join("chunks").join(match m {
        Modality::Text => "text.jsonl",
        Modality::Table => "tables.jsonl",
        Modality::Image => "images.jsonl",
    })
}

pub fn index_path(root: &Path, m: Modality) -> PathBuf {
    root.join("index").join(format!("{}.frix", m.as_str()))
}

fn layout(root: &Path) -> Vec<PathBuf> {
    let mut v = vec![root.join(MANIFEST_FILE)];
    for m in Modality::ALL {
        v.push(chunk_store_path(root, m));
    }
    for m in Modality::ALL {
        v.push(index_path(root, m));
    }
    v.push(root.join("stubs"));
    v.push(root.join("images"));
    v
}

impl KnowledgeBase {
    /// Creates the layout under `root` (absent or empty) and returns a
    /// writable handle.
    pub fn init(root: &Path, config: &EngineConfig) -> Result<Self, StoreError> {
        if root.exists() {
            let mut entries = std::fs::read_dir(root).map_err(io_err(root))?;
            if entries.next().is_some() {
                return Err(StoreError::NotEmpty(root.to_path_buf()));
            }
        }
        for dir in ["chunks", "index", "stubs", "images"] {
            let d = root.join(dir);
            std::fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        let lock = acquire_lock(root)?;
        for m in Modality::ALL {
            let p = chunk_store_path(root, m);
            File::create(&p).map_err(io_err(&p))?;
        }
        let mut kb = Self {
            root: root.to_path_buf(),
            manifest: KbManifest {
                format_version: KB_FORMAT_VERSION,
                config: config.clone(),
                documents: Vec::new(),
                counts: Counts::default(),
            },
            text: Side::empty(config),
            tables: Side::empty(config),
            images: Side::empty(config),
            lock: Some(lock),
            dirty: false,
        };
        kb.open_writers()?;
        kb.commit()?;
        Ok(kb)
    }

    /// Opens a built KB read-only.
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        let lock_path = root.join(LOCK_FILE);
        if lock_path.exists() {
            return Err(StoreError::Locked(lock_path));
        }
        Self::load(root, None)
    }

    /// Opens read-only and rejects a build-time config that differs from `config`.
    pub fn open_checked(root: &Path, config: &EngineConfig) -> Result<Self, StoreError> {
        let kb = Self::open(root)?;
        let drift = kb.manifest.config.build_drift(config);
        if !drift.is_empty() {
            return Err(StoreError::ConfigDrift(drift));
        }
        Ok(kb)
    }

    /// Takes the writer lock, drops orphan lines from the stores, and
    /// returns a handle that can append.
    pub fn open_for_append(root: &Path) -> Result<Self, StoreError> {
        let lock = acquire_lock(root)?;
        let mut kb = Self::load(root, Some(lock))?;
        kb.rewrite_without_orphans()?;
        kb.open_writers()?;
        Ok(kb)
    }

    fn load(root: &Path, lock: Option<Lock>) -> Result<Self, StoreError> {
        let missing: Vec<String> = layout(root)
            .into_iter()
            .filter(|p| !p.exists())
            .map(|p| p.strip_prefix(root).unwrap_or(&p).display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(StoreError::Missing {
                root: root.to_path_buf(),
                missing,
            });
        }
        let mpath = root.join(MANIFEST_FILE);
        let raw: Value = serde_json::from_str(&std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?)
            .map_err(|e| StoreError::Corrupt {
                path: mpath.clone(),
                line: e.line(),
                message: e.to_string(),
            })?;
        let found = raw.get("format_version").and_then(Value::as_u64).unwrap_or(0) as u32;
        if found != KB_FORMAT_VERSION {
            return Err(StoreError::Version {
                found,
                expected: KB_FORMAT_VERSION,
            });
        }
        let manifest: KbManifest = serde_json::from_value(raw).map_err(|e| StoreError::Corrupt {
            path: mpath.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        let text = load_side::<TextRecord>(root)?;
        let tables = load_side::<TableRecord>(root)?;
        let images = load_side::<ImageRecord>(root)?;
        let kb = Self {
            root: root.to_path_buf(),
            manifest,
            text,
            tables,
            images,
            lock,
            dirty: false,
        };
        let counts = kb.counts();
        if counts != kb.manifest.counts {
            return Err(StoreError::Integrity(format!(
                "kb.json counts {:?} disagree with indexes {:?}",
                kb.manifest.counts, counts
            )));
        }
        Ok(kb)
    }

    fn open_writers(&mut self) -> Result<(), StoreError> {
        let open = |p: PathBuf| -> Result<BufWriter<File>, StoreError> {
            let f = OpenOptions::new().append(true).open(&p).map_err(io_err(&p))?;
            Ok(BufWriter::new(f))
        };
        self.text.writer = Some(open(chunk_store_path(&self.root, Modality::Text))?);
        self.tables.writer = Some(open(chunk_store_path(&self.root, Modality::Table))?);
        self.images.writer = Some(open(chunk_store_path(&self.root, Modality::Image))?);
        Ok(())
    }

    fn rewrite_without_orphans(&mut self) -> Result<(), StoreError> {
        fn rewrite<R: StoredRecord>(root: &Path, side: &mut Side<R>) -> Result<(), StoreError> {
            let path = chunk_store_path(root, R::MODALITY);
            let mut body = String::new();
            for r in side.store.all() {
                body.push_str(&serde_json::to_string(r).expect("record serializes"));
                body.push('\n');
            }
            write_atomic(&path, body.as_bytes())?;
            side.orphans.clear();
            Ok(())
        }
        let root = self.root.clone();
        rewrite(&root, &mut self.text)?;
        rewrite(&root, &mut self.tables)?;
        rewrite(&root, &mut self.images)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &KbManifest {
        &self.manifest
    }

    pub fn config(&self) -> &EngineConfig {
        &self.manifest.config
    }

    pub fn stub_dir(&self) -> PathBuf {
        self.root.join("stubs")
    }

    pub fn image_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn is_writable(&self) -> bool {
        self.lock.is_some()
    }

    pub fn counts(&self) -> Counts {
        Counts {
            text: self.text.index.len(),
            table: self.tables.index.len(),
            image: self.images.index.len(),
        }
    }

    /// Record lines dropped on open because no index entry backed them.
    pub fn orphans(&self) -> Vec<ChunkId> {
        let mut v = self.text.orphans.clone();
        v.extend(self.tables.orphans.iter().cloned());
        v.extend(self.images.orphans.iter().cloned());
        v
    }

    pub fn index(&self, m: Modality) -> &ModalityIndex {
        match m {
            Modality::Text => &self.text.index,
            Modality::Table => &self.tables.index,
            Modality::Image => &self.images.index,
        }
    }

    pub fn texts(&self) -> &RecordStore<TextRecord> {
        &self.text.store
    }

    pub fn tables(&self) -> &RecordStore<TableRecord> {
        &self.tables.store
    }

    pub fn images(&self) -> &RecordStore<ImageRecord> {
        &self.images.store
    }

    pub fn add_document(&mut self, doc: &str) {
        if !self.manifest.documents.iter().any(|d| d == doc) {
            self.manifest.documents.push(doc.to_string());
        }
    }

    pub fn append_text(&mut self, chunk: &TextChunk) -> Result<ChunkId, StoreError> {
        let rec = TextRecord::from(chunk);
        self.append(rec, Some(&chunk.embedding))
    }

    pub fn append_table(&mut self, rec: &TableRecord) -> Result<ChunkId, StoreError> {
        let mut rec = rec.clone();
        rec.structured = canonicalize(rec.structured);
        let emb = rec.embedding.take();
        self.append(rec, emb.as_ref())
    }

    pub fn append_image(&mut self, rec: &ImageRecord) -> Result<ChunkId, StoreError> {
        let mut rec = rec.clone();
        let emb = rec.embedding.take();
        self.append(rec, emb.as_ref())
    }

    fn append<R: StoredRecord>(&mut self, rec: R, embedding: Option<&EmbeddingVector>) -> Result<ChunkId, StoreError> {
        if self.lock.is_none() {
            return Err(StoreError::ReadOnly);
        }
        if self.dirty {
            return Err(StoreError::Dirty);
        }
        let id = rec.id().clone();
        if id.modality != R::MODALITY {
            return Err(StoreError::WrongModality {
                id,
                expected: R::MODALITY,
                actual: rec.id().modality,
            });
        }
        let vector = embedding.ok_or_else(|| StoreError::MissingEmbedding(id.clone()))?.clone();
        let line = serde_json::to_string(&rec).expect("record serializes");
        let root = self.root.clone();
        let result = {
            let side = self.side_mut::<R>();
            if side.store.get(&id).is_some() || side.index.contains(&id) {
                return Err(StoreError::Duplicate(id));
            }
            if vector.dim() != side.index.dim() {
                return Err(IndexError::Dimension {
                    expected: side.index.dim(),
                    actual: vector.dim(),
                }
                .into());
            }
            let path = chunk_store_path(&root, R::MODALITY);
            let w = side.writer.as_mut().expect("writable KB has writers");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(io_err(&path))
                .and_then(|_| {
                    side.index
                        .insert(IndexEntry {
                            id: id.clone(),
                            vector,
                        })
                        .map_err(StoreError::from)
                })
                .map(|_| side.store.push(rec))
        };
        if result.is_err() {
            self.dirty = true;
        }
        result.map(|_| id)
    }

    fn side_mut<R: StoredRecord>(&mut self) -> &mut Side<R> {
        let any: &mut dyn std::any::Any = match R::MODALITY {
            Modality::Text => &mut self.text,
            Modality::Table => &mut self.tables,
            Modality::Image => &mut self.images,
        };
        any.downcast_mut::<Side<R>>().expect("record type matches modality")
    }

    /// Persists indexes and `kb.json`. Until this runs, appended records are
    /// visible in this handle only.
    pub fn commit(&mut self) -> Result<(), StoreError> {
        if self.lock.is_none() {
            return Err(StoreError::ReadOnly);
        }
        if self.dirty {
            return Err(StoreError::Dirty);
        }
        for m in Modality::ALL {
            self.index(m).save(&index_path(&self.root, m))?;
        }
        self.manifest.counts = self.counts();
        let body = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.root.join(MANIFEST_FILE), (body + "\n").as_bytes())
    }
}

fn load_side<R: StoredRecord>(root: &Path) -> Result<Side<R>, StoreError> {
    let index = ModalityIndex::load(&index_path(root, R::MODALITY))?;
    let path = chunk_store_path(root, R::MODALITY);
    let mut store = RecordStore::new();
    let mut orphans = Vec::new();
    for r in read_jsonl::<R>(&path)? {
        let id = r.id().clone();
        if !index.contains(&id) {
            orphans.push(id);
        } else if store.get(&id).is_some() {
            return Err(StoreError::Integrity(format!("record {id} stored twice in {}", path.display())));
        } else {
            store.push(r);
        }
    }
    if !orphans.is_empty() {
        log::warn!("{}: dropping {} orphan record(s)", path.display(), orphans.len());
    }
    if let Some(id) = index.ids().iter().find(|id| store.get(id).is_none()) {
        return Err(StoreError::Integrity(format!(
            "index entry {id} has no record in {}",
            path.display()
        )));
    }
    Ok(Side {
        store,
        index,
        writer: None,
        orphans,
    })
}
