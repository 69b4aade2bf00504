//! End-to-end ingestion of one document into a knowledge base.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::chunk::chunk_document;
use crate::embed::Embedder;
use crate::error::Error;
use crate::extract::{
    extract_images, extract_tables, validate_manifest, ExtractError, ExtractionReport, RegionKind, RegionManifest,
};
use crate::gateway::Gateway;
use crate::store::{Counts, KnowledgeBase};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: &'static str,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestReport {
    pub doc: String,
    pub sentences: usize,
    pub blocks: usize,
    pub pre_merge_chunks: usize,
    pub text_chunks: usize,
    pub pre_merge_tokens: usize,
    pub merged_tokens: usize,
    pub reduction_ratio: f64,
    pub blocked_merges: usize,
    pub tables: Option<ExtractionReport>,
    pub figures: Option<ExtractionReport>,
    pub counts: Counts,
    pub timings: Vec<StageTiming>,
}

impl IngestReport {
    /// `(covered, total)` over both region kinds.
    pub fn coverage(&self) -> (usize, usize) {
        [&self.tables, &self.figures]
            .into_iter()
            .flatten()
            .fold((0, 0), |(c, t), r| (c + r.covered(), t + r.regions))
    }

    pub fn stubs_resolved(&self) -> usize {
        [&self.tables, &self.figures].into_iter().flatten().map(|r| r.stubs_resolved).sum()
    }

    pub fn stubs_written(&self) -> usize {
        [&self.tables, &self.figures].into_iter().flatten().map(|r| r.stubs_written).sum()
    }
}

pub fn check_doc_id(doc: &str) -> Result<(), Error> {
    if doc.trim().is_empty() || doc != doc.trim() || doc.contains(['#', '/', '\\']) {
        return Err(Error::Input(format!("invalid document id {doc:?}")));
    }
    Ok(())
}

fn copy_images(manifest: &RegionManifest, dir: &Path) -> Result<(), ExtractError> {
    std::fs::create_dir_all(dir).map_err(|source| ExtractError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for r in &manifest.regions {
        let ext = r.image_path.extension().and_then(|e| e.to_str()).unwrap_or("img");
        let dest = dir.join(format!("{}.{ext}", r.id));
        std::fs::copy(&r.image_path, &dest).map_err(|source| ExtractError::Io { path: dest, source })?;
    }
    Ok(())
}

/// Chunks `text`, extracts every region in `manifest`, and commits.
///
/// Text chunks are appended first, then parsed tables, then indexable
/// figures. Failed and non-data regions appear in the report only.
pub fn ingest(
    kb: &mut KnowledgeBase,
    doc: &str,
    text: &str,
    manifest: Option<&RegionManifest>,
    embedder: &dyn Embedder,
    gateway: &Gateway,
) -> Result<IngestReport, Error> {
    check_doc_id(doc)?;
    if kb.manifest().documents.iter().any(|d| d == doc) {
        return Err(Error::Input(format!("document {doc:?} is already in the knowledge base")));
    }
    if let Some(m) = manifest {
        validate_manifest(m).map_err(|(k, e)| match e {
            Ok(message) => ExtractError::Manifest {
                path: "<manifest>".into(),
                line: k.map_or(0, |k| k + 1),
                message,
            },
            Err(missing) => ExtractError::MissingImages(missing),
        })?;
        if let Some(r) = m.regions.iter().find(|r| r.doc != doc) {
            return Err(Error::Input(format!(
                "region {} belongs to document {:?}, not {doc:?}",
                r.id, r.doc
            )));
        }
    }
    let config = kb.config().clone();
    let mut timings = Vec::new();
    let mut stage = |name: &'static str, t: Instant| {
        timings.push(StageTiming {
            stage: name,
            seconds: t.elapsed().as_secs_f64(),
        })
    };

    let t = Instant::now();
    let chunked = chunk_document(doc, text, &config, embedder)?;
    stage("chunk", t);
    let t = Instant::now();
    for c in &chunked.chunks {
        kb.append_text(c)?;
    }
    stage("index_text", t);

    let (mut tables, mut figures) = (None, None);
    if let Some(m) = manifest {
        let stub_dir = kb.stub_dir();
        let t = Instant::now();
        let run = extract_tables(&m.of_kind(RegionKind::Table), &config, gateway, embedder, Some(&stub_dir))?;
        stage("extract_tables", t);
        let t = Instant::now();
        copy_images(m, &kb.image_dir())?;
        let figs = extract_images(&m.of_kind(RegionKind::Figure), &config, gateway, embedder, Some(&stub_dir))?;
        stage("extract_figures", t);
        let t = Instant::now();
        for r in run.records.iter().filter(|r| r.embedding.is_some()) {
            kb.append_table(r)?;
        }
        for r in figs.records.iter().filter(|r| r.indexable()) {
            kb.append_image(r)?;
        }
        stage("index_regions", t);
        tables = Some(run.report);
        figures = Some(figs.report);
    }

    let t = Instant::now();
    kb.add_document(doc);
    kb.commit()?;
    stage("commit", t);

    log::info!(
        "ingested {doc}: {} text chunks, reduction {:.3}",
        chunked.chunks.len(),
        chunked.reduction_ratio()
    );
    Ok(IngestReport {
        doc: doc.to_string(),
        sentences: chunked.sentences.len(),
        blocks: chunked.blocks,
        pre_merge_chunks: chunked.pre_merge_chunks,
        text_chunks: chunked.chunks.len(),
        pre_merge_tokens: chunked.pre_merge_tokens,
        merged_tokens: chunked.merged_tokens,
        reduction_ratio: chunked.reduction_ratio(),
        blocked_merges: chunked.blocked.len(),
        tables,
        figures,
        counts: kb.counts(),
        timings,
    })
}
