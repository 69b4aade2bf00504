//! Table and figure extraction.
//!
//! Regions come from a manifest (the stand-in for layout detection). They
//! are grouped into batches of `B`, sent as one multimodal prompt per batch,
//! and every id the reply fails to cover is stubbed to disk and retried on
//! its own. Each region ends `Parsed` or `Failed`.

pub mod prompt;
mod run;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embed::EmbedError;
use crate::gateway::GatewayError;
use crate::types::{ChunkId, EmbeddingVector};

pub use run::{extract_images, extract_tables, ExtractionReport, ImageExtraction, StubFile, TableExtractionRun};

/// Padding added around a detected region when the engine crops it itself.
pub const CROP_PADDING_POINTS: f64 = 8.0;

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("manifest references {} missing image(s): {}", .0.len(), .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingImages(Vec<PathBuf>),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Table,
    Figure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// Also the image filename stem.
    pub id: String,
    pub doc: String,
    /// 1-based.
    pub page: u32,
    pub kind: RegionKind,
    /// `(x0, y0, x1, y1)` in page points.
    pub bbox: [f64; 4],
    pub image_path: PathBuf,
}

impl Region {
    fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty region id".into());
        }
        if let Some(c) = self.id.chars().find(|c| matches!(c, '"' | '<' | '>' | '/' | '\\' | '\n' | '\r')) {
            return Err(format!("region id {:?} contains forbidden character {c:?}", self.id));
        }
        if self.id != self.id.trim() {
            return Err(format!("region id {:?} has surrounding whitespace", self.id));
        }
        if self.doc.trim().is_empty() || self.doc.contains('#') {
            return Err(format!("invalid document id {:?}", self.doc));
        }
        if self.page == 0 {
            return Err("page numbers are 1-based".into());
        }
        let [x0, y0, x1, y1] = self.bbox;
        if !(x0 < x1 && y0 < y1) {
            return Err(format!("bbox {:?} is not well-ordered", self.bbox));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RegionManifest {
    pub doc: Option<String>,
    /// Which detector produced the regions.
    pub provenance: String,
    pub regions: Vec<Region>,
}

impl RegionManifest {
    pub fn of_kind(&self, kind: RegionKind) -> Vec<Region> {
        self.regions.iter().filter(|r| r.kind == kind).cloned().collect()
    }
}

#[derive(Debug, Deserialize)]
struct ManifestHeader {
    #[serde(default)]
    doc: Option<String>,
    #[serde(default)]
    provenance: Option<String>,
}

/// Reads a JSONL manifest: an optional header object without an `id`
/// (`{"doc": ..., "provenance": ...}`) followed by one region per line.
/// Relative image paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<RegionManifest, ExtractError> {
    let text = std::fs::read_to_string(path).map_err(|source| ExtractError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let bad = |line: usize, message: String| ExtractError::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut manifest = RegionManifest {
        provenance: "manifest".into(),
        ..Default::default()
    };
    let mut first = true;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| bad(line_no, format!("malformed row: {e}")))?;
        let is_header = value.is_object() && value.get("id").is_none() && value.get("kind").is_none();
        if is_header {
            if !first {
                return Err(bad(line_no, "header must be the first row".into()));
            }
            let h: ManifestHeader =
                serde_json::from_value(value).map_err(|e| bad(line_no, format!("malformed header: {e}")))?;
            manifest.doc = h.doc;
            if let Some(p) = h.provenance {
                manifest.provenance = p;
            }
        } else {
            let mut region: Region =
                serde_json::from_value(value).map_err(|e| bad(line_no, format!("malformed region: {e}")))?;
            region.check().map_err(|m| bad(line_no, m))?;
            if region.image_path.is_relative() {
                region.image_path = base.join(&region.image_path);
            }
            manifest.regions.push(region);
        }
        first = false;
    }
    validate_manifest(&manifest).map_err(|(idx, m)| {
        // Report against the region's source line when the error names one.
        let line = idx.map_or(0, |k| nth_region_line(&text, k));
        match m {
            Ok(message) => bad(line, message),
            Err(missing) => ExtractError::MissingImages(missing),
        }
    })?;
    Ok(manifest)
}

fn nth_region_line(text: &str, k: usize) -> usize {
    text.lines()
        .enumerate()
        .filter(|(_, l)| l.contains("\"id\""))
        .nth(k)
        .map_or(0, |(i, _)| i + 1)
}

type ValidationFailure = (Option<usize>, Result<String, Vec<PathBuf>>);

/// Unique ids, well-formed fields, and every image present.
pub fn validate_manifest(m: &RegionManifest) -> Result<(), ValidationFailure> {
    let mut seen = HashSet::new();
    for (k, r) in m.regions.iter().enumerate() {
        r.check().map_err(|e| (Some(k), Ok(e)))?;
        if !seen.insert(r.id.as_str()) {
            return Err((Some(k), Ok(format!("duplicate region id {:?}", r.id))));
        }
    }
    let missing: Vec<PathBuf> = m
        .regions
        .iter()
        .filter(|r| !r.image_path.is_file())
        .map(|r| r.image_path.clone())
        .collect();
    if !missing.is_empty() {
        return Err((None, Err(missing)));
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct SidecarRow {
    image_path: PathBuf,
    page: u32,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
}

/// Fallback provider: every embedded image listed in a JSONL sidecar
/// (`{"image_path", "page", "bbox"?}`) becomes a figure region.
pub fn figures_from_sidecar(doc: &str, path: &Path) -> Result<RegionManifest, ExtractError> {
    let text = std::fs::read_to_string(path).map_err(|source| ExtractError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut regions = Vec::new();
    let mut per_page = std::collections::BTreeMap::<u32, usize>::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: SidecarRow = serde_json::from_str(line).map_err(|e| ExtractError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("malformed sidecar row: {e}"),
        })?;
        let n = per_page.entry(row.page).or_default();
        *n += 1;
        regions.push(Region {
            id: format!("{doc}-p{:03}-img{:02}", row.page, n),
            doc: doc.to_string(),
            page: row.page,
            kind: RegionKind::Figure,
            bbox: row.bbox.unwrap_or([0.0, 0.0, 612.0, 792.0]),
            image_path: if row.image_path.is_relative() {
                base.join(row.image_path)
            } else {
                row.image_path
            },
        });
    }
    let manifest = RegionManifest {
        doc: Some(doc.to_string()),
        provenance: "sidecar-embedded-images".into(),
        regions,
    };
    validate_manifest(&manifest).map_err(|(k, m)| match m {
        Ok(message) => ExtractError::Manifest {
            path: path.to_path_buf(),
            line: k.map_or(0, |k| k + 1),
            message,
        },
        Err(missing) => ExtractError::MissingImages(missing),
    })?;
    Ok(manifest)
}

/// `bbox` grown by `pad` on every side, clamped to the page.
pub fn padded_bbox(bbox: [f64; 4], pad: f64, page_width: f64, page_height: f64) -> [f64; 4] {
    [
        (bbox[0] - pad).max(0.0),
        (bbox[1] - pad).max(0.0),
        (bbox[2] + pad).min(page_width),
        (bbox[3] + pad).min(page_height),
    ]
}

/// Splits `items` into `ceil(len / b)` consecutive batches of at most `b`.
pub fn partition_batches<T: Clone>(items: &[T], b: usize) -> Vec<Vec<T>> {
    assert!(b >= 1, "batch size must be positive");
    items.chunks(b).map(<[T]>::to_vec).collect()
}

/// Optional ground-truth sidecar for fixture images, read by the offline mock.
pub fn truth_path(image: &Path) -> PathBuf {
    image.with_extension("truth.json")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordStatus {
    Parsed,
    Stubbed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRecord {
    pub id: ChunkId,
    pub region_id: String,
    pub page: u32,
    pub summary: String,
    /// Canonical JSON rendition of the table.
    pub structured: Value,
    pub status: RecordStatus,
    pub attempts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    /// Embedding of `summary`; lives in the index, not the record store.
    #[serde(skip)]
    pub embedding: Option<EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ChunkId,
    pub region_id: String,
    pub page: u32,
    pub summary: String,
    pub status: RecordStatus,
    pub skipped_non_data: bool,
    pub attempts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(skip)]
    pub embedding: Option<EmbeddingVector>,
}

impl ImageRecord {
    /// Parsed data figures are the only ones that reach the index.
    pub fn indexable(&self) -> bool {
        self.status == RecordStatus::Parsed && !self.skipped_non_data
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_manifest(dir: &Path, rows: &[String]) -> PathBuf {
        let p = dir.join("regions.jsonl");
        std::fs::write(&p, rows.join("\n")).unwrap();
        p
    }

    fn row(id: &str, kind: &str, image: &str) -> String {
        format!(r#"{{"id":"{id}","doc":"ms10k","page":3,"kind":"{kind}","bbox":[10,20,300,400],"image_path":"{image}"}}"#)
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(&write_manifest(dir.path(), &[])).unwrap();
        assert!(m.regions.is_empty());
    }

    #[test]
    fn header_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("t1.png"), b"x").unwrap();
        let p = write_manifest(
            dir.path(),
            &[r#"{"doc":"ms10k","provenance":"tablebank-detector"}"#.into(), row("t1", "table", "t1.png")],
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.provenance, "tablebank-detector");
        assert_eq!(m.regions[0].image_path, dir.path().join("t1.png"));
        assert_eq!(m.of_kind(RegionKind::Table).len(), 1);
    }

    #[test]
    fn every_missing_image_is_listed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("ok.png"), b"x").unwrap();
        let p = write_manifest(
            dir.path(),
            &[row("a", "table", "gone1.png"), row("ok", "figure", "ok.png"), row("b", "figure", "gone2.png")],
        );
        match load_manifest(&p).unwrap_err() {
            ExtractError::MissingImages(v) => {
                assert_eq!(v.len(), 2);
                let msg = ExtractError::MissingImages(v).to_string();
                assert!(msg.contains("gone1.png") && msg.contains("gone2.png"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("t1.png"), b"x").unwrap();
        let p = write_manifest(dir.path(), &[row("t1", "table", "t1.png"), "".into(), "{oops".into()]);
        match load_manifest(&p).unwrap_err() {
            ExtractError::Manifest { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_bbox_and_duplicates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("t.png"), b"x").unwrap();
        let inverted = row("t", "table", "t.png").replace("[10,20,300,400]", "[300,20,10,400]");
        assert!(load_manifest(&write_manifest(dir.path(), &[inverted])).is_err());
        let dup = [row("t", "table", "t.png"), row("t", "figure", "t.png")];
        match load_manifest(&write_manifest(dir.path(), &dup)).unwrap_err() {
            ExtractError::Manifest { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("duplicate"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn filing_scale_batch_counts() {
        let tables: Vec<u32> = (0..275).collect();
        let figures: Vec<u32> = (0..200).collect();
        assert_eq!(partition_batches(&tables, 5).len(), 55);
        assert_eq!(partition_batches(&figures, 5).len(), 40);
    }

    #[test]
    fn small_partitions() {
        let v: Vec<u32> = (0..10).collect();
        let sizes: Vec<usize> = partition_batches(&v, 4).iter().map(Vec::len).collect();
        assert_eq!(sizes, [4, 4, 2]);
        assert!(partition_batches::<u32>(&[], 3).is_empty());
        assert_eq!(partition_batches(&v[..5], 5).len(), 1);
    }

    #[test]
    fn sidecar_regions() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"x").unwrap();
        std::fs::write(dir.path().join("b.png"), b"x").unwrap();
        let side = dir.path().join("images.jsonl");
        std::fs::write(&side, "{\"image_path\":\"a.png\",\"page\":2}\n{\"image_path\":\"b.png\",\"page\":2}\n").unwrap();
        let m = figures_from_sidecar("doc", &side).unwrap();
        let ids: Vec<&str> = m.regions.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["doc-p002-img01", "doc-p002-img02"]);
        assert!(m.regions.iter().all(|r| r.kind == RegionKind::Figure));
    }

    #[test]
    fn padding_clamps_to_page() {
        assert_eq!(padded_bbox([4.0, 10.0, 100.0, 790.0], 8.0, 612.0, 792.0), [0.0, 2.0, 108.0, 792.0]);
    }

    proptest! {
        #[test]
        fn batch_count_is_ceiling(n in 0usize..400, b in 1usize..40) {
            let v: Vec<usize> = (0..n).collect();
            let batches = partition_batches(&v, b);
            prop_assert_eq!(batches.len(), n.div_ceil(b));
            prop_assert!(batches.iter().all(|x| !x.is_empty() && x.len() <= b));
            prop_assert!(batches.iter().rev().skip(1).all(|x| x.len() == b));
            prop_assert_eq!(batches.concat(), v);
        }
    }
}
