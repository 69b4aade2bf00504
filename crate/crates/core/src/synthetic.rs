//! Deterministic fixtures: planted vectors, redundant corpora, small
//! knowledge bases and a toy filing with regions and ground truth.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::calibrate::DevSample;
use crate::chunk::TextChunk;
use crate::config::EngineConfig;
use crate::embed::{EmbedError, Embedder, HashEmbedder};
use crate::extract::{ImageRecord, RecordStatus, TableRecord};
use crate::store::{KnowledgeBase, StoreError};
use crate::types::{estimate_tokens, ChunkId, EmbeddingVector, Modality};

/// One paragraph of near-identical sentences sharing `Topic{p}` vocabulary.
pub fn topic_paragraph(p: usize, sentences: usize) -> Vec<String> {
    (0..sentences)
        .map(|s| {
            let words: Vec<String> = (0..8).map(|w| format!("p{p}w{w}")).collect();
            format!("Topic{p} {} extra{p}s{s}.", words.join(" "))
        })
        .collect()
}

/// `k` four-sentence paragraphs under windows of 8 with overlap 4, so every
/// paragraph lands in two windows and the merge should fold them back to
/// `k` chunks (reduction `1 - k / (2k - 2)`).
pub fn redundant_corpus(k: usize) -> (String, EngineConfig) {
    let text: Vec<String> = (0..k).flat_map(|p| topic_paragraph(p, 4)).collect();
    let config = EngineConfig {
        window_size: 8,
        overlap: 4,
        embed_dim: 512,
        ..Default::default()
    };
    (text.join(" "), config)
}

/// Hands out orthonormal basis axes.
#[derive(Debug, Clone)]
pub struct Axes {
    dim: usize,
    next: usize,
}

impl Axes {
    pub fn new(dim: usize) -> Self {
        Self { dim, next: 0 }
    }

    pub fn fresh(&mut self) -> usize {
        assert!(self.next < self.dim, "ran out of axes in dimension {}", self.dim);
        self.next += 1;
        self.next - 1
    }

    pub fn unit(&self, axis: usize) -> EmbeddingVector {
        planted(self.dim, axis, axis, 1.0)
    }

    /// A vector with similarity `s` to `unit(query_axis)`.
    pub fn at(&mut self, query_axis: usize, s: f64) -> EmbeddingVector {
        let fresh = self.fresh();
        planted(self.dim, query_axis, fresh, s)
    }
}

/// `s` on `query_axis`, `sqrt(1 - s^2)` on `fresh_axis`.
pub fn planted(dim: usize, query_axis: usize, fresh_axis: usize, s: f64) -> EmbeddingVector {
    let mut v = vec![0.0f32; dim];
    v[query_axis] = s as f32;
    if fresh_axis != query_axis {
        v[fresh_axis] = (1.0 - s * s).max(0.0).sqrt() as f32;
    }
    EmbeddingVector::normalize(v).expect("planted vector is non-zero")
}

/// Exact text-to-vector table; unknown text goes to a hash embedder.
#[derive(Debug, Clone)]
pub struct PlantedEmbedder {
    table: HashMap<String, EmbeddingVector>,
    fallback: HashEmbedder,
}

impl PlantedEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            table: HashMap::new(),
            fallback: HashEmbedder::new(dim),
        }
    }

    pub fn plant(&mut self, text: impl Into<String>, v: EmbeddingVector) {
        self.table.insert(text.into(), v);
    }
}

impl Embedder for PlantedEmbedder {
    fn dimension(&self) -> usize {
        self.fallback.dimension()
    }

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        match self.table.get(text) {
            Some(v) => Ok(v.clone()),
            None => self.fallback.embed_one(text),
        }
    }
}

/// Appends records with caller-chosen vectors to a fresh KB.
pub struct KbBuilder {
    kb: KnowledgeBase,
    doc: String,
    seq: [u32; 3],
}

impl KbBuilder {
    pub fn new(root: &Path, config: &EngineConfig, doc: &str) -> Result<Self, StoreError> {
        Ok(Self {
            kb: KnowledgeBase::init(root, config)?,
            doc: doc.to_string(),
            seq: [0; 3],
        })
    }

    fn next(&mut self, m: Modality) -> ChunkId {
        let slot = &mut self.seq[m as usize];
        *slot += 1;
        ChunkId::new(self.doc.clone(), m, *slot - 1)
    }

    pub fn text(&mut self, content: &str, v: EmbeddingVector) -> Result<ChunkId, StoreError> {
        let id = self.next(Modality::Text);
        let n = id.seq as usize;
        self.kb.append_text(&TextChunk {
            id,
            content: content.to_string(),
            sentences: vec![n],
            embedding: v,
            token_estimate: estimate_tokens(content),
        })
    }

    pub fn table(&mut self, summary: &str, v: EmbeddingVector) -> Result<ChunkId, StoreError> {
        let id = self.next(Modality::Table);
        self.kb.append_table(&TableRecord {
            region_id: format!("{}-table-{}", self.doc, id.seq),
            id,
            page: 1,
            summary: summary.to_string(),
            structured: json!({ "rows": [] }),
            status: RecordStatus::Parsed,
            attempts: 1,
            failure: None,
            embedding: Some(v),
        })
    }

    pub fn image(&mut self, summary: &str, v: EmbeddingVector) -> Result<ChunkId, StoreError> {
        let id = self.next(Modality::Image);
        self.kb.append_image(&ImageRecord {
            region_id: format!("{}-figure-{}", self.doc, id.seq),
            id,
            page: 1,
            summary: summary.to_string(),
            status: RecordStatus::Parsed,
            skipped_non_data: false,
            attempts: 1,
            failure: None,
            embedding: Some(v),
        })
    }

    pub fn finish(mut self) -> Result<KnowledgeBase, StoreError> {
        let doc = self.doc.clone();
        self.kb.add_document(&doc);
        self.kb.commit()?;
        Ok(self.kb)
    }
}

/// A KB plus dev set whose scripted calibration optimum is
/// `(0.70, 0.65, 0.55)`.
///
/// Per group: a text question with 6 gold chunks at 0.72 and 2 distractors
/// at 0.67; a table question with gold at 0.67 and a distractor at 0.62; an
/// image question with gold at 0.57 and a distractor at 0.52. Every question
/// has its own axis, so groups never interfere.
pub fn calibration_fixture(
    root: &Path,
    groups: usize,
) -> Result<(KnowledgeBase, PlantedEmbedder, Vec<DevSample>, EngineConfig), StoreError> {
    let dim = 64.max(groups * 20 + 1);
    let config = EngineConfig {
        embed_dim: dim,
        index_kind: crate::config::IndexKind::Flat,
        ..Default::default()
    };
    let mut axes = Axes::new(dim);
    let mut emb = PlantedEmbedder::new(dim);
    let mut b = KbBuilder::new(root, &config, "cal")?;
    let mut dev = Vec::new();
    for g in 0..groups {
        let q = axes.fresh();
        let query = format!("text question {g}");
        emb.plant(&query, axes.unit(q));
        let mut gold_text = Vec::new();
        for i in 0..6 {
            gold_text.push(b.text(&format!("gold passage {g}.{i}"), axes.at(q, 0.72))?);
        }
        for i in 0..2 {
            b.text(&format!("near miss passage {g}.{i}"), axes.at(q, 0.67))?;
        }
        dev.push(DevSample {
            query,
            answer: String::new(),
            gold_text,
            gold_table: vec![],
            gold_image: vec![],
            unanswerable: false,
        });

        let q = axes.fresh();
        let query = format!("table question {g}");
        emb.plant(&query, axes.unit(q));
        let gold = b.table(&format!("gold table {g}"), axes.at(q, 0.67))?;
        b.table(&format!("near miss table {g}"), axes.at(q, 0.62))?;
        dev.push(DevSample {
            query,
            answer: String::new(),
            gold_text: vec![],
            gold_table: vec![gold],
            gold_image: vec![],
            unanswerable: false,
        });

        let q = axes.fresh();
        let query = format!("image question {g}");
        emb.plant(&query, axes.unit(q));
        let gold = b.image(&format!("gold figure {g}"), axes.at(q, 0.57))?;
        b.image(&format!("near miss figure {g}"), axes.at(q, 0.52))?;
        dev.push(DevSample {
            query,
            answer: String::new(),
            gold_text: vec![],
            gold_table: vec![],
            gold_image: vec![gold],
            unanswerable: false,
        });
    }
    let q = axes.fresh();
    emb.plant("unanswerable question", axes.unit(q));
    dev.push(DevSample {
        query: "unanswerable question".into(),
        answer: String::new(),
        gold_text: vec![],
        gold_table: vec![],
        gold_image: vec![],
        unanswerable: true,
    });
    Ok((b.finish()?, emb, dev, config))
}

/// Paths of a generated toy filing.
#[derive(Debug, Clone)]
pub struct FilingFixture {
    pub doc: String,
    pub text_path: PathBuf,
    pub manifest_path: PathBuf,
    pub config_path: PathBuf,
    /// Query that clears `theta_text` on at least 6 text chunks.
    pub text_question: String,
    /// Query with no text support that matches the table summaries.
    pub table_question: String,
}

/// Words shared by every liquidity sentence and the text question.
const LIQUIDITY: &str = "liquidity capital reserves funding cash covenant";

/// Writes a filing whose liquidity sentences pair into chunks that all sit
/// near the text question yet stay below the merge threshold with each other,
/// plus `tables` table regions and `figures` figure regions with truth
/// sidecars for the offline model.
pub fn write_filing(dir: &Path, doc: &str, tables: usize, figures: usize) -> std::io::Result<FilingFixture> {
    std::fs::create_dir_all(dir.join("regions"))?;
    let mut sentences = Vec::new();
    for i in 0..14 {
        let unique: Vec<String> = (0..4).map(|j| format!("n{i}k{j}")).collect();
        let mut words: Vec<&str> = LIQUIDITY.split(' ').collect();
        words[0] = "Liquidity";
        sentences.push(format!("{} {}.", words.join(" "), unique.join(" ")));
    }
    let text_path = dir.join(format!("{doc}.txt"));
    std::fs::write(&text_path, sentences.join(" ") + "\n")?;

    let mut rows = vec![json!({ "doc": doc, "provenance": "fixture" }).to_string()];
    for t in 0..tables {
        let id = format!("{doc}-p{:03}-tab{t:02}", t + 2);
        let image = dir.join("regions").join(format!("{id}.png"));
        std::fs::write(&image, format!("PNG table {t}"))?;
        let truth = json!({
            "summary": format!("Dividend payout ratio per share by quarter q{t}."),
            "table": { "columns": ["quarter", "payout"], "rows": [[format!("q{t}"), format!("{}.{t}", 30 + t)]] },
        });
        std::fs::write(crate::extract::truth_path(&image), truth.to_string())?;
        rows.push(
            json!({ "id": id, "doc": doc, "page": t + 2, "kind": "table", "bbox": [10.0, 10.0, 300.0, 200.0],
                    "image_path": format!("regions/{id}.png") })
            .to_string(),
        );
    }
    for f in 0..figures {
        let id = format!("{doc}-p{:03}-img{f:02}", f + 2);
        let image = dir.join("regions").join(format!("{id}.png"));
        std::fs::write(&image, format!("PNG figure {f}"))?;
        let truth = if f % 4 == 3 {
            json!({ "non_data": true })
        } else {
            json!({ "summary": format!(
                "Figure {f} charts segment margin trends. Margins widened in series s{f}. The chart spans five fiscal years."
            ) })
        };
        std::fs::write(crate::extract::truth_path(&image), truth.to_string())?;
        rows.push(
            json!({ "id": id, "doc": doc, "page": f + 2, "kind": "figure", "bbox": [20.0, 20.0, 400.0, 300.0],
                    "image_path": format!("regions/{id}.png") })
            .to_string(),
        );
    }
    let manifest_path = dir.join(format!("{doc}.regions.jsonl"));
    std::fs::write(&manifest_path, rows.join("\n") + "\n")?;

    let config_path = dir.join("finrag.toml");
    std::fs::write(&config_path, "window_size = 2\noverlap = 0\n")?;
    Ok(FilingFixture {
        doc: doc.to_string(),
        text_path,
        manifest_path,
        config_path,
        text_question: LIQUIDITY.to_string(),
        table_question: "dividend payout ratio per share".to_string(),
    })
}

/// Config matching the file written by [`write_filing`].
pub fn filing_config() -> EngineConfig {
    EngineConfig {
        window_size: 2,
        overlap: 0,
        ..Default::default()
    }
}
