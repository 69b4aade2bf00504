//! Tiered retrieval and answer generation.
//!
//! Text hits at or above `theta_text` are collected first. With at least `n`
//! of them the query is answered from text alone; otherwise the best `m`
//! tables and `p` images that clear their own thresholds are added. Exactly
//! one model call follows.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::embed::{EmbedError, Embedder};
use crate::error::Error;
use crate::gateway::{ChatRequest, Gateway, DEFERRAL_SENTINEL};
use crate::store::{canonical_json, KnowledgeBase};
use crate::types::{estimate_tokens, ChunkId, EmbeddingVector, Modality};
use crate::vindex::{IndexError, ModalityIndex, SearchHit};

pub const SYSTEM_PROMPT: &str = "You answer questions about financial filings using only the numbered context \
passages supplied with each question. Quote figures exactly as they appear. If the context does not contain \
the answer, reply exactly with: insufficient information";

const CONTEXT_MARKER: &str = "[ctx:";

pub fn context_marker(id: &ChunkId) -> String {
    format!("{CONTEXT_MARKER}{id}]")
}

/// Ids cited as `[ctx:ID]` in `text`, first occurrence order, no repeats.
pub fn context_ids(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut rest = text;
    while let Some(at) = rest.find(CONTEXT_MARKER) {
        rest = &rest[at + CONTEXT_MARKER.len()..];
        let Some(end) = rest.find(']') else { break };
        let id = &rest[..end];
        if !id.is_empty() && !id.contains(char::is_whitespace) && !out.iter().any(|x| x == id) {
            out.push(id.to_string());
        }
        rest = &rest[end..];
    }
    out
}

#[derive(Debug, Clone)]
pub struct Query {
    pub text: String,
    pub embedding: EmbeddingVector,
    pub config: EngineConfig,
}

impl Query {
    pub fn new(text: &str, embedder: &dyn Embedder, config: &EngineConfig) -> Result<Self, EmbedError> {
        Ok(Self {
            text: text.to_string(),
            embedding: embedder.embed_one(text)?,
            config: config.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    TextOnly,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub text: f64,
    pub table: f64,
    pub image: f64,
}

impl Thresholds {
    pub fn of(c: &EngineConfig) -> Self {
        Self {
            text: c.theta_text,
            table: c.theta_table,
            image: c.theta_image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedContext {
    pub id: ChunkId,
    pub similarity: f32,
    pub tokens: usize,
}

/// Everything one query decided, in serializable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierTrace {
    pub query: String,
    pub tier: Tier,
    pub min_text_hits: usize,
    pub thresholds: Thresholds,
    pub text_hits: Vec<SearchHit>,
    pub table_hits: Vec<SearchHit>,
    pub image_hits: Vec<SearchHit>,
    /// Contexts sent to the model, in prompt order.
    pub contexts: Vec<ChunkId>,
    /// Contexts removed to fit the token budget, in drop order.
    pub dropped: Vec<DroppedContext>,
    pub prompt_tokens: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub embed: Duration,
    pub text_search: Duration,
    pub fallback_search: Duration,
    pub assemble: Duration,
    pub generate: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Answer {
    pub text: String,
    pub insufficient: bool,
    pub trace: TierTrace,
    pub timings: StageTimings,
}

/// Thresholded text search at `theta_text`, capped, best first.
pub fn retrieve_text(q: &Query, index: &ModalityIndex) -> Result<Vec<SearchHit>, IndexError> {
    index.search_threshold(&q.embedding, q.config.theta_text, q.config.text_hit_cap)
}

pub fn decide_tier(hits: &[SearchHit], n: usize) -> Tier {
    if hits.len() >= n {
        Tier::TextOnly
    } else {
        Tier::Fallback
    }
}

fn top_above(index: &ModalityIndex, q: &EmbeddingVector, k: usize, theta: f64) -> Result<Vec<SearchHit>, IndexError> {
    let mut hits = index.search_topk(q, k)?;
    hits.retain(|h| f64::from(h.similarity) >= theta);
    Ok(hits)
}

/// Top-`m` tables and top-`p` images, each filtered by its threshold after
/// candidate collection. The two searches run in parallel.
pub fn retrieve_fallback(
    q: &Query,
    table_index: &ModalityIndex,
    image_index: &ModalityIndex,
) -> Result<(Vec<SearchHit>, Vec<SearchHit>), IndexError> {
    let c = &q.config;
    std::thread::scope(|s| {
        let tables = s.spawn(|| top_above(table_index, &q.embedding, c.table_top, c.theta_table));
        let images = top_above(image_index, &q.embedding, c.image_top, c.theta_image);
        Ok((tables.join().expect("table search panicked")?, images?))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContextBody {
    Text(String),
    Table { summary: String, json: String },
    Image(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub id: ChunkId,
    pub similarity: f32,
    pub body: ContextBody,
}

impl Context {
    fn render(&self) -> String {
        let m = context_marker(&self.id);
        match &self.body {
            ContextBody::Text(t) | ContextBody::Image(t) => format!("{m} {t}\n"),
            ContextBody::Table { summary, json } => format!("{m} SUMMARY: {summary}\nJSON: {json}\n"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledPrompt {
    pub system: String,
    pub user: String,
    pub contexts: Vec<ChunkId>,
    pub dropped: Vec<DroppedContext>,
    pub token_estimate: usize,
}

fn render_user(question: &str, sections: [(&str, &[Context]); 3]) -> String {
    let mut user = format!("QUESTION: {question}\n\n");
    if sections.iter().all(|(_, c)| c.is_empty()) {
        user.push_str("CONTEXT: none retrieved.\n\n");
    }
    for (title, ctx) in sections {
        if ctx.is_empty() {
            continue;
        }
        user.push_str(title);
        user.push_str(":\n");
        for c in ctx {
            user.push_str(&c.render());
        }
        user.push('\n');
    }
    user.push_str("Answer using only the context above.");
    user
}

/// Builds the system and user prompts, sections ordered TEXT, TABLES,
/// IMAGES. While over `budget` tokens the lowest-similarity context goes
/// first (ties: larger id first).
pub fn assemble_prompt(
    question: &str,
    text: &[Context],
    tables: &[Context],
    images: &[Context],
    budget: usize,
) -> AssembledPrompt {
    let mut sets = [text.to_vec(), tables.to_vec(), images.to_vec()];
    let mut dropped = Vec::new();
    loop {
        let user = render_user(
            question,
            [("TEXT", &sets[0]), ("TABLES", &sets[1]), ("IMAGES", &sets[2])],
        );
        let tokens = estimate_tokens(SYSTEM_PROMPT) + estimate_tokens(&user);
        let worst = sets
            .iter()
            .enumerate()
            .flat_map(|(s, v)| v.iter().enumerate().map(move |(i, c)| (s, i, c)))
            .min_by(|a, b| {
                a.2.similarity
                    .total_cmp(&b.2.similarity)
                    .then_with(|| b.2.id.cmp(&a.2.id))
            })
            .map(|(s, i, _)| (s, i));
        match worst {
            Some((s, i)) if tokens > budget => {
                let c = sets[s].remove(i);
                dropped.push(DroppedContext {
                    tokens: estimate_tokens(&c.render()),
                    id: c.id,
                    similarity: c.similarity,
                });
            }
            _ => {
                return AssembledPrompt {
                    system: SYSTEM_PROMPT.to_string(),
                    user,
                    contexts: sets.iter().flatten().map(|c| c.id.clone()).collect(),
                    dropped,
                    token_estimate: tokens,
                }
            }
        }
    }
}

/// Resolves hits to their stored content.
pub fn resolve_contexts(kb: &KnowledgeBase, hits: &[SearchHit]) -> Vec<Context> {
    hits.iter()
        .filter_map(|h| {
            let body = match h.id.modality {
                Modality::Text => ContextBody::Text(kb.texts().get(&h.id)?.content.clone()),
                Modality::Table => {
                    let t = kb.tables().get(&h.id)?;
                    ContextBody::Table {
                        summary: t.summary.clone(),
                        json: canonical_json(&t.structured),
                    }
                }
                Modality::Image => ContextBody::Image(kb.images().get(&h.id)?.summary.clone()),
            };
            Some(Context {
                id: h.id.clone(),
                similarity: h.similarity,
                body,
            })
        })
        .collect()
}

/// A retrieval decision and the prompt it produced, before any model call.
#[derive(Debug, Clone)]
pub struct RetrievalPlan {
    pub trace: TierTrace,
    pub system: String,
    pub user: String,
    pub timings: StageTimings,
}

pub fn retrieve(q: &Query, kb: &KnowledgeBase) -> Result<RetrievalPlan, IndexError> {
    let mut timings = StageTimings::default();
    let t = Instant::now();
    let text_hits = retrieve_text(q, kb.index(Modality::Text))?;
    timings.text_search = t.elapsed();
    let tier = decide_tier(&text_hits, q.config.min_text_hits);
    let (table_hits, image_hits) = match tier {
        Tier::TextOnly => (Vec::new(), Vec::new()),
        Tier::Fallback => {
            let t = Instant::now();
            let r = retrieve_fallback(q, kb.index(Modality::Table), kb.index(Modality::Image))?;
            timings.fallback_search = t.elapsed();
            r
        }
    };
    let t = Instant::now();
    let prompt = assemble_prompt(
        &q.text,
        &resolve_contexts(kb, &text_hits),
        &resolve_contexts(kb, &table_hits),
        &resolve_contexts(kb, &image_hits),
        q.config.max_context_tokens,
    );
    timings.assemble = t.elapsed();
    Ok(RetrievalPlan {
        trace: TierTrace {
            query: q.text.clone(),
            tier,
            min_text_hits: q.config.min_text_hits,
            thresholds: Thresholds::of(&q.config),
            text_hits,
            table_hits,
            image_hits,
            contexts: prompt.contexts,
            dropped: prompt.dropped,
            prompt_tokens: prompt.token_estimate,
        },
        system: prompt.system,
        user: prompt.user,
        timings,
    })
}

/// A failed answer; retrieval work done before the failure is kept.
#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct AnswerError {
    pub trace: Option<Box<TierTrace>>,
    #[source]
    pub source: Error,
}

impl AnswerError {
    fn bare(source: impl Into<Error>) -> Self {
        Self {
            trace: None,
            source: source.into(),
        }
    }
}

pub fn is_deferral(reply: &str) -> bool {
    reply
        .trim_start()
        .get(..DEFERRAL_SENTINEL.len())
        .is_some_and(|s| s.eq_ignore_ascii_case(DEFERRAL_SENTINEL))
}

/// Embeds, retrieves, assembles and makes exactly one gateway call.
pub fn answer(
    question: &str,
    kb: &KnowledgeBase,
    config: &EngineConfig,
    embedder: &dyn Embedder,
    gateway: &Gateway,
) -> Result<Answer, AnswerError> {
    let t = Instant::now();
    let q = Query::new(question, embedder, config).map_err(AnswerError::bare)?;
    let embed = t.elapsed();
    let plan = retrieve(&q, kb).map_err(AnswerError::bare)?;
    let mut timings = plan.timings;
    timings.embed = embed;
    let t = Instant::now();
    let reply = gateway
        .chat(&ChatRequest::text(plan.system, plan.user))
        .map_err(|e| AnswerError {
            trace: Some(Box::new(plan.trace.clone())),
            source: e.into(),
        })?;
    timings.generate = t.elapsed();
    Ok(Answer {
        insufficient: is_deferral(&reply.text),
        text: reply.text,
        trace: plan.trace,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(seq: u32, m: Modality, sim: f32, body: ContextBody) -> Context {
        Context {
            id: ChunkId::new("d", m, seq),
            similarity: sim,
            body,
        }
    }

    fn hits(n: usize) -> Vec<SearchHit> {
        (0..n)
            .map(|i| SearchHit {
                id: ChunkId::new("d", Modality::Text, i as u32),
                similarity: 0.9,
            })
            .collect()
    }

    #[test]
    fn tier_boundary() {
        assert_eq!(decide_tier(&hits(6), 6), Tier::TextOnly);
        assert_eq!(decide_tier(&hits(5), 6), Tier::Fallback);
        assert_eq!(decide_tier(&[], 6), Tier::Fallback);
    }

    #[test]
    fn system_prompt_carries_deferral_phrase() {
        assert!(SYSTEM_PROMPT.contains(DEFERRAL_SENTINEL));
    }

    #[test]
    fn empty_prompt_states_no_context() {
        let p = assemble_prompt("What was revenue?", &[], &[], &[], 8192);
        assert!(p.user.contains("CONTEXT: none retrieved."));
        assert!(p.contexts.is_empty());
    }

    #[test]
    fn table_context_has_summary_and_json() {
        let t = ctx(
            0,
            Modality::Table,
            0.8,
            ContextBody::Table {
                summary: "Segment revenue 2023.".into(),
                json: r#"{"rev":1}"#.into(),
            },
        );
        let p = assemble_prompt("q", &[], &[t], &[], 8192);
        assert!(p.user.contains("Segment revenue 2023."));
        assert!(p.user.contains(r#"JSON: {"rev":1}"#));
        assert!(p.user.contains("TABLES:\n[ctx:d#table#000000]"));
    }

    #[test]
    fn sections_in_order() {
        let p = assemble_prompt(
            "q",
            &[ctx(0, Modality::Text, 0.8, ContextBody::Text("t".into()))],
            &[ctx(0, Modality::Table, 0.7, ContextBody::Table { summary: "s".into(), json: "{}".into() })],
            &[ctx(0, Modality::Image, 0.6, ContextBody::Image("i".into()))],
            8192,
        );
        let (a, b, c) = (p.user.find("TEXT:"), p.user.find("TABLES:"), p.user.find("IMAGES:"));
        assert!(a < b && b < c);
        assert_eq!(p.contexts.len(), 3);
    }

    #[test]
    fn over_budget_drops_lowest_similarity_first() {
        let big = |seq, sim| ctx(seq, Modality::Text, sim, ContextBody::Text("word ".repeat(200)));
        let text = [big(0, 0.9), big(1, 0.75), big(2, 0.8), big(3, 0.75)];
        let full = assemble_prompt("q", &text, &[], &[], usize::MAX);
        let budget = full.token_estimate - 400;
        let p = assemble_prompt("q", &text, &[], &[], budget);
        assert!(p.token_estimate <= budget);
        let order: Vec<u32> = p.dropped.iter().map(|d| d.id.seq).collect();
        assert_eq!(order, [3, 1]);
        assert_eq!(p.contexts.iter().map(|c| c.seq).collect::<Vec<_>>(), [0, 2]);
        assert_eq!(p, assemble_prompt("q", &text, &[], &[], budget));
    }

    #[test]
    fn context_id_scan() {
        assert_eq!(context_ids("a [ctx:x#text#000001] b [ctx:y] [ctx:x#text#000001] [ctx:"), ["x#text#000001", "y"]);
        assert!(context_ids("nothing").is_empty());
    }

    #[test]
    fn deferral_detection() {
        assert!(is_deferral("Insufficient information."));
        assert!(is_deferral("  insufficient information"));
        assert!(!is_deferral("Revenue was $5B; insufficient information on margins"));
        assert!(!is_deferral(""));
    }
}
