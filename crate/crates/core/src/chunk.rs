//! Semantic chunking: sentence segmentation, sliding windows, percentile
//! breakpoints on adjacent-sentence distance, chunk formation and greedy
//! similarity merging.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::config::{BreakpointScope, EngineConfig};
use crate::embed::{EmbedError, Embedder};
use crate::types::{cosine_similarity, dot, estimate_tokens, ChunkId, EmbeddingVector, Modality};

#[derive(Debug, thiserror::Error)]
pub enum ChunkError {
    #[error("breakpoints need at least 2 embeddings, got {0}")]
    TooFewEmbeddings(usize),
    #[error("embedding dimensions differ inside one block")]
    MixedDimensions,
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub index: usize,
    pub text: String,
    /// Byte offsets into the source text.
    pub char_start: usize,
    pub char_end: usize,
}

/// Abbreviations whose trailing period never ends a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "vs.", "e.g.", "i.e.", "u.s.", "inc.", "corp.", "no.", "fig.", "mr.", "ms.", "dr.", "co.",
    "ltd.", "jr.", "sr.", "approx.", "est.",
];

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

fn is_opener(c: char) -> bool {
    matches!(c, '"' | '\'' | '(' | '[' | '\u{201c}' | '\u{2018}')
}

/// Splits `text` into sentences.
///
/// A sentence ends at `.`, `!` or `?` (plus any closing quotes/brackets) when
/// followed by whitespace and then an uppercase letter or digit, unless the
/// word carrying the period is a known abbreviation. A blank line always ends
/// a sentence, so headings without punctuation stay separate. Decimal points
/// never split because they are not followed by whitespace.
pub fn segment_sentences(text: &str) -> Vec<SentenceSpan> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;

    let push = |from: usize, to: usize, spans: &mut Vec<SentenceSpan>| {
        let slice = &text[from..to];
        let trimmed_end = from + slice.trim_end().len();
        if trimmed_end > from {
            spans.push(SentenceSpan {
                index: spans.len(),
                text: text[from..trimmed_end].to_string(),
                char_start: from,
                char_end: trimmed_end,
            });
        }
    };

    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if start.is_none() {
            if !c.is_whitespace() {
                start = Some(pos);
            }
            i += 1;
            continue;
        }
        let s = start.unwrap();

        if c == '\n' {
            // Blank line: newline, optional horizontal whitespace, newline.
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() && chars[j].1 != '\n' {
                j += 1;
            }
            if j < chars.len() && chars[j].1 == '\n' {
                push(s, pos, &mut spans);
                start = None;
                i = j + 1;
                continue;
            }
        }

        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && (is_closer(chars[j].1) || matches!(chars[j].1, '.' | '!' | '?')) {
                j += 1;
            }
            let end = chars.get(j).map_or(text.len(), |&(p, _)| p);
            if j < chars.len() && chars[j].1.is_whitespace() {
                let mut k = j;
                while k < chars.len() && chars[k].1.is_whitespace() {
                    k += 1;
                }
                while k < chars.len() && is_opener(chars[k].1) {
                    k += 1;
                }
                let next_ok = k < chars.len()
                    && (chars[k].1.is_uppercase() || chars[k].1.is_ascii_digit());
                if next_ok && !(c == '.' && is_abbreviation(text, s, end)) {
                    push(s, end, &mut spans);
                    start = None;
                    i = j;
                    continue;
                }
            }
            i = j;
            continue;
        }
        i += 1;
    }
    if let Some(s) = start {
        push(s, text.len(), &mut spans);
    }
    spans
}

fn is_abbreviation(text: &str, sentence_start: usize, end: usize) -> bool {
    let before = &text[sentence_start..end];
    let word = before
        .rsplit(|c: char| c.is_whitespace() || c == '(')
        .next()
        .unwrap_or("")
        .trim_end_matches(is_closer)
        .to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

/// A sliding window of sentences `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    pub end: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn sentences<'a>(&self, all: &'a [SentenceSpan]) -> &'a [SentenceSpan] {
        &all[self.start..self.end]
    }
}

/// Windows of `w` sentences starting every `w - o` sentences. The walk stops
/// once a window reaches the last sentence; a shorter final window is kept.
///
/// Panics if `o >= w`; configs are validated before reaching here.
pub fn build_windows(sentence_count: usize, w: usize, o: usize) -> Vec<Block> {
    assert!(o < w, "overlap must be < window");
    let stride = w - o;
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < sentence_count {
        let end = (start + w).min(sentence_count);
        blocks.push(Block { start, end });
        if end == sentence_count {
            break;
        }
        start += stride;
    }
    blocks
}

/// Percentile by linear interpolation between closest ranks (inclusive method).
pub fn percentile(values: &[f64], pct: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Fewest distances over which a percentile cut is taken.
pub const MIN_DISTANCES_FOR_BREAKPOINTS: usize = 4;

/// `d_j = 1 - cos(e_j, e_{j+1})` for consecutive embeddings.
pub fn adjacent_distances(embeddings: &[EmbeddingVector]) -> Result<Vec<f64>, ChunkError> {
    embeddings
        .windows(2)
        .map(|p| {
            cosine_similarity(&p[0], &p[1])
                .map(|s| 1.0 - s)
                .map_err(|_| ChunkError::MixedDimensions)
        })
        .collect()
}

/// Split positions for one block.
///
/// A position `j` (1-based, `1 <= j < len`) means "cut after the j-th
/// sentence"; it is returned when `d_j` is strictly above the percentile of
/// all distances in the block. Blocks with fewer than four distances are
/// never split.
pub fn breakpoints(embeddings: &[EmbeddingVector], pct: f64) -> Result<BTreeSet<usize>, ChunkError> {
    if embeddings.len() < 2 {
        return Err(ChunkError::TooFewEmbeddings(embeddings.len()));
    }
    let d = adjacent_distances(embeddings)?;
    Ok(breakpoints_from_distances(&d, pct))
}

pub fn breakpoints_from_distances(d: &[f64], pct: f64) -> BTreeSet<usize> {
    if d.len() < MIN_DISTANCES_FOR_BREAKPOINTS {
        return BTreeSet::new();
    }
    let cut = percentile(d, pct).expect("non-empty");
    splits_above(d, cut)
}

fn splits_above(d: &[f64], cut: f64) -> BTreeSet<usize> {
    d.iter()
        .enumerate()
        .filter(|(_, &v)| v > cut)
        .map(|(j, _)| j + 1)
        .collect()
}

/// Sentence ordinals of one chunk before embedding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkDraft {
    pub sentences: Vec<usize>,
}

/// Splits every block at its split positions; `splits[i]` belongs to `blocks[i]`.
pub fn form_chunks(blocks: &[Block], splits: &[BTreeSet<usize>]) -> Vec<ChunkDraft> {
    assert_eq!(blocks.len(), splits.len(), "one split set per block");
    let mut out = Vec::new();
    for (block, cuts) in blocks.iter().zip(splits) {
        let mut from = block.start;
        for &cut in cuts.iter().filter(|&&c| c > 0 && c < block.len()) {
            out.push(ChunkDraft {
                sentences: (from..block.start + cut).collect(),
            });
            from = block.start + cut;
        }
        out.push(ChunkDraft {
            sentences: (from..block.end).collect(),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextChunk {
    pub id: ChunkId,
    pub content: String,
    /// Sorted, de-duplicated sentence ordinals.
    pub sentences: Vec<usize>,
    pub embedding: EmbeddingVector,
    pub token_estimate: usize,
}

impl TextChunk {
    pub fn sentence_range(&self) -> (usize, usize) {
        (
            *self.sentences.first().expect("chunk has sentences"),
            *self.sentences.last().expect("chunk has sentences"),
        )
    }
}

/// Concatenates sentences in ordinal order; gaps between non-contiguous runs
/// are marked with a blank line.
pub fn render_content(ordinals: &[usize], sentences: &[SentenceSpan]) -> String {
    let mut out = String::new();
    let mut prev: Option<usize> = None;
    for &o in ordinals {
        if let Some(p) = prev {
            out.push_str(if o == p + 1 { " " } else { "\n\n" });
        }
        out.push_str(&sentences[o].text);
        prev = Some(o);
    }
    out
}

fn token_sum(ordinals: &[usize], sentences: &[SentenceSpan]) -> usize {
    ordinals.iter().map(|&o| estimate_tokens(&sentences[o].text)).sum()
}

/// Embeds drafts into chunks with sequential ids under `doc`.
pub fn embed_drafts(
    doc: &str,
    drafts: &[ChunkDraft],
    sentences: &[SentenceSpan],
    embedder: &dyn Embedder,
) -> Result<Vec<TextChunk>, ChunkError> {
    let contents: Vec<String> = drafts
        .iter()
        .map(|d| render_content(&d.sentences, sentences))
        .collect();
    let embeddings = embedder.embed_batch(&contents)?;
    Ok(drafts
        .iter()
        .zip(contents)
        .zip(embeddings)
        .enumerate()
        .map(|(i, ((d, content), embedding))| TextChunk {
            id: ChunkId::new(doc, Modality::Text, i as u32),
            content,
            sentences: d.sentences.clone(),
            embedding,
            token_estimate: token_sum(&d.sentences, sentences),
        })
        .collect())
}

/// A merge that would have exceeded the size cap.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedMerge {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub similarity: f32,
    pub merged_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub chunks: Vec<TextChunk>,
    pub blocked: Vec<BlockedMerge>,
    pub merges: usize,
}

struct Candidate {
    sim: f32,
    /// Ordinal sets of the pair, lexicographically ordered.
    key: (Vec<usize>, Vec<usize>),
    a: usize,
    b: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // Max-heap order: higher similarity first, then the lower ordinal pair.
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.key.cmp(&self.key))
    }
}

fn candidate(slots: &[Option<TextChunk>], a: usize, b: usize, tau: f64) -> Option<Candidate> {
    let (ca, cb) = (slots[a].as_ref()?, slots[b].as_ref()?);
    let sim = dot(ca.embedding.as_slice(), cb.embedding.as_slice());
    if f64::from(sim) <= tau {
        return None;
    }
    let (x, y) = if ca.sentences <= cb.sentences {
        (a, b)
    } else {
        (b, a)
    };
    Some(Candidate {
        sim,
        key: (
            slots[x].as_ref()?.sentences.clone(),
            slots[y].as_ref()?.sentences.clone(),
        ),
        a: x,
        b: y,
    })
}

/// Greedy merging: repeatedly merge the most similar pair above `tau`
/// (ties to the lowest ordinal pair), de-duplicating sentences by ordinal and
/// re-embedding the merged text. Pairs whose union would exceed `token_cap`
/// are skipped and reported as blocked.
pub fn merge_chunks(
    chunks: Vec<TextChunk>,
    sentences: &[SentenceSpan],
    tau: f64,
    token_cap: usize,
    embedder: &dyn Embedder,
) -> Result<MergeOutcome, ChunkError> {
    let doc = chunks.first().map(|c| c.id.doc.clone()).unwrap_or_default();
    let mut slots: Vec<Option<TextChunk>> = chunks.into_iter().map(Some).collect();
    let mut heap = BinaryHeap::new();
    for a in 0..slots.len() {
        for b in a + 1..slots.len() {
            heap.extend(candidate(&slots, a, b, tau));
        }
    }

    let mut blocked = Vec::new();
    let mut merges = 0;
    while let Some(c) = heap.pop() {
        if slots[c.a].is_none() || slots[c.b].is_none() {
            continue;
        }
        let union: Vec<usize> = c
            .key
            .0
            .iter()
            .chain(&c.key.1)
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let tokens = token_sum(&union, sentences);
        if tokens > token_cap {
            blocked.push(BlockedMerge {
                left: c.key.0,
                right: c.key.1,
                similarity: c.sim,
                merged_tokens: tokens,
            });
            continue;
        }
        let content = render_content(&union, sentences);
        let embedding = embedder.embed_one(&content)?;
        let left = slots[c.a].take().expect("live slot");
        slots[c.b] = None;
        slots.push(Some(TextChunk {
            id: left.id,
            content,
            sentences: union,
            embedding,
            token_estimate: tokens,
        }));
        merges += 1;
        let new = slots.len() - 1;
        for other in 0..new {
            heap.extend(candidate(&slots, other, new, tau));
        }
    }

    let mut out: Vec<TextChunk> = slots.into_iter().flatten().collect();
    out.sort_by(|x, y| x.sentences.cmp(&y.sentences));
    for (i, c) in out.iter_mut().enumerate() {
        c.id = ChunkId::new(doc.clone(), Modality::Text, i as u32);
    }
    // Blocked pairs involving chunks that later merged elsewhere are stale.
    let live: BTreeSet<&Vec<usize>> = out.iter().map(|c| &c.sentences).collect();
    blocked.retain(|b| live.contains(&b.left) && live.contains(&b.right));
    Ok(MergeOutcome {
        chunks: out,
        blocked,
        merges,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkingReport {
    pub sentences: Vec<SentenceSpan>,
    pub blocks: usize,
    pub pre_merge_chunks: usize,
    pub pre_merge_tokens: usize,
    pub chunks: Vec<TextChunk>,
    pub merged_tokens: usize,
    pub blocked: Vec<BlockedMerge>,
}

impl ChunkingReport {
    /// `1 - merged / pre-merge` token totals; 0 for an empty document.
    pub fn reduction_ratio(&self) -> f64 {
        if self.pre_merge_tokens == 0 {
            0.0
        } else {
            1.0 - self.merged_tokens as f64 / self.pre_merge_tokens as f64
        }
    }
}

/// Split positions for every block under the configured scope.
pub fn block_splits(
    blocks: &[Block],
    embeddings: &[EmbeddingVector],
    config: &EngineConfig,
) -> Result<Vec<BTreeSet<usize>>, ChunkError> {
    match config.breakpoint_scope {
        BreakpointScope::PerBlock => blocks
            .iter()
            .map(|b| {
                if b.len() < 2 {
                    Ok(BTreeSet::new())
                } else {
                    breakpoints(&embeddings[b.start..b.end], config.breakpoint_percentile)
                }
            })
            .collect(),
        BreakpointScope::Global => {
            let d = adjacent_distances(embeddings)?;
            if d.len() < MIN_DISTANCES_FOR_BREAKPOINTS {
                return Ok(vec![BTreeSet::new(); blocks.len()]);
            }
            let cut = percentile(&d, config.breakpoint_percentile).expect("non-empty");
            Ok(blocks
                .iter()
                .map(|b| {
                    if b.len() < 2 {
                        BTreeSet::new()
                    } else {
                        splits_above(&d[b.start..b.end - 1], cut)
                    }
                })
                .collect())
        }
    }
}

/// Segment, window, split, form and merge one document.
pub fn chunk_document(
    doc: &str,
    text: &str,
    config: &EngineConfig,
    embedder: &dyn Embedder,
) -> Result<ChunkingReport, ChunkError> {
    let sentences = segment_sentences(text);
    if sentences.is_empty() {
        return Ok(ChunkingReport {
            sentences,
            blocks: 0,
            pre_merge_chunks: 0,
            pre_merge_tokens: 0,
            chunks: Vec::new(),
            merged_tokens: 0,
            blocked: Vec::new(),
        });
    }
    let texts: Vec<String> = sentences.iter().map(|s| s.text.clone()).collect();
    let embeddings = embedder.embed_batch(&texts)?;
    let blocks = build_windows(sentences.len(), config.window_size, config.overlap);
    let splits = block_splits(&blocks, &embeddings, config)?;
    let drafts = form_chunks(&blocks, &splits);
    let pre = embed_drafts(doc, &drafts, &sentences, embedder)?;
    let pre_merge_tokens = pre.iter().map(|c| c.token_estimate).sum();
    let pre_merge_chunks = pre.len();
    let merged = merge_chunks(
        pre,
        &sentences,
        config.tau_merge,
        config.merge_token_cap(),
        embedder,
    )?;
    let merged_tokens = merged.chunks.iter().map(|c| c.token_estimate).sum();
    Ok(ChunkingReport {
        sentences,
        blocks: blocks.len(),
        pre_merge_chunks,
        pre_merge_tokens,
        chunks: merged.chunks,
        merged_tokens,
        blocked: merged.blocked,
    })
}
