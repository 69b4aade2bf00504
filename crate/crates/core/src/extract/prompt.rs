//! Batch prompt framing and total response parsing.
//!
//! A batch prompt lists one `FILE <id>` line per region. The model answers
//! with one section per file:
//!
//! ````text
//! <<<FILE t1>>>
//! DESCRIPTION: ...
//! JSON:
//! ```json
//! {...}
//! ```
//! <<<END>>>
//! ````
//!
//! Figure sections carry a plain summary or the `NON_DATA_VISUAL` sentinel.

use std::collections::BTreeMap;

use serde_json::Value;

use super::{Region, RegionKind};
use crate::chunk::segment_sentences;

pub const TABLE_TASK: &str = "TASK: TABLE_EXTRACTION";
pub const FIGURE_TASK: &str = "TASK: FIGURE_SUMMARY";
pub const SECTION_OPEN: &str = "<<<FILE ";
pub const SECTION_CLOSE: &str = "<<<END>>>";
pub const NON_DATA_VISUAL: &str = "NON_DATA_VISUAL";
pub const MIN_SUMMARY_SENTENCES: usize = 3;
pub const MAX_SUMMARY_SENTENCES: usize = 6;
const FILE_LINE: &str = "FILE ";

pub const EXTRACTION_SYSTEM_PROMPT: &str = "You convert images cropped from financial filings into faithful text. \
Report only what is visible. Follow the output format exactly.";

/// Quotes ids containing whitespace.
pub fn quote_id(id: &str) -> String {
    if id.chars().any(char::is_whitespace) {
        format!("\"{id}\"")
    } else {
        id.to_string()
    }
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    s.strip_prefix('"')
        .and_then(|r| r.strip_suffix('"'))
        .unwrap_or(s)
}

fn file_lines(batch: &[Region]) -> String {
    batch
        .iter()
        .map(|r| format!("{FILE_LINE}{}\n", quote_id(&r.id)))
        .collect()
}

pub fn build_table_prompt(batch: &[Region]) -> String {
    format!(
        "{TABLE_TASK}\n\
         One table image is attached per file, in the order listed.\n\
         {files}\
         For each file reply with exactly one section in this form:\n\
         {SECTION_OPEN}file-id>>>\n\
         DESCRIPTION: one paragraph stating what the table reports, its periods and units.\n\
         JSON:\n\
         ```json\n\
         the full table as a JSON object or array\n\
         ```\n\
         {SECTION_CLOSE}\n\
         Use each file id exactly as listed, once. Omit a file rather than guess.\n",
        files = file_lines(batch)
    )
}

pub fn build_image_prompt(batch: &[Region]) -> String {
    format!(
        "{FIGURE_TASK}\n\
         One figure image is attached per file, in the order listed.\n\
         {files}\
         For each file reply with exactly one section in this form:\n\
         {SECTION_OPEN}file-id>>>\n\
         A summary of {MIN_SUMMARY_SENTENCES} to {MAX_SUMMARY_SENTENCES} sentences describing the data shown, with values and trends.\n\
         {SECTION_CLOSE}\n\
         If a file is a logo, watermark or other non-data visual, its section body is {NON_DATA_VISUAL}.\n\
         Use each file id exactly as listed, once. Omit a file rather than guess.\n",
        files = file_lines(batch)
    )
}

/// Which extraction task a prompt asks for, if any.
pub fn task_of(prompt: &str) -> Option<RegionKind> {
    match prompt.lines().next().map(str::trim) {
        Some(TABLE_TASK) => Some(RegionKind::Table),
        Some(FIGURE_TASK) => Some(RegionKind::Figure),
        _ => None,
    }
}

/// File ids listed in a batch prompt, in order.
pub fn listed_ids(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .filter_map(|l| l.strip_prefix(FILE_LINE))
        .map(|rest| unquote(rest).to_string())
        .collect()
}

pub fn render_section(id: &str, body: &str) -> String {
    format!("{SECTION_OPEN}{}>>>\n{}\n{SECTION_CLOSE}\n", quote_id(id), body.trim_end())
}

/// Every complete `<<<FILE id>>> ... <<<END>>>` section, in order of
/// appearance. Sections without a closing marker are dropped.
pub fn split_sections(raw: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut rest = raw;
    while let Some(open) = rest.find(SECTION_OPEN) {
        rest = &rest[open + SECTION_OPEN.len()..];
        let Some(head_end) = rest.find(">>>") else { break };
        let id = unquote(&rest[..head_end]);
        if id.contains('\n') {
            continue;
        }
        let body_start = &rest[head_end + 3..];
        let close = body_start.find(SECTION_CLOSE);
        let next_open = body_start.find(SECTION_OPEN);
        match (close, next_open) {
            (Some(c), n) if n.is_none_or(|n| c < n) => {
                out.push((id.to_string(), body_start[..c].trim().to_string()));
                rest = &body_start[c + SECTION_CLOSE.len()..];
            }
            _ => rest = body_start,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableExtraction {
    pub summary: String,
    pub structured: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FigureExtraction {
    Summary(String),
    NonData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissingItem {
    pub id: String,
    pub reason: String,
}

/// Parsed sections keyed by id plus every batch id that could not be used.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchParse<T> {
    pub parsed: BTreeMap<String, T>,
    pub missing: Vec<MissingItem>,
}

fn strip_fence(s: &str) -> &str {
    let s = s.trim();
    let Some(inner) = s.strip_prefix("```") else { return s };
    let inner = inner.strip_prefix("json").unwrap_or(inner);
    inner.trim_end().strip_suffix("```").unwrap_or(inner).trim()
}

pub fn parse_table_section(body: &str) -> Result<TableExtraction, String> {
    let desc_at = body.find("DESCRIPTION:").ok_or("no DESCRIPTION field")?;
    let json_at = body.find("JSON:").ok_or("no JSON field")?;
    if json_at < desc_at {
        return Err("JSON field precedes DESCRIPTION".into());
    }
    let summary = body[desc_at + "DESCRIPTION:".len()..json_at].trim();
    if summary.is_empty() {
        return Err("empty description".into());
    }
    let raw_json = strip_fence(&body[json_at + "JSON:".len()..]);
    let structured: Value = serde_json::from_str(raw_json).map_err(|e| format!("invalid JSON: {e}"))?;
    if !(structured.is_object() || structured.is_array()) {
        return Err("JSON is not an object or array".into());
    }
    Ok(TableExtraction {
        summary: summary.split_whitespace().collect::<Vec<_>>().join(" "),
        structured,
    })
}

pub fn parse_figure_section(body: &str) -> Result<FigureExtraction, String> {
    let body = body.trim();
    if body == NON_DATA_VISUAL {
        return Ok(FigureExtraction::NonData);
    }
    let summary = body.split_whitespace().collect::<Vec<_>>().join(" ");
    let n = segment_sentences(&summary).len();
    if !(MIN_SUMMARY_SENTENCES..=MAX_SUMMARY_SENTENCES).contains(&n) {
        return Err(format!(
            "summary has {n} sentence(s), expected {MIN_SUMMARY_SENTENCES}-{MAX_SUMMARY_SENTENCES}"
        ));
    }
    Ok(FigureExtraction::Summary(summary))
}

fn parse_with<T>(
    batch_ids: &[String],
    raw: &str,
    parse: impl Fn(&str) -> Result<T, String>,
) -> BatchParse<T> {
    let mut bodies: BTreeMap<&str, &str> = BTreeMap::new();
    let sections = split_sections(raw);
    for (id, body) in &sections {
        // First section for an id wins; sections for foreign ids are ignored.
        bodies.entry(id.as_str()).or_insert(body.as_str());
    }
    let mut parsed = BTreeMap::new();
    let mut missing = Vec::new();
    for id in batch_ids {
        match bodies.get(id.as_str()) {
            None => missing.push(MissingItem {
                id: id.clone(),
                reason: "absent from response".into(),
            }),
            Some(body) => match parse(body) {
                Ok(v) => {
                    parsed.insert(id.clone(), v);
                }
                Err(reason) => missing.push(MissingItem { id: id.clone(), reason }),
            },
        }
    }
    BatchParse { parsed, missing }
}

/// Splits a table batch reply into per-id extractions. Never fails: anything
/// unusable lands on the missing list.
pub fn parse_batch_response(batch_ids: &[String], raw: &str) -> BatchParse<TableExtraction> {
    parse_with(batch_ids, raw, parse_table_section)
}

pub fn parse_image_response(batch_ids: &[String], raw: &str) -> BatchParse<FigureExtraction> {
    parse_with(batch_ids, raw, parse_figure_section)
}
