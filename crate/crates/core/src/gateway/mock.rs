//! Offline chat models.
//!
//! [`ScriptedModel`] answers from ordered substring rules, then falls back to
//! protocol-aware defaults: extraction prompts get one well-formed section
//! per listed file (using a `.truth.json` sidecar next to the image when one
//! exists), and answer prompts get an echo of their context ids or the
//! deferral sentinel when there is no context.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ChatModel, ChatRequest, GatewayError, ModelReply, DEFERRAL_SENTINEL};
use crate::embed::seeded_hash;
use crate::extract::prompt::{listed_ids, render_section, split_sections, task_of, NON_DATA_VISUAL};
use crate::extract::{truth_path, RegionKind};
use crate::http::TransportError;
use crate::retrieve::context_ids;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub match_substring: String,
    pub response_text: String,
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedModel {
    rules: Vec<ScriptRule>,
}

impl ScriptedModel {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self { rules }
    }

    /// Loads rules from JSONL; blank lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Input(format!("reading {}: {e}", path.display())))?;
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let rule: ScriptRule = serde_json::from_str(line).map_err(|e| {
                GatewayError::Input(format!("{}:{}: bad rule: {e}", path.display(), i + 1))
            })?;
            rules.push(rule);
        }
        Ok(Self { rules })
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.rules
    }

    fn reply_for(&self, req: &ChatRequest) -> String {
        if let Some(rule) = self.rules.iter().find(|r| req.user.contains(&r.match_substring)) {
            return rule.response_text.clone();
        }
        match task_of(&req.user) {
            Some(kind) => listed_ids(&req.user)
                .iter()
                .enumerate()
                .map(|(i, id)| render_section(id, &default_body(kind, id, req.image_paths.get(i))))
                .collect(),
            None => {
                let ids = context_ids(&req.user);
                if ids.is_empty() {
                    DEFERRAL_SENTINEL.to_string()
                } else {
                    let cites: Vec<String> = ids.iter().map(|id| format!("[ctx:{id}]")).collect();
                    format!("Answer drawn from {}", cites.join(" "))
                }
            }
        }
    }
}

/// Ground truth planted next to a fixture image.
#[derive(Debug, Clone, Default, Deserialize)]
struct Truth {
    #[serde(default)]
    summary: Option<String>,
    #[serde(default)]
    table: Option<Value>,
    #[serde(default)]
    non_data: bool,
}

fn read_truth(image: Option<&PathBuf>) -> Truth {
    image
        .map(|p| truth_path(p))
        .and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or_default()
}

fn default_body(kind: RegionKind, id: &str, image: Option<&PathBuf>) -> String {
    let truth = read_truth(image);
    match kind {
        RegionKind::Table => {
            let summary = truth
                .summary
                .unwrap_or_else(|| format!("Table {id} extracted from the filing."));
            let table = truth
                .table
                .unwrap_or_else(|| serde_json::json!({ "region": id, "rows": [] }));
            format!("DESCRIPTION: {summary}\nJSON:\n```json\n{table}\n```")
        }
        RegionKind::Figure if truth.non_data => NON_DATA_VISUAL.to_string(),
        RegionKind::Figure => truth.summary.unwrap_or_else(|| {
            format!(
                "Figure {id} presents financial data from the filing. \
                 The chart tracks reported values across several periods. \
                 Axis labels identify the reporting units."
            )
        }),
    }
}

impl ChatModel for ScriptedModel {
    fn complete(&self, req: &ChatRequest) -> Result<ModelReply, GatewayError> {
        Ok(ModelReply::estimated(req, self.reply_for(req)))
    }
}

/// Drops sections from extraction replies.
///
/// On multi-file calls each id is dropped when a seeded hash of the id falls
/// below `rate`; ids in the always-fail set are dropped from every call.
pub struct OmittingModel<M> {
    inner: M,
    rate: f64,
    seed: u64,
    always: BTreeSet<String>,
    omitted: AtomicUsize,
}

impl<M: ChatModel> OmittingModel<M> {
    pub fn new(inner: M, rate: f64, seed: u64) -> Self {
        Self {
            inner,
            rate,
            seed,
            always: BTreeSet::new(),
            omitted: AtomicUsize::new(0),
        }
    }

    pub fn with_always_fail(mut self, ids: impl IntoIterator<Item = String>) -> Self {
        self.always.extend(ids);
        self
    }

    /// Whether `id` is dropped on batch calls.
    pub fn omits_in_batch(&self, id: &str) -> bool {
        self.always.contains(id) || unit_hash(self.seed, id) < self.rate
    }

    pub fn omitted_count(&self) -> usize {
        self.omitted.load(Ordering::Relaxed)
    }
}

fn unit_hash(seed: u64, id: &str) -> f64 {
    (seeded_hash(seed, id.as_bytes()) >> 11) as f64 / (1u64 << 53) as f64
}

impl<M: ChatModel> ChatModel for OmittingModel<M> {
    fn complete(&self, req: &ChatRequest) -> Result<ModelReply, GatewayError> {
        let reply = self.inner.complete(req)?;
        if task_of(&req.user).is_none() {
            return Ok(reply);
        }
        let batch = listed_ids(&req.user).len() > 1;
        let mut kept = String::new();
        for (id, body) in split_sections(&reply.text) {
            let drop = self.always.contains(&id) || (batch && self.omits_in_batch(&id));
            if drop {
                self.omitted.fetch_add(1, Ordering::Relaxed);
            } else {
                kept.push_str(&render_section(&id, &body));
            }
        }
        Ok(ModelReply::estimated(req, kept))
    }
}

/// Fails the first `failures` attempts with HTTP 503, then delegates.
pub struct FlakyModel<M> {
    inner: M,
    failures: usize,
    seen: AtomicUsize,
}

impl<M: ChatModel> FlakyModel<M> {
    pub fn new(inner: M, failures: usize) -> Self {
        Self {
            inner,
            failures,
            seen: AtomicUsize::new(0),
        }
    }
}

impl<M: ChatModel> ChatModel for FlakyModel<M> {
    fn complete(&self, req: &ChatRequest) -> Result<ModelReply, GatewayError> {
        if self.seen.fetch_add(1, Ordering::SeqCst) < self.failures {
            return Err(GatewayError::Transport {
                attempts: 1,
                source: TransportError::Status {
                    status: 503,
                    body: "injected".into(),
                },
            });
        }
        self.inner.complete(req)
    }
}
