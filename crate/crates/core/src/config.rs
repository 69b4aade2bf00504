//! Engine configuration: defaults, validation and layered loading
//! (file, then `FINRAG_*` environment, then explicit overrides).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Violation};

pub const ENV_PREFIX: &str = "FINRAG_";

/// Which vector index backs each modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Flat,
    Hnsw,
}

/// Whether breakpoint percentiles are taken per window block or over the whole document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakpointScope {
    PerBlock,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Sentences per sliding window.
    pub window_size: usize,
    /// Sentences shared by consecutive windows; must be `< window_size`.
    pub overlap: usize,
    /// Regions per multimodal extraction call.
    pub batch_size: usize,
    /// Text hits needed to answer without fallback.
    pub min_text_hits: usize,
    /// Tables fetched on fallback.
    pub table_top: usize,
    /// Image summaries fetched on fallback.
    pub image_top: usize,
    pub theta_text: f64,
    pub theta_table: f64,
    pub theta_image: f64,
    /// Similarity above which chunks are merged.
    pub tau_merge: f64,
    pub breakpoint_percentile: f64,
    pub breakpoint_scope: BreakpointScope,
    pub embed_dim: usize,
    /// Token budget for one assembled answer prompt.
    pub max_context_tokens: usize,
    pub retry_limit: usize,
    /// Upper bound on thresholded text hits fed to a prompt.
    pub text_hit_cap: usize,
    pub index_kind: IndexKind,
    pub hnsw_m: usize,
    pub hnsw_ef_construction: usize,
    pub hnsw_ef_search: usize,
    pub hnsw_seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            window_size: 8,
            overlap: 2,
            batch_size: 5,
            min_text_hits: 6,
            table_top: 4,
            image_top: 3,
            theta_text: 0.70,
            theta_table: 0.65,
            theta_image: 0.55,
            tau_merge: 0.85,
            breakpoint_percentile: 95.0,
            breakpoint_scope: BreakpointScope::PerBlock,
            embed_dim: 256,
            max_context_tokens: 8192,
            retry_limit: 2,
            text_hit_cap: 24,
            index_kind: IndexKind::Hnsw,
            hnsw_m: 16,
            hnsw_ef_construction: 200,
            hnsw_ef_search: 64,
            hnsw_seed: 0x5eed_f17a_6000_0001,
        }
    }
}

fn positive(out: &mut Vec<Violation>, field: &'static str, value: usize) {
    if value == 0 {
        out.push(Violation {
            field,
            message: "must be a positive integer".into(),
        });
    }
}

fn in_range(out: &mut Vec<Violation>, field: &'static str, value: f64, lo: f64, hi: f64) {
    if !(lo..=hi).contains(&value) {
        out.push(Violation {
            field,
            message: format!("{value} out of range [{lo}, {hi}]"),
        });
    }
}

impl EngineConfig {
    /// Checks every invariant and reports all violations at once.
    pub fn validate(self) -> Result<Self, ConfigError> {
        let mut v = Vec::new();
        positive(&mut v, "window_size", self.window_size);
        if self.overlap >= self.window_size {
            v.push(Violation {
                field: "overlap",
                message: format!(
                    "overlap must be < window ({} >= {})",
                    self.overlap, self.window_size
                ),
            });
        }
        positive(&mut v, "batch_size", self.batch_size);
        positive(&mut v, "min_text_hits", self.min_text_hits);
        positive(&mut v, "table_top", self.table_top);
        positive(&mut v, "image_top", self.image_top);
        in_range(&mut v, "theta_text", self.theta_text, -1.0, 1.0);
        in_range(&mut v, "theta_table", self.theta_table, -1.0, 1.0);
        in_range(&mut v, "theta_image", self.theta_image, -1.0, 1.0);
        in_range(&mut v, "tau_merge", self.tau_merge, 0.0, 1.0);
        if !(self.breakpoint_percentile > 0.0 && self.breakpoint_percentile < 100.0) {
            v.push(Violation {
                field: "breakpoint_percentile",
                message: format!("{} out of range (0, 100)", self.breakpoint_percentile),
            });
        }
        positive(&mut v, "embed_dim", self.embed_dim);
        positive(&mut v, "max_context_tokens", self.max_context_tokens);
        positive(&mut v, "retry_limit", self.retry_limit);
        positive(&mut v, "text_hit_cap", self.text_hit_cap);
        if self.hnsw_m < 2 {
            v.push(Violation {
                field: "hnsw_m",
                message: format!("{} must be >= 2", self.hnsw_m),
            });
        }
        positive(&mut v, "hnsw_ef_construction", self.hnsw_ef_construction);
        positive(&mut v, "hnsw_ef_search", self.hnsw_ef_search);
        if v.is_empty() {
            Ok(self)
        } else {
            Err(ConfigError::Invalid(v))
        }
    }

    /// Largest merged chunk, in estimated tokens.
    pub fn merge_token_cap(&self) -> usize {
        (self.max_context_tokens / 4).max(1)
    }

    /// Sets one field from its textual form. Keys are the field names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.trim().parse().map_err(|_| ConfigError::Parse {
                source_name: key.to_string(),
                line: 0,
                message: format!("cannot parse {value:?}"),
            })
        }
        let value = value.trim();
        match key {
            "window_size" => self.window_size = num(key, value)?,
            "overlap" => self.overlap = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "min_text_hits" => self.min_text_hits = num(key, value)?,
            "table_top" => self.table_top = num(key, value)?,
            "image_top" => self.image_top = num(key, value)?,
            "theta_text" => self.theta_text = num(key, value)?,
            "theta_table" => self.theta_table = num(key, value)?,
            "theta_image" => self.theta_image = num(key, value)?,
            "tau_merge" => self.tau_merge = num(key, value)?,
            "breakpoint_percentile" => self.breakpoint_percentile = num(key, value)?,
            "breakpoint_scope" => {
                self.breakpoint_scope = match value {
                    "per_block" => BreakpointScope::PerBlock,
                    "global" => BreakpointScope::Global,
                    _ => return Err(num::<u8>(key, value).unwrap_err()),
                }
            }
            "embed_dim" => self.embed_dim = num(key, value)?,
            "max_context_tokens" => self.max_context_tokens = num(key, value)?,
            "retry_limit" => self.retry_limit = num(key, value)?,
            "text_hit_cap" => self.text_hit_cap = num(key, value)?,
            "index_kind" => {
                self.index_kind = match value {
                    "flat" => IndexKind::Flat,
                    "hnsw" => IndexKind::Hnsw,
                    _ => return Err(num::<u8>(key, value).unwrap_err()),
                }
            }
            "hnsw_m" => self.hnsw_m = num(key, value)?,
            "hnsw_ef_construction" => self.hnsw_ef_construction = num(key, value)?,
            "hnsw_ef_search" => self.hnsw_ef_search = num(key, value)?,
            "hnsw_seed" => self.hnsw_seed = num(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies a flat `key = value` document. `#` starts a comment.
    pub fn apply_str(&mut self, source_name: &str, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    source_name: source_name.to_string(),
                    line: i + 1,
                    message: "expected `key = value`".into(),
                });
            };
            self.set(key.trim(), value).map_err(|e| match e {
                ConfigError::Parse { message, .. } => ConfigError::Parse {
                    source_name: source_name.to_string(),
                    line: i + 1,
                    message: format!("{}: {message}", key.trim()),
                },
                ConfigError::UnknownKey(k) => ConfigError::Parse {
                    source_name: source_name.to_string(),
                    line: i + 1,
                    message: format!("unknown key {k:?}"),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_str(&path.display().to_string(), &text)
    }

    /// Applies `FINRAG_<FIELD>` overrides. Variables that do not name a
    /// config field (e.g. `FINRAG_LLM_URL`) are left to their own consumers.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut vars: Vec<_> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(ENV_PREFIX)
                    .map(|field| (field.to_ascii_lowercase(), v))
            })
            .collect();
        vars.sort();
        for (field, value) in vars {
            match self.set(&field, &value) {
                Err(ConfigError::UnknownKey(_)) => {}
                Err(ConfigError::Parse { message, .. }) => {
                    return Err(ConfigError::Parse {
                        source_name: format!("{ENV_PREFIX}{}", field.to_ascii_uppercase()),
                        line: 0,
                        message,
                    })
                }
                other => other?,
            }
        }
        Ok(())
    }

    /// Defaults, then optional file, then process environment; validated.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            cfg.apply_file(p)?;
        }
        cfg.apply_env(std::env::vars())?;
        cfg.validate()
    }

    /// Build-time fields whose change invalidates an existing knowledge base.
    pub fn build_drift(&self, other: &EngineConfig) -> Vec<String> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if self.$f != other.$f {
                    out.push(format!("{}: built with {:?}, now {:?}", stringify!($f), self.$f, other.$f));
                }
            )*};
        }
        cmp!(
            window_size,
            overlap,
            batch_size,
            tau_merge,
            breakpoint_percentile,
            breakpoint_scope,
            embed_dim,
            index_kind,
            hnsw_m,
            hnsw_ef_construction,
            hnsw_seed
        );
        out
    }
}
