//! Answer normalization and per-question-type accuracy.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::embed::Embedder;
use crate::error::{Error, ErrorClass};
use crate::gateway::Gateway;
use crate::retrieve::{answer, Tier};
use crate::store::KnowledgeBase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Text,
    Image,
    Table,
    Combined,
}

impl QuestionType {
    pub const ALL: [QuestionType; 4] = [Self::Text, Self::Image, Self::Table, Self::Combined];

    pub fn label(self) -> &'static str {
        match self {
            Self::Text => "Text",
            Self::Image => "Image",
            Self::Table => "Table",
            Self::Combined => "Text+Image+Table",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    pub answer: String,
    #[serde(rename = "type")]
    pub qtype: QuestionType,
}

pub fn load_qa(path: &Path) -> Result<Vec<QaItem>, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("reading QA set {}: {e}", path.display())))?;
    let items = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect::<Result<Vec<QaItem>, _>>()?;
    if items.is_empty() {
        return Err(Error::Input(format!("QA set {} is empty", path.display())));
    }
    Ok(items)
}

fn scale_of(word: &str) -> Option<i32> {
    Some(match word {
        "thousand" | "k" => 3,
        "million" | "millions" | "mn" | "m" | "mm" => 6,
        "billion" | "billions" | "bn" | "b" => 9,
        "trillion" | "trillions" | "tn" | "t" => 12,
        _ => return None,
    })
}

fn is_currency_word(word: &str) -> bool {
    matches!(word, "usd" | "us" | "eur" | "gbp" | "jpy" | "dollars" | "dollar")
}

/// Splits a token like `1.5bn` into its numeric prefix and suffix.
fn split_number(tok: &str) -> Option<(&str, &str)> {
    let end = tok
        .char_indices()
        .find(|&(_, c)| !(c.is_ascii_digit() || c == '.'))
        .map_or(tok.len(), |(i, _)| i);
    let num = &tok[..end];
    let digits = num.chars().filter(char::is_ascii_digit).count();
    (digits > 0 && num.matches('.').count() <= 1 && !num.ends_with('.') && !num.starts_with('.'))
        .then(|| (num, &tok[end..]))
}

/// Exact decimal rendering of `num * 10^scale`, using digit strings only.
fn canonical_number(num: &str, scale: i32) -> String {
    let (int, frac) = num.split_once('.').unwrap_or((num, ""));
    let mut digits: String = format!("{int}{frac}").trim_start_matches('0').to_string();
    let mut exp = scale - frac.len() as i32;
    if digits.is_empty() {
        return "0".into();
    }
    while digits.ends_with('0') {
        digits.pop();
        exp += 1;
    }
    if exp >= 0 {
        digits + &"0".repeat(exp as usize)
    } else {
        let shift = (-exp) as usize;
        if digits.len() > shift {
            let (a, b) = digits.split_at(digits.len() - shift);
            format!("{a}.{b}")
        } else {
            format!("0.{}{digits}", "0".repeat(shift - digits.len()))
        }
    }
}

/// Lowercases, drops currency markers and thousands separators, and writes
/// numbers with scale words expanded, so `$1,000 million` and `1 billion`
/// normalize identically.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut cleaned = String::with_capacity(lower.len());
    for (i, &c) in chars.iter().enumerate() {
        let between_digits = |c: char| {
            c == ',' && i > 0 && chars[i - 1].is_ascii_digit() && chars.get(i + 1).is_some_and(char::is_ascii_digit)
        };
        if between_digits(c) {
            continue;
        }
        let keep = c.is_alphanumeric() || c == '.' || c == '%' || c == '-';
        cleaned.push(if keep && !matches!(c, '$' | '€' | '£' | '¥') { c } else { ' ' });
    }
    let toks: Vec<&str> = cleaned
        .split_whitespace()
        .map(|t| t.trim_matches(|c| c == '.' || c == '-'))
        .filter(|t| !t.is_empty() && !is_currency_word(t))
        .collect();
    let mut out: Vec<String> = Vec::with_capacity(toks.len());
    let mut i = 0;
    while i < toks.len() {
        let tok = toks[i];
        i += 1;
        let Some((num, suffix)) = split_number(tok) else {
            out.push(if tok == "percent" { "%".into() } else { tok.to_string() });
            continue;
        };
        let (mut scale, mut rest) = (0, suffix);
        if let Some(s) = scale_of(suffix) {
            scale = s;
            rest = "";
        }
        if rest.is_empty() {
            while let Some(s) = toks.get(i).and_then(|w| scale_of(w)) {
                scale += s;
                i += 1;
            }
        }
        out.push(canonical_number(num, scale));
        match rest {
            "" => {}
            "%" => out.push("%".into()),
            r => out.push(r.to_string()),
        }
    }
    out.join(" ")
}

/// Exact match after normalization.
pub fn answers_match(predicted: &str, gold: &str) -> bool {
    let g = normalize_answer(gold);
    !g.is_empty() && normalize_answer(predicted) == g
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub question: String,
    pub qtype: QuestionType,
    pub expected: String,
    pub predicted: String,
    pub correct: bool,
    pub tier: Option<Tier>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeAccuracy {
    pub qtype: QuestionType,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub per_type: Vec<TypeAccuracy>,
    pub overall: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let per_type = QuestionType::ALL
            .iter()
            .map(|&qtype| {
                let of: Vec<&EvalRow> = rows.iter().filter(|r| r.qtype == qtype).collect();
                let correct = of.iter().filter(|r| r.correct).count();
                TypeAccuracy {
                    qtype,
                    correct,
                    total: of.len(),
                    accuracy: if of.is_empty() { 0.0 } else { correct as f64 / of.len() as f64 },
                }
            })
            .collect();
        let overall = if rows.is_empty() {
            0.0
        } else {
            rows.iter().filter(|r| r.correct).count() as f64 / rows.len() as f64
        };
        Self { rows, per_type, overall }
    }

    /// Plain-text accuracy table, one column per question type.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18} {:>8} {:>8} {:>8}", "type", "correct", "total", "accuracy");
        for t in &self.per_type {
            let _ = writeln!(
                s,
                "{:<18} {:>8} {:>8} {:>7.1}%",
                t.qtype.label(),
                t.correct,
                t.total,
                100.0 * t.accuracy
            );
        }
        let _ = writeln!(
            s,
            "{:<18} {:>8} {:>8} {:>7.1}%",
            "Overall",
            self.rows.iter().filter(|r| r.correct).count(),
            self.rows.len(),
            100.0 * self.overall
        );
        s
    }
}

/// Answers every item. A failed answer counts as incorrect and is kept in its
/// row; an unreachable server aborts the run.
pub fn evaluate(
    items: &[QaItem],
    kb: &KnowledgeBase,
    config: &EngineConfig,
    embedder: &dyn Embedder,
    gateway: &Gateway,
) -> Result<EvalReport, Error> {
    let rows = items
        .iter()
        .map(|item| match answer(&item.question, kb, config, embedder, gateway) {
            Err(e) if e.source.class() == ErrorClass::Transport => Err(e.source),
            Ok(a) => Ok(EvalRow {
                question: item.question.clone(),
                qtype: item.qtype,
                expected: item.answer.clone(),
                correct: answers_match(&a.text, &item.answer),
                predicted: a.text,
                tier: Some(a.trace.tier),
                error: None,
            }),
            Err(e) => Ok(EvalRow {
                question: item.question.clone(),
                qtype: item.qtype,
                expected: item.answer.clone(),
                predicted: String::new(),
                correct: false,
                tier: e.trace.as_ref().map(|t| t.tier),
                error: Some(e.to_string()),
            }),
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(EvalReport::from_rows(rows))
}
