//! Threshold calibration by grid sweep.
//!
//! Stage one varies `theta_text` over 0.55..=0.85 with the table and image
//! thresholds held at their configured values. Stage two fixes the chosen
//! `theta_text` and sweeps `(theta_table, theta_image)` over 0.55..=0.75.
//! Each point scores `accuracy + w * precision` (w = 0.25 by default); points
//! whose largest prompt exceeds the token budget are infeasible.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::embed::Embedder;
use crate::error::Error;
use crate::evaluate::answers_match;
use crate::gateway::{ChatRequest, Gateway};
use crate::retrieve::{is_deferral, retrieve, Query};
use crate::store::KnowledgeBase;
use crate::types::ChunkId;

pub const DEFAULT_PRECISION_WEIGHT: f64 = 0.25;
/// `(low, high, step)` in hundredths.
pub const TEXT_GRID: (u32, u32, u32) = (55, 85, 5);
pub const TABLE_IMAGE_GRID: (u32, u32, u32) = (55, 75, 5);

/// Grid values from hundredths, so 0.70 is exactly `70.0 / 100.0`.
pub fn grid((lo, hi, step): (u32, u32, u32)) -> Vec<f64> {
    (lo..=hi).step_by(step as usize).map(|v| f64::from(v) / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevSample {
    pub query: String,
    #[serde(default)]
    pub answer: String,
    #[serde(default)]
    pub gold_text: Vec<ChunkId>,
    #[serde(default)]
    pub gold_table: Vec<ChunkId>,
    #[serde(default)]
    pub gold_image: Vec<ChunkId>,
    #[serde(default)]
    pub unanswerable: bool,
}

impl DevSample {
    pub fn gold(&self) -> impl Iterator<Item = &ChunkId> {
        self.gold_text.iter().chain(&self.gold_table).chain(&self.gold_image)
    }
}

pub fn load_dev_set(path: &Path) -> Result<Vec<DevSample>, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("reading dev set {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: DevSample = serde_json::from_str(line)
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if s.gold().next().is_none() && !s.unanswerable {
            return Err(Error::Input(format!(
                "{}:{}: sample has no gold ids and is not marked unanswerable",
                path.display(),
                i + 1
            )));
        }
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::Input(format!("dev set {} is empty", path.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Text,
    TableImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub stage: Stage,
    pub theta_text: f64,
    pub theta_table: f64,
    pub theta_image: f64,
    /// Retrieved contexts that are gold, over all retrieved contexts.
    pub context_precision: f64,
    pub qa_accuracy: f64,
    pub mean_context_tokens: f64,
    pub max_context_tokens: usize,
    pub feasible: bool,
    pub score: f64,
}

impl CalibrationPoint {
    pub fn triplet(&self) -> (f64, f64, f64) {
        (self.theta_text, self.theta_table, self.theta_image)
    }
}

/// How answers are judged while sweeping.
pub enum QaMode<'a> {
    /// Correct iff every gold context was retrieved (unanswerable: nothing
    /// retrieved). Needs no model.
    Scripted,
    /// One real model call per sample per point.
    Live(&'a Gateway),
}

pub struct Calibrator<'a> {
    pub kb: &'a KnowledgeBase,
    pub embedder: &'a dyn Embedder,
    pub base: EngineConfig,
    pub budget: usize,
    pub precision_weight: f64,
    pub qa: QaMode<'a>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationOutcome {
    pub text_points: Vec<CalibrationPoint>,
    pub table_image_points: Vec<CalibrationPoint>,
    pub theta_text: f64,
    pub theta_table: f64,
    pub theta_image: f64,
}

impl<'a> Calibrator<'a> {
    pub fn new(kb: &'a KnowledgeBase, embedder: &'a dyn Embedder, base: &EngineConfig) -> Self {
        Self {
            kb,
            embedder,
            budget: base.max_context_tokens,
            base: base.clone(),
            precision_weight: DEFAULT_PRECISION_WEIGHT,
            qa: QaMode::Scripted,
        }
    }

    fn queries(&self, dev: &[DevSample]) -> Result<Vec<Query>, Error> {
        dev.iter()
            .map(|s| Ok(Query::new(&s.query, self.embedder, &self.base)?))
            .collect()
    }

    fn evaluate(
        &self,
        stage: Stage,
        (t, tb, im): (f64, f64, f64),
        dev: &[DevSample],
        queries: &[Query],
    ) -> Result<CalibrationPoint, Error> {
        let mut retrieved = 0usize;
        let mut relevant = 0usize;
        let mut correct = 0usize;
        let mut tokens = Vec::with_capacity(dev.len());
        for (s, q) in dev.iter().zip(queries) {
            let mut q = q.clone();
            q.config.theta_text = t;
            q.config.theta_table = tb;
            q.config.theta_image = im;
            let plan = retrieve(&q, self.kb)?;
            let ctx: HashSet<&ChunkId> = plan.trace.contexts.iter().collect();
            let gold: HashSet<&ChunkId> = s.gold().collect();
            retrieved += ctx.len();
            relevant += ctx.intersection(&gold).count();
            tokens.push(plan.trace.prompt_tokens);
            let ok = match self.qa {
                QaMode::Scripted if s.unanswerable => ctx.is_empty(),
                QaMode::Scripted => !gold.is_empty() && gold.is_subset(&ctx),
                QaMode::Live(gw) => {
                    let reply = gw.chat(&ChatRequest::text(plan.system, plan.user))?;
                    if s.unanswerable {
                        is_deferral(&reply.text)
                    } else {
                        answers_match(&reply.text, &s.answer)
                    }
                }
            };
            correct += usize::from(ok);
        }
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let context_precision = frac(relevant, retrieved);
        let qa_accuracy = frac(correct, dev.len());
        let max_context_tokens = tokens.iter().copied().max().unwrap_or(0);
        Ok(CalibrationPoint {
            stage,
            theta_text: t,
            theta_table: tb,
            theta_image: im,
            context_precision,
            qa_accuracy,
            mean_context_tokens: frac(tokens.iter().sum(), tokens.len()),
            max_context_tokens,
            feasible: max_context_tokens <= self.budget,
            score: qa_accuracy + self.precision_weight * context_precision,
        })
    }

    /// Evaluates grid points in parallel; output keeps grid order.
    fn sweep(&self, stage: Stage, triplets: Vec<(f64, f64, f64)>, dev: &[DevSample]) -> Result<Vec<CalibrationPoint>, Error> {
        let queries = self.queries(dev)?;
        let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).min(triplets.len().max(1));
        let per = triplets.len().div_ceil(workers.max(1)).max(1);
        let results: Vec<Result<Vec<CalibrationPoint>, Error>> = std::thread::scope(|s| {
            let handles: Vec<_> = triplets
                .chunks(per)
                .map(|part| {
                    let queries = &queries;
                    s.spawn(move || part.iter().map(|&t| self.evaluate(stage, t, dev, queries)).collect())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("calibration worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(triplets.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    pub fn sweep_text(&self, dev: &[DevSample]) -> Result<Vec<CalibrationPoint>, Error> {
        let triplets = grid(TEXT_GRID)
            .into_iter()
            .map(|t| (t, self.base.theta_table, self.base.theta_image))
            .collect();
        self.sweep(Stage::Text, triplets, dev)
    }

    pub fn sweep_table_image(&self, dev: &[DevSample], theta_text: f64) -> Result<Vec<CalibrationPoint>, Error> {
        let g = grid(TABLE_IMAGE_GRID);
        let triplets = g
            .iter()
            .flat_map(|&tb| g.iter().map(move |&im| (theta_text, tb, im)))
            .collect();
        self.sweep(Stage::TableImage, triplets, dev)
    }

    pub fn calibrate(&self, dev: &[DevSample]) -> Result<CalibrationOutcome, Error> {
        if dev.is_empty() {
            return Err(Error::Input("dev set is empty".into()));
        }
        let text_points = self.sweep_text(dev)?;
        let (theta_text, _, _) = select_triplet(&text_points, self.budget)?;
        let table_image_points = self.sweep_table_image(dev, theta_text)?;
        let (theta_text, theta_table, theta_image) = select_triplet(&table_image_points, self.budget)?;
        Ok(CalibrationOutcome {
            text_points,
            table_image_points,
            theta_text,
            theta_table,
            theta_image,
        })
    }
}

/// Best feasible point by score; ties go to the higher `theta_text`, then
/// `theta_table`, then `theta_image`. Independent of input order.
pub fn select_triplet(points: &[CalibrationPoint], budget: usize) -> Result<(f64, f64, f64), Error> {
    // Scores are compared at 1e-9 resolution so float noise cannot break ties.
    let key = |p: &CalibrationPoint| {
        (
            (p.score * 1e9).round() as i64,
            (p.theta_text * 1e6).round() as i64,
            (p.theta_table * 1e6).round() as i64,
            (p.theta_image * 1e6).round() as i64,
        )
    };
    points
        .iter()
        .filter(|p| p.max_context_tokens <= budget)
        .max_by_key(|p| key(p))
        .map(CalibrationPoint::triplet)
        .ok_or_else(|| {
            Error::Calibration(format!(
                "no grid point keeps every prompt within {budget} tokens; raise max_context_tokens"
            ))
        })
}

pub const CSV_HEADER: &str =
    "stage,theta_text,theta_table,theta_image,context_precision,qa_accuracy,mean_context_tokens,max_context_tokens,feasible,score";

pub fn write_csv(points: &[CalibrationPoint], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for p in points {
        writeln!(
            w,
            "{},{:.2},{:.2},{:.2},{:.6},{:.6},{:.2},{},{},{:.6}",
            match p.stage {
                Stage::Text => "text",
                Stage::TableImage => "table_image",
            },
            p.theta_text,
            p.theta_table,
            p.theta_image,
            p.context_precision,
            p.qa_accuracy,
            p.mean_context_tokens,
            p.max_context_tokens,
            p.feasible,
            p.score
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(t: f64, tb: f64, im: f64, score: f64, tokens: usize) -> CalibrationPoint {
        CalibrationPoint {
            stage: Stage::TableImage,
            theta_text: t,
            theta_table: tb,
            theta_image: im,
            context_precision: 0.0,
            qa_accuracy: score,
            mean_context_tokens: tokens as f64,
            max_context_tokens: tokens,
            feasible: true,
            score,
        }
    }

    #[test]
    fn grid_sizes() {
        let t = grid(TEXT_GRID);
        assert_eq!(t.len(), 7);
        assert_eq!(t[0], 0.55);
        assert_eq!(t[3], 0.70);
        assert_eq!(t[6], 0.85);
        assert_eq!(grid(TABLE_IMAGE_GRID).len(), 5);
    }

    #[test]
    fn ties_prefer_tighter_thresholds() {
        let pts = [pt(0.70, 0.60, 0.55, 1.0, 10), pt(0.70, 0.65, 0.55, 1.0, 10), pt(0.65, 0.75, 0.75, 1.0, 10)];
        assert_eq!(select_triplet(&pts, 100).unwrap(), (0.70, 0.65, 0.55));
    }

    #[test]
    fn infeasible_points_are_skipped_and_all_infeasible_errors() {
        let pts = [pt(0.55, 0.55, 0.55, 2.0, 500), pt(0.70, 0.65, 0.55, 1.0, 50)];
        assert_eq!(select_triplet(&pts, 100).unwrap(), (0.70, 0.65, 0.55));
        let err = select_triplet(&pts, 10).unwrap_err();
        assert!(err.to_string().contains("max_context_tokens"));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut buf = Vec::new();
        write_csv(&[pt(0.7, 0.65, 0.55, 1.0, 5)], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 2);
        assert!(s.lines().nth(1).unwrap().starts_with("table_image,0.70,0.65,0.55,"));
    }

    proptest! {
        #[test]
        fn selection_ignores_order(scores in proptest::collection::vec(0u8..4, 25), seed in any::<u64>()) {
            let g = grid(TABLE_IMAGE_GRID);
            let mut pts: Vec<CalibrationPoint> = g.iter()
                .flat_map(|&tb| g.iter().map(move |&im| (tb, im)))
                .zip(&scores)
                .map(|((tb, im), &s)| pt(0.7, tb, im, f64::from(s) / 4.0, 1))
                .collect();
            let a = select_triplet(&pts, 10).unwrap();
            let n = pts.len();
            for i in 0..n {
                let j = (seed as usize).wrapping_add(i * 7) % n;
                pts.swap(i, j);
            }
            prop_assert_eq!(select_triplet(&pts, 10).unwrap(), a);
        }
    }
}
