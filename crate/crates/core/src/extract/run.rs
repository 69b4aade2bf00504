use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::prompt::{
    build_image_prompt, build_table_prompt, parse_batch_response, parse_image_response, BatchParse,
    FigureExtraction, TableExtraction, EXTRACTION_SYSTEM_PROMPT,
};
use super::{partition_batches, ExtractError, ImageRecord, Region, RegionKind, RecordStatus, TableRecord};
use crate::config::EngineConfig;
use crate::embed::Embedder;
use crate::gateway::{ChatRequest, Gateway, GatewayError, DEFAULT_MULTIMODAL_IN_FLIGHT};
use crate::types::{ChunkId, Modality};

const EXTRACTION_TIMEOUT: Duration = Duration::from_secs(300);
const EXTRACTION_MAX_TOKENS: u32 = 4096;

/// Contents of `<stubs>/<region>.stub.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubFile {
    pub region_id: String,
    pub batch_id: String,
    pub attempt_count: usize,
    pub reason: String,
    pub resolved: bool,
}

impl StubFile {
    pub fn path(dir: &Path, region_id: &str) -> PathBuf {
        dir.join(format!("{region_id}.stub.json"))
    }

    fn write(&self, dir: &Path) -> Result<(), ExtractError> {
        let path = Self::path(dir, &self.region_id);
        let body = serde_json::to_string_pretty(self).expect("stub serializes");
        std::fs::write(&path, body + "\n").map_err(|source| ExtractError::Io { path, source })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractionReport {
    pub kind: RegionKind,
    pub regions: usize,
    pub batches: usize,
    pub batch_calls: usize,
    pub single_calls: usize,
    pub stubs_written: usize,
    pub stubs_resolved: usize,
    pub parsed: usize,
    pub failed: usize,
    pub skipped_non_data: usize,
    /// `(region id, cause)` for every region that ended `Failed`.
    pub failures: Vec<(String, String)>,
}

impl ExtractionReport {
    fn new(kind: RegionKind) -> Self {
        Self {
            kind,
            regions: 0,
            batches: 0,
            batch_calls: 0,
            single_calls: 0,
            stubs_written: 0,
            stubs_resolved: 0,
            parsed: 0,
            failed: 0,
            skipped_non_data: 0,
            failures: Vec::new(),
        }
    }

    /// Regions accounted for: parsed, failed or skipped as non-data.
    pub fn covered(&self) -> usize {
        self.parsed + self.failed + self.skipped_non_data
    }
}

#[derive(Debug, Clone)]
pub struct TableExtractionRun {
    pub records: Vec<TableRecord>,
    pub report: ExtractionReport,
}

#[derive(Debug, Clone)]
pub struct ImageExtraction {
    pub records: Vec<ImageRecord>,
    pub report: ExtractionReport,
}

enum Outcome<T> {
    Done { value: T, attempts: usize },
    Failed { reason: String, attempts: usize },
}

/// Runs `f` over `items` on up to `workers` threads; results keep input order.
fn pool<I: Sync, O: Send>(items: &[I], workers: usize, f: impl Fn(usize, &I) -> O + Sync) -> Vec<O> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<O>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let out = f(i, item);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|o| o.expect("every slot filled"))
        .collect()
}

struct Pass<'a, T> {
    gateway: &'a Gateway,
    stub_dir: Option<&'a Path>,
    retry_limit: usize,
    batch_size: usize,
    label: &'static str,
    build: fn(&[Region]) -> String,
    parse: fn(&[String], &str) -> BatchParse<T>,
}

struct PassState {
    successes: AtomicUsize,
    last_transport: Mutex<Option<GatewayError>>,
}

impl<T: Send> Pass<'_, T> {
    fn call(&self, regions: &[Region], state: &PassState) -> Result<BatchParse<T>, String> {
        let ids: Vec<String> = regions.iter().map(|r| r.id.clone()).collect();
        let mut req = ChatRequest::text(EXTRACTION_SYSTEM_PROMPT, (self.build)(regions))
            .with_images(regions.iter().map(|r| r.image_path.clone()));
        req.max_output_tokens = EXTRACTION_MAX_TOKENS;
        req.timeout = EXTRACTION_TIMEOUT;
        match self.gateway.chat(&req) {
            Ok(resp) => {
                state.successes.fetch_add(1, Ordering::Relaxed);
                Ok((self.parse)(&ids, &resp.text))
            }
            Err(e) => {
                let reason = e.to_string();
                if e.is_transport() {
                    *state.last_transport.lock().unwrap() = Some(e);
                }
                Err(reason)
            }
        }
    }

    fn run(&self, regions: &[Region], kind: RegionKind) -> Result<(Vec<Outcome<T>>, ExtractionReport), ExtractError> {
        let mut report = ExtractionReport::new(kind);
        report.regions = regions.len();
        let state = PassState {
            successes: AtomicUsize::new(0),
            last_transport: Mutex::new(None),
        };
        let batches = partition_batches(regions, self.batch_size);
        report.batches = batches.len();
        report.batch_calls = batches.len();

        let replies = pool(&batches, DEFAULT_MULTIMODAL_IN_FLIGHT, |_, batch| self.call(batch, &state));

        let mut outcomes: Vec<Option<Outcome<T>>> = (0..regions.len()).map(|_| None).collect();
        let mut stubs: Vec<(usize, StubFile)> = Vec::new();
        for (bi, (batch, reply)) in batches.iter().zip(replies).enumerate() {
            let offset = bi * self.batch_size;
            let batch_id = format!("{}-{bi:04}", self.label);
            let (mut parsed, missing) = match reply {
                Ok(p) => (p.parsed, p.missing.into_iter().map(|m| (m.id, m.reason)).collect()),
                Err(reason) => (
                    Default::default(),
                    batch.iter().map(|r| (r.id.clone(), reason.clone())).collect::<Vec<_>>(),
                ),
            };
            for (k, region) in batch.iter().enumerate() {
                if let Some(value) = parsed.remove(&region.id) {
                    outcomes[offset + k] = Some(Outcome::Done { value, attempts: 1 });
                }
            }
            for (id, reason) in missing {
                let k = batch.iter().position(|r| r.id == id).expect("missing id is in batch");
                stubs.push((
                    offset + k,
                    StubFile {
                        region_id: id,
                        batch_id: batch_id.clone(),
                        attempt_count: 1,
                        reason,
                        resolved: false,
                    },
                ));
            }
        }

        if let Some(dir) = self.stub_dir {
            std::fs::create_dir_all(dir).map_err(|source| ExtractError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
            for (_, stub) in &stubs {
                stub.write(dir)?;
            }
        }
        report.stubs_written = stubs.len();
        if !stubs.is_empty() {
            log::info!("{}: {} region(s) stubbed for single retry", self.label, stubs.len());
        }

        let singles = AtomicUsize::new(0);
        let retried = pool(&stubs, DEFAULT_MULTIMODAL_IN_FLIGHT, |_, (idx, stub)| {
            let region = std::slice::from_ref(&regions[*idx]);
            let mut stub = stub.clone();
            let mut result = None;
            for _ in 0..self.retry_limit {
                singles.fetch_add(1, Ordering::Relaxed);
                stub.attempt_count += 1;
                match self.call(region, &state) {
                    Ok(mut p) => match p.parsed.remove(&stub.region_id) {
                        Some(value) => {
                            stub.resolved = true;
                            result = Some(value);
                        }
                        None => stub.reason = p.missing.pop().map(|m| m.reason).unwrap_or_default(),
                    },
                    Err(reason) => stub.reason = reason,
                }
                if let Some(dir) = self.stub_dir {
                    stub.write(dir)?;
                }
                if result.is_some() {
                    break;
                }
            }
            let outcome = match result {
                Some(value) => Outcome::Done {
                    value,
                    attempts: stub.attempt_count,
                },
                None => Outcome::Failed {
                    reason: stub.reason.clone(),
                    attempts: stub.attempt_count,
                },
            };
            Ok::<_, ExtractError>((*idx, outcome))
        });
        report.single_calls = singles.into_inner();
        for r in retried {
            let (idx, outcome) = r?;
            if matches!(outcome, Outcome::Done { .. }) {
                report.stubs_resolved += 1;
            }
            outcomes[idx] = Some(outcome);
        }

        if !regions.is_empty() && state.successes.load(Ordering::Relaxed) == 0 {
            if let Some(e) = state.last_transport.into_inner().unwrap() {
                return Err(ExtractError::Gateway(e));
            }
        }
        let outcomes: Vec<Outcome<T>> = outcomes.into_iter().map(|o| o.expect("every region decided")).collect();
        for (r, o) in regions.iter().zip(&outcomes) {
            if let Outcome::Failed { reason, .. } = o {
                report.failed += 1;
                report.failures.push((r.id.clone(), reason.clone()));
            }
        }
        Ok((outcomes, report))
    }
}

/// Batched table pass with stub-and-retry fallback.
///
/// `stub_dir` is the dump directory for stub files; `None` keeps stubs in
/// memory only. Parsed summaries are embedded before returning.
pub fn extract_tables(
    regions: &[Region],
    config: &EngineConfig,
    gateway: &Gateway,
    embedder: &dyn Embedder,
    stub_dir: Option<&Path>,
) -> Result<TableExtractionRun, ExtractError> {
    let pass = Pass {
        gateway,
        stub_dir,
        retry_limit: config.retry_limit,
        batch_size: config.batch_size,
        label: "tables",
        build: build_table_prompt,
        parse: parse_batch_response,
    };
    let (outcomes, mut report) = pass.run(regions, RegionKind::Table)?;
    let mut records: Vec<TableRecord> = regions
        .iter()
        .zip(outcomes)
        .enumerate()
        .map(|(seq, (r, o))| {
            let id = ChunkId::new(r.doc.clone(), Modality::Table, seq as u32);
            match o {
                Outcome::Done {
                    value: TableExtraction { summary, structured },
                    attempts,
                } => TableRecord {
                    id,
                    region_id: r.id.clone(),
                    page: r.page,
                    summary,
                    structured,
                    status: RecordStatus::Parsed,
                    attempts,
                    failure: None,
                    embedding: None,
                },
                Outcome::Failed { reason, attempts } => TableRecord {
                    id,
                    region_id: r.id.clone(),
                    page: r.page,
                    summary: String::new(),
                    structured: serde_json::Value::Null,
                    status: RecordStatus::Failed,
                    attempts,
                    failure: Some(reason),
                    embedding: None,
                },
            }
        })
        .collect();
    let parsed: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].status == RecordStatus::Parsed)
        .collect();
    let texts: Vec<String> = parsed.iter().map(|&i| records[i].summary.clone()).collect();
    for (i, v) in parsed.iter().zip(embedder.embed_batch(&texts)?) {
        records[*i].embedding = Some(v);
    }
    report.parsed = parsed.len();
    Ok(TableExtractionRun { records, report })
}

/// Batched figure pass; mirrors [`extract_tables`]. Figures answered with the
/// non-data sentinel are kept as skipped records and never embedded.
pub fn extract_images(
    regions: &[Region],
    config: &EngineConfig,
    gateway: &Gateway,
    embedder: &dyn Embedder,
    stub_dir: Option<&Path>,
) -> Result<ImageExtraction, ExtractError> {
    let pass = Pass {
        gateway,
        stub_dir,
        retry_limit: config.retry_limit,
        batch_size: config.batch_size,
        label: "figures",
        build: build_image_prompt,
        parse: parse_image_response,
    };
    let (outcomes, mut report) = pass.run(regions, RegionKind::Figure)?;
    let mut records: Vec<ImageRecord> = regions
        .iter()
        .zip(outcomes)
        .enumerate()
        .map(|(seq, (r, o))| {
            let mut rec = ImageRecord {
                id: ChunkId::new(r.doc.clone(), Modality::Image, seq as u32),
                region_id: r.id.clone(),
                page: r.page,
                summary: String::new(),
                status: RecordStatus::Parsed,
                skipped_non_data: false,
                attempts: 0,
                failure: None,
                embedding: None,
            };
            match o {
                Outcome::Done { value, attempts } => {
                    rec.attempts = attempts;
                    match value {
                        FigureExtraction::Summary(s) => rec.summary = s,
                        FigureExtraction::NonData => rec.skipped_non_data = true,
                    }
                }
                Outcome::Failed { reason, attempts } => {
                    rec.status = RecordStatus::Failed;
                    rec.attempts = attempts;
                    rec.failure = Some(reason);
                }
            }
            rec
        })
        .collect();
    let indexable: Vec<usize> = (0..records.len()).filter(|&i| records[i].indexable()).collect();
    let texts: Vec<String> = indexable.iter().map(|&i| records[i].summary.clone()).collect();
    for (i, v) in indexable.iter().zip(embedder.embed_batch(&texts)?) {
        records[*i].embedding = Some(v);
    }
    report.parsed = indexable.len();
    report.skipped_non_data = records.iter().filter(|r| r.skipped_non_data).count();
    Ok(ImageExtraction { records, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashEmbedder;
    use crate::gateway::{ChatModel, OmittingModel, ScriptRule, ScriptedModel};
    use crate::http::RetryPolicy;
    use crate::extract::truth_path;
    use std::sync::Arc;

    fn fixture(dir: &Path, n: usize, kind: RegionKind) -> Vec<Region> {
        (0..n)
            .map(|i| {
                let prefix = if kind == RegionKind::Table { "t" } else { "f" };
                let path = dir.join(format!("{prefix}{i:03}.png"));
                std::fs::write(&path, b"png").unwrap();
                Region {
                    id: format!("{prefix}{i:03}"),
                    doc: "doc".into(),
                    page: 1 + i as u32 / 3,
                    kind,
                    bbox: [0.0, 0.0, 100.0, 50.0],
                    image_path: path,
                }
            })
            .collect()
    }

    fn gateway(model: impl ChatModel + 'static) -> Gateway {
        Gateway::new(Arc::new(model), 2, 5).with_retry(RetryPolicy::new(2).with_base_delay(Duration::from_millis(1)))
    }

    #[test]
    fn perfect_model_parses_everything_without_stubs() {
        let dir = tempfile::tempdir().unwrap();
        let regions = fixture(dir.path(), 12, RegionKind::Table);
        let gw = gateway(ScriptedModel::default());
        let run = extract_tables(&regions, &EngineConfig::default(), &gw, &HashEmbedder::new(64), None).unwrap();
        assert_eq!(run.report.parsed, 12);
        assert_eq!(run.report.stubs_written, 0);
        assert_eq!(run.report.batch_calls, 3);
        assert_eq!(gw.call_count(), 3);
        assert!(run.records.iter().all(|r| r.embedding.is_some()));
    }

    #[test]
    fn omissions_are_stubbed_and_resolved() {
        let dir = tempfile::tempdir().unwrap();
        let stubs = dir.path().join("stubs");
        let regions = fixture(dir.path(), 40, RegionKind::Table);
        let model = Arc::new(OmittingModel::new(ScriptedModel::default(), 0.2, 9));
        let expected = regions.iter().filter(|r| model.omits_in_batch(&r.id)).count();
        assert!(expected > 0);
        let gw = gateway(model);
        let run = extract_tables(&regions, &EngineConfig::default(), &gw, &HashEmbedder::new(64), Some(&stubs)).unwrap();
        assert_eq!(run.report.parsed, 40);
        assert_eq!(run.report.stubs_written, expected);
        assert_eq!(run.report.stubs_resolved, expected);
        let files = std::fs::read_dir(&stubs).unwrap().count();
        assert_eq!(files, expected);
        for r in regions.iter().filter(|r| run.records.iter().any(|x| x.region_id == r.id && x.attempts == 2)) {
            let stub: StubFile =
                serde_json::from_str(&std::fs::read_to_string(StubFile::path(&stubs, &r.id)).unwrap()).unwrap();
            assert!(stub.resolved);
            assert_eq!(stub.attempt_count, 2);
        }
    }

    #[test]
    fn always_failing_id_ends_failed() {
        let dir = tempfile::tempdir().unwrap();
        let regions = fixture(dir.path(), 7, RegionKind::Table);
        let model = OmittingModel::new(ScriptedModel::default(), 0.0, 1).with_always_fail(["t003".to_string()]);
        let gw = gateway(model);
        let run = extract_tables(&regions, &EngineConfig::default(), &gw, &HashEmbedder::new(64), None).unwrap();
        assert_eq!(run.report.parsed, 6);
        assert_eq!(run.report.failed, 1);
        let bad = run.records.iter().find(|r| r.region_id == "t003").unwrap();
        assert_eq!(bad.status, RecordStatus::Failed);
        assert_eq!(bad.attempts, 1 + EngineConfig::default().retry_limit);
        assert!(bad.embedding.is_none());
        assert_eq!(run.report.covered(), 7);
    }

    #[test]
    fn extraction_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let regions = fixture(dir.path(), 9, RegionKind::Table);
        let go = || {
            let gw = gateway(OmittingModel::new(ScriptedModel::default(), 0.3, 5));
            extract_tables(&regions, &EngineConfig::default(), &gw, &HashEmbedder::new(32), None)
                .unwrap()
                .records
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn short_figure_summary_is_retried_singly() {
        let dir = tempfile::tempdir().unwrap();
        let regions = fixture(dir.path(), 3, RegionKind::Figure);
        std::fs::write(truth_path(&regions[1].image_path), r#"{"summary":"Too short."}"#).unwrap();
        std::fs::write(truth_path(&regions[2].image_path), r#"{"non_data":true}"#).unwrap();
        let gw = gateway(ScriptedModel::default());
        let run = extract_images(&regions, &EngineConfig::default(), &gw, &HashEmbedder::new(32), None).unwrap();
        assert_eq!(run.report.stubs_written, 1);
        assert_eq!(run.report.single_calls, EngineConfig::default().retry_limit);
        assert_eq!(run.report.parsed, 1);
        assert_eq!(run.report.failed, 1);
        assert_eq!(run.report.skipped_non_data, 1);
        assert_eq!(run.report.covered(), 3);
        assert!(run.records[2].skipped_non_data && !run.records[2].indexable());
        assert!(run.records[2].summary.is_empty());
    }

    #[test]
    fn unreachable_server_is_a_gateway_error() {
        let dir = tempfile::tempdir().unwrap();
        let regions = fixture(dir.path(), 2, RegionKind::Table);
        let gw = gateway(crate::gateway::FlakyModel::new(ScriptedModel::default(), usize::MAX));
        let err = extract_tables(&regions, &EngineConfig::default(), &gw, &HashEmbedder::new(32), None).unwrap_err();
        assert!(matches!(err, ExtractError::Gateway(ref e) if e.is_transport()));
    }

    #[test]
    fn scripted_rule_can_break_one_batch() {
        let dir = tempfile::tempdir().unwrap();
        let regions = fixture(dir.path(), 2, RegionKind::Table);
        let model = ScriptedModel::new(vec![ScriptRule {
            match_substring: "FILE t000\nFILE t001".into(),
            response_text: "garbage".into(),
        }]);
        let run = extract_tables(&regions, &EngineConfig::default(), &gateway(model), &HashEmbedder::new(32), None)
            .unwrap();
        assert_eq!(run.report.stubs_written, 2);
        assert_eq!(run.report.stubs_resolved, 2);
    }
}
