//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use finrag_core::calibrate::{select_triplet, Calibrator};
use finrag_core::chunk::{breakpoints, chunk_document};
use finrag_core::extract::{extract_tables, load_manifest, partition_batches, RecordStatus, RegionKind, StubFile};
use finrag_core::gateway::{Gateway, OmittingModel, ScriptedModel};
use finrag_core::http::RetryPolicy;
use finrag_core::ingest::ingest;
use finrag_core::retrieve::{decide_tier, retrieve, Query, Tier, TierTrace};
use finrag_core::store::{chunk_store_path, KnowledgeBase};
use finrag_core::synthetic::{calibration_fixture, redundant_corpus, write_filing, Axes, KbBuilder, PlantedEmbedder};
use finrag_core::vindex::{HnswParams, IndexEntry, ModalityIndex};
use finrag_core::{ChunkId, EmbeddingVector, EngineConfig, HashEmbedder, Modality};

type Verdict = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Verdict + 'a>);

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        if let Ok(u) = EmbeddingVector::normalize(v) {
            return u;
        }
    }
}

fn reduction() -> Verdict {
    let k = 40;
    let (text, cfg) = redundant_corpus(k);
    let emb = HashEmbedder::new(cfg.embed_dim);
    let t = Instant::now();
    let report = chunk_document("planted", &text, &cfg, &emb).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let ratio = report.reduction_ratio();
    // Each paragraph sits in exactly two windows; merging keeps one copy.
    let expected = 1.0 - k as f64 / (2 * (k - 1)) as f64;
    check(
        (0.40..=0.70).contains(&ratio) && elapsed < Duration::from_secs(30),
        format!(
            "token ratio {ratio:.4} (chunk-count oracle {expected:.4}), {} -> {} chunks, {:.2}s",
            report.pre_merge_chunks,
            report.chunks.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn index_scale() -> Verdict {
    let dim = 128;
    let mut rng = ChaCha8Rng::seed_from_u64(0x1dea);
    let mut big = ModalityIndex::hnsw(dim, HnswParams::default());
    let t = Instant::now();
    for i in 0..100_000u32 {
        big.insert(IndexEntry {
            id: ChunkId::new("scale", Modality::Text, i),
            vector: random_unit(&mut rng, dim),
        })
        .map_err(|e| e.to_string())?;
    }
    let build = t.elapsed();
    let mut lat: Vec<Duration> = (0..1000)
        .map(|_| {
            let q = random_unit(&mut rng, dim);
            let t = Instant::now();
            let hits = big.search_topk(&q, 10).expect("search");
            assert_eq!(hits.len(), 10);
            t.elapsed()
        })
        .collect();
    lat.sort();
    let median = lat[lat.len() / 2];
    let max = *lat.last().unwrap();
    drop(big);

    let mut hnsw = ModalityIndex::hnsw(dim, HnswParams::default());
    let mut flat = ModalityIndex::flat(dim);
    for i in 0..10_000u32 {
        let e = IndexEntry {
            id: ChunkId::new("recall", Modality::Text, i),
            vector: random_unit(&mut rng, dim),
        };
        flat.insert(e.clone()).map_err(|e| e.to_string())?;
        hnsw.insert(e).map_err(|e| e.to_string())?;
    }
    let mut found = 0usize;
    for _ in 0..1000 {
        let q = random_unit(&mut rng, dim);
        let truth: HashSet<ChunkId> = flat.search_topk(&q, 10).unwrap().into_iter().map(|h| h.id).collect();
        found += hnsw.search_topk(&q, 10).unwrap().iter().filter(|h| truth.contains(&h.id)).count();
    }
    let recall = found as f64 / 10_000.0;
    check(
        median < Duration::from_millis(100) && max < Duration::from_secs(1) && recall >= 0.95,
        format!(
            "1e5 build {:.1}s, median {:.3}ms, max {:.3}ms, recall@10 {recall:.4} at 1e4",
            build.as_secs_f64(),
            median.as_secs_f64() * 1e3,
            max.as_secs_f64() * 1e3
        ),
    )
}

fn tier_exactness(scratch: &Path) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x71e5);
    let dim = 64;
    let cfg = EngineConfig {
        embed_dim: dim,
        ..Default::default()
    };
    let mut mismatches = 0;
    let mut text_only = 0;
    for kb_no in 0..500 {
        let root = scratch.join(format!("kb{kb_no}"));
        let mut axes = Axes::new(dim);
        let mut emb = PlantedEmbedder::new(dim);
        let q = axes.fresh();
        emb.plant("query", axes.unit(q));
        let mut b = KbBuilder::new(&root, &cfg, "r").map_err(|e| e.to_string())?;
        for i in 0..rng.random_range(0..=20) {
            // Planted similarities avoid a 1e-3 band around the threshold so
            // that f32 storage cannot move a chunk across it.
            let s = loop {
                let s: f64 = rng.random_range(0.3..0.95);
                if (s - 0.70).abs() > 1e-3 {
                    break s;
                }
            };
            b.text(&format!("chunk {i}"), axes.at(q, s)).map_err(|e| e.to_string())?;
        }
        for i in 0..rng.random_range(0..=10) {
            b.text(&format!("noise {i}"), axes.unit(axes.clone().fresh())).map_err(|e| e.to_string())?;
            let _ = axes.fresh();
        }
        let kb = b.finish().map_err(|e| e.to_string())?;
        let query = Query::new("query", &emb, &cfg).map_err(|e| e.to_string())?;
        let idx = kb.index(Modality::Text);
        let oracle_hits = idx
            .ids()
            .iter()
            .filter(|id| {
                let v = idx.vector(id).unwrap();
                let s: f64 = v
                    .iter()
                    .zip(query.embedding.as_slice())
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum();
                s >= 0.70
            })
            .count();
        let oracle = if oracle_hits >= 6 { Tier::TextOnly } else { Tier::Fallback };
        let plan = retrieve(&query, &kb).map_err(|e| e.to_string())?;
        let direct = decide_tier(&plan.trace.text_hits, 6);
        if plan.trace.tier != oracle || direct != oracle {
            mismatches += 1;
        }
        text_only += usize::from(oracle == Tier::TextOnly);
        drop(kb);
        let _ = std::fs::remove_dir_all(&root);
    }
    check(
        mismatches == 0,
        format!("500 KBs, {mismatches} mismatches ({text_only} text-only, {} fallback)", 500 - text_only),
    )
}

fn extraction_coverage(scratch: &Path) -> Verdict {
    let fx = write_filing(&scratch.join("in"), "cov", 100, 0).map_err(|e| e.to_string())?;
    let regions = load_manifest(&fx.manifest_path).map_err(|e| e.to_string())?.of_kind(RegionKind::Table);
    let cfg = EngineConfig::default();
    let model = Arc::new(OmittingModel::new(ScriptedModel::new(vec![]), 0.2, 2024));
    let expected_stubs = regions.iter().filter(|r| model.omits_in_batch(&r.id)).count();
    let gw = Gateway::new(model.clone(), cfg.retry_limit, cfg.batch_size)
        .with_retry(RetryPolicy::new(cfg.retry_limit).with_base_delay(Duration::ZERO));
    let stubs = scratch.join("stubs");
    std::fs::create_dir_all(&stubs).map_err(|e| e.to_string())?;
    let emb = HashEmbedder::new(cfg.embed_dim);
    let run = extract_tables(&regions, &cfg, &gw, &emb, Some(&stubs)).map_err(|e| e.to_string())?;
    let parsed = run.records.iter().filter(|r| r.status == RecordStatus::Parsed).count();
    let files: Vec<StubFile> = std::fs::read_dir(&stubs)
        .map_err(|e| e.to_string())?
        .flatten()
        .map(|e| serde_json::from_str(&std::fs::read_to_string(e.path()).unwrap()).unwrap())
        .collect();
    let resolved = files.iter().filter(|s| s.resolved).count();
    check(
        parsed == 100 && expected_stubs > 0 && files.len() == expected_stubs && resolved == files.len(),
        format!(
            "{parsed}/100 parsed, {} stub files ({expected_stubs} omissions planted), {resolved} resolved",
            files.len()
        ),
    )
}

fn batching() -> Verdict {
    let mut checked = 0;
    for n in 0..=1000usize {
        let items: Vec<usize> = (0..n).collect();
        for b in 1..=64usize {
            let batches = partition_batches(&items, b);
            let mut want = 0;
            let mut left = n;
            while left > 0 {
                want += 1;
                left = left.saturating_sub(b);
            }
            let flat: Vec<usize> = batches.iter().flatten().copied().collect();
            if batches.len() != want || batches.iter().any(|x| x.len() > b || x.is_empty()) || flat != items {
                return Err(format!("N={n} B={b}: {} batches, expected {want}", batches.len()));
            }
            checked += 1;
        }
    }
    check(true, format!("{checked} (N, B) pairs"))
}

fn calibration(scratch: &Path) -> Verdict {
    let (kb, emb, dev, cfg) = calibration_fixture(scratch, 3).map_err(|e| e.to_string())?;
    let out = Calibrator::new(&kb, &emb, &cfg).calibrate(&dev).map_err(|e| e.to_string())?;
    let selected = select_triplet(&out.table_image_points, cfg.max_context_tokens).map_err(|e| e.to_string())?;
    // Selection reported in the paper.
    let paper = (0.70, 0.65, 0.55);
    check(
        out.text_points.len() == 7 && out.table_image_points.len() == 25 && selected == paper,
        format!(
            "{} + {} points, selected {:?}",
            out.text_points.len(),
            out.table_image_points.len(),
            selected
        ),
    )
}

/// Brute-force split positions: inclusive linear-interpolation percentile
/// over `1 - cos`, strict comparison, nothing below four distances.
fn oracle_breakpoints(vs: &[Vec<f32>], pct: f64) -> BTreeSet<usize> {
    let cos = |a: &[f32], b: &[f32]| {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
        let na: f64 = a.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        (dot / (na * nb)).clamp(-1.0, 1.0)
    };
    let d: Vec<f64> = vs.windows(2).map(|w| 1.0 - cos(&w[0], &w[1])).collect();
    if d.len() < 4 {
        return BTreeSet::new();
    }
    let mut s = d.clone();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (s.len() - 1) as f64 * pct / 100.0;
    let lo = h.floor() as usize;
    let cut = if lo + 1 < s.len() { s[lo] + (h - lo as f64) * (s[lo + 1] - s[lo]) } else { s[lo] };
    (0..d.len()).filter(|&j| d[j] > cut).map(|j| j + 1).collect()
}

fn breakpoint_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xb9ea);
    let mut splits = 0;
    for case in 0..200 {
        let len = rng.random_range(2..=12);
        let dim = 8;
        let pool: Vec<EmbeddingVector> = (0..rng.random_range(2..=len)).map(|_| random_unit(&mut rng, dim)).collect();
        // Draw from a small pool so some blocks repeat sentences exactly.
        let block: Vec<EmbeddingVector> = (0..len).map(|_| pool.choose(&mut rng).unwrap().clone()).collect();
        let got = breakpoints(&block, 95.0).map_err(|e| e.to_string())?;
        let raw: Vec<Vec<f32>> = block.iter().map(|v| v.as_slice().to_vec()).collect();
        let want = oracle_breakpoints(&raw, 95.0);
        if got != want {
            return Err(format!("block {case} (len {len}): got {got:?}, oracle {want:?}"));
        }
        splits += got.len();
    }
    check(true, format!("200 blocks agree ({splits} splits)"))
}

fn seeded_queries(n: usize) -> Vec<String> {
    let mut vocab: Vec<String> = "liquidity capital reserves funding cash covenant dividend payout ratio per share \
                                  quarter figure charts segment margin trends widened series chart spans fiscal years"
        .split(' ')
        .map(String::from)
        .collect();
    vocab.extend((0..14).flat_map(|i| (0..4).map(move |j| format!("n{i}k{j}"))));
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e7);
    let mut out = vec![
        "liquidity capital reserves funding cash covenant".to_string(),
        "dividend payout ratio per share".to_string(),
    ];
    while out.len() < n {
        // Some queries stay inside the liquidity vocabulary so both tiers occur.
        let pool = if rng.random_bool(0.4) { &vocab[..6] } else { &vocab[..] };
        let k = rng.random_range(3..=6);
        let words: Vec<&str> = (0..k).map(|_| pool.choose(&mut rng).unwrap().as_str()).collect();
        out.push(words.join(" "));
    }
    out
}

fn traces(kb: &KnowledgeBase, queries: &[String]) -> Result<Vec<TierTrace>, String> {
    let emb = HashEmbedder::new(kb.config().embed_dim);
    queries
        .iter()
        .map(|q| {
            let q = Query::new(q, &emb, kb.config()).map_err(|e| e.to_string())?;
            retrieve(&q, kb).map(|p| p.trace).map_err(|e| e.to_string())
        })
        .collect()
}

fn build_offline(inputs: &Path, kb_root: &Path) -> Result<KnowledgeBase, String> {
    let fx = write_filing(inputs, "acme", 30, 20).map_err(|e| e.to_string())?;
    let mut cfg = EngineConfig::default();
    cfg.apply_file(&fx.config_path).map_err(|e| e.to_string())?;
    let emb = HashEmbedder::new(cfg.embed_dim);
    let model = OmittingModel::new(ScriptedModel::new(vec![]), 0.2, 5);
    let gw = Gateway::new(Arc::new(model), cfg.retry_limit, cfg.batch_size)
        .with_retry(RetryPolicy::new(cfg.retry_limit).with_base_delay(Duration::ZERO));
    let mut kb = KnowledgeBase::init(kb_root, &cfg).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(&fx.text_path).map_err(|e| e.to_string())?;
    let manifest = load_manifest(&fx.manifest_path).map_err(|e| e.to_string())?;
    ingest(&mut kb, "acme", &text, Some(&manifest), &emb, &gw).map_err(|e| e.to_string())?;
    Ok(kb)
}

fn persistence(scratch: &Path) -> Verdict {
    let root = scratch.join("kb");
    let queries = seeded_queries(100);
    let kb = build_offline(&scratch.join("in"), &root)?;
    let before = traces(&kb, &queries)?;
    drop(kb);
    let reopened = KnowledgeBase::open(&root).map_err(|e| e.to_string())?;
    let after = traces(&reopened, &queries)?;
    let differ = before.iter().zip(&after).filter(|(a, b)| a != b).count();
    let fallback = before.iter().filter(|t| t.tier == Tier::Fallback).count();
    check(
        differ == 0 && before.len() == 100,
        format!("100 queries, {differ} differing traces ({} text-only, {fallback} fallback)", 100 - fallback),
    )
}

fn determinism(scratch: &Path) -> Verdict {
    let queries = seeded_queries(100);
    let a = build_offline(&scratch.join("a_in"), &scratch.join("a"))?;
    let b = build_offline(&scratch.join("b_in"), &scratch.join("b"))?;
    let mut differing = Vec::new();
    for m in Modality::ALL {
        let x = std::fs::read(chunk_store_path(a.root(), m)).map_err(|e| e.to_string())?;
        let y = std::fs::read(chunk_store_path(b.root(), m)).map_err(|e| e.to_string())?;
        if x != y || x.is_empty() {
            differing.push(m.as_str());
        }
    }
    let ta = traces(&a, &queries)?;
    let tb = traces(&b, &queries)?;
    let trace_diff = ta.iter().zip(&tb).filter(|(x, y)| x != y).count();
    check(
        differing.is_empty() && trace_diff == 0,
        format!("chunk stores differing: {differing:?}, traces differing: {trace_diff}/100"),
    )
}

fn main() {
    let scratch = tempfile::tempdir().expect("scratch dir");
    let sub = |name: &str| {
        let p = scratch.path().join(name);
        std::fs::create_dir_all(&p).unwrap();
        p
    };
    let criteria: Vec<Criterion> = vec![
        ("context reduction", Box::new(reduction)),
        ("index scale", Box::new(index_scale)),
        ("tier decision exactness", Box::new(|| tier_exactness(&sub("tier")))),
        ("extraction coverage", Box::new(|| extraction_coverage(&sub("coverage")))),
        ("batching arithmetic", Box::new(batching)),
        ("calibration grids", Box::new(|| calibration(&sub("calibration")))),
        ("breakpoint oracle", Box::new(breakpoint_oracle)),
        ("persistence fidelity", Box::new(|| persistence(&sub("persistence")))),
        ("determinism", Box::new(|| determinism(&sub("determinism")))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let verdict = f();
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
