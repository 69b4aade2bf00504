//! `finrag`: ingest filings, ask questions, calibrate thresholds.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 model or embedding server unreachable.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::json;

use finrag_core::calibrate::{load_dev_set, write_csv, Calibrator, QaMode};
use finrag_core::evaluate::{evaluate, load_qa};
use finrag_core::extract::{figures_from_sidecar, load_manifest, StubFile};
use finrag_core::gateway::{ChatModel, Gateway, HttpChatModel, OmittingModel, ScriptedModel};
use finrag_core::ingest::ingest;
use finrag_core::retrieve::{answer, Answer, Tier};
use finrag_core::store::{KnowledgeBase, StoreError};
use finrag_core::{ConfigError, Embedder, EmbedderSpec, EngineConfig, Error, ErrorClass, HashEmbedder, Modality};

#[derive(Parser)]
#[command(name = "finrag", version, about = "Multimodal retrieval over financial filings")]
struct Cli {
    /// `key = value` config file layered over the defaults (or over the KB snapshot).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    /// Use the scripted model and the token-hash embedder; no network.
    #[arg(long, global = true)]
    offline: bool,
    /// JSONL rules for the scripted model.
    #[arg(long, global = true, requires = "offline")]
    mock_rules: Option<PathBuf>,
    /// Fraction of batch sections the scripted model drops.
    #[arg(long, global = true, requires = "offline", default_value_t = 0.0)]
    mock_omit_rate: f64,
    #[arg(long, global = true, requires = "offline", default_value_t = 0)]
    mock_seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk, extract and index one document.
    Ingest {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        doc: String,
        /// Plain text of the filing.
        #[arg(long)]
        text: PathBuf,
        /// Region manifest (JSONL) of tables and figures.
        #[arg(long, conflicts_with = "figures_sidecar")]
        regions: Option<PathBuf>,
        /// Embedded-image sidecar; every image becomes a figure region.
        #[arg(long)]
        figures_sidecar: Option<PathBuf>,
    },
    /// Answer a question, or read questions from stdin with --repl.
    Query {
        #[arg(long)]
        kb: PathBuf,
        /// Print the tier decision and retrieved contexts.
        #[arg(long)]
        trace: bool,
        #[arg(long, conflicts_with = "question")]
        repl: bool,
        #[arg(required_unless_present = "repl")]
        question: Option<String>,
    },
    /// Sweep retrieval thresholds on a dev set and pick the best triplet.
    Calibrate {
        #[arg(long)]
        kb: PathBuf,
        /// JSONL dev set with gold chunk ids.
        #[arg(long)]
        dev: PathBuf,
        /// Write every grid point here as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Judge answers with the model instead of gold-context coverage.
        #[arg(long)]
        live: bool,
        /// Token budget per prompt; defaults to max_context_tokens.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 0.25)]
        precision_weight: f64,
    },
    /// Show knowledge base contents.
    Stats {
        #[arg(long)]
        kb: PathBuf,
    },
    /// Exact-match accuracy per question type.
    Eval {
        #[arg(long)]
        kb: PathBuf,
        /// JSONL of `{question, answer, type}`.
        #[arg(long)]
        qa: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FINRAG_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Transport => 3,
            })
        }
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    if !(0.0..=1.0).contains(&cli.mock_omit_rate) {
        return Err(Error::Input("--mock-omit-rate must be within [0, 1]".into()));
    }
    match &cli.command {
        Command::Ingest {
            kb,
            doc,
            text,
            regions,
            figures_sidecar,
        } => cmd_ingest(cli, kb, doc, text, regions.as_deref(), figures_sidecar.as_deref()),
        Command::Query { kb, trace, repl, question } => cmd_query(cli, kb, *trace, *repl, question.as_deref()),
        Command::Calibrate {
            kb,
            dev,
            csv,
            live,
            budget,
            precision_weight,
        } => cmd_calibrate(cli, kb, dev, csv.as_deref(), *live, *budget, *precision_weight),
        Command::Stats { kb } => cmd_stats(cli, kb),
        Command::Eval { kb, qa } => cmd_eval(cli, kb, qa),
    }
}

/// `base`, then `--config`, then `FINRAG_*` variables.
fn layered(cli: &Cli, base: EngineConfig) -> Result<EngineConfig, ConfigError> {
    let mut cfg = base;
    if let Some(p) = &cli.config {
        cfg.apply_file(p)?;
    }
    cfg.apply_env(std::env::vars())?;
    cfg.validate()
}

fn check_drift(kb: &KnowledgeBase, cfg: &EngineConfig) -> Result<(), Error> {
    let drift = kb.config().build_drift(cfg);
    if drift.is_empty() {
        Ok(())
    } else {
        Err(StoreError::ConfigDrift(drift).into())
    }
}

fn open_read(cli: &Cli, root: &Path) -> Result<(KnowledgeBase, EngineConfig), Error> {
    let kb = KnowledgeBase::open(root)?;
    let cfg = layered(cli, kb.config().clone())?;
    check_drift(&kb, &cfg)?;
    Ok((kb, cfg))
}

fn embedder(cli: &Cli, cfg: &EngineConfig) -> Result<Box<dyn Embedder>, Error> {
    if cli.offline {
        return Ok(Box::new(HashEmbedder::new(cfg.embed_dim)));
    }
    let spec = EmbedderSpec::from_env(cfg.embed_dim).unwrap_or_else(|| {
        log::warn!("FINRAG_EMBED_URL not set; using the token-hash embedder");
        EmbedderSpec::deterministic(cfg.embed_dim)
    });
    Ok(spec.build(cfg.embed_dim)?)
}

fn gateway(cli: &Cli, cfg: &EngineConfig) -> Result<Gateway, Error> {
    let model: Arc<dyn ChatModel> = if cli.offline {
        let scripted = match &cli.mock_rules {
            Some(p) => ScriptedModel::load(p)?,
            None => ScriptedModel::new(Vec::new()),
        };
        if cli.mock_omit_rate > 0.0 {
            Arc::new(OmittingModel::new(scripted, cli.mock_omit_rate, cli.mock_seed))
        } else {
            Arc::new(scripted)
        }
    } else {
        Arc::new(HttpChatModel::from_env().ok_or_else(|| {
            Error::Input("no model endpoint: set FINRAG_LLM_URL or pass --offline".into())
        })?)
    };
    Ok(Gateway::new(model, cfg.retry_limit, cfg.batch_size))
}

fn read_text(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::Input(format!("reading {}: {e}", path.display())))
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json renders"));
}

fn cmd_ingest(
    cli: &Cli,
    root: &Path,
    doc: &str,
    text_path: &Path,
    regions: Option<&Path>,
    sidecar: Option<&Path>,
) -> Result<(), Error> {
    let text = read_text(text_path)?;
    let manifest = match (regions, sidecar) {
        (Some(p), _) => Some(load_manifest(p)?),
        (None, Some(p)) => Some(figures_from_sidecar(doc, p)?),
        (None, None) => None,
    };
    let (mut kb, cfg) = if root.join("kb.json").exists() {
        let kb = KnowledgeBase::open_for_append(root)?;
        let cfg = layered(cli, kb.config().clone())?;
        check_drift(&kb, &cfg)?;
        (kb, cfg)
    } else {
        let cfg = layered(cli, EngineConfig::default())?;
        (KnowledgeBase::init(root, &cfg)?, cfg)
    };
    let emb = embedder(cli, &cfg)?;
    let gw = gateway(cli, &cfg)?;
    let report = ingest(&mut kb, doc, &text, manifest.as_ref(), emb.as_ref(), &gw)?;
    let (covered, total) = report.coverage();
    if cli.json {
        print_json(&serde_json::to_value(&report).expect("report serializes"));
    } else {
        println!(
            "ingested {doc}: {} sentences, {} text chunks (from {}, reduction {:.3})",
            report.sentences, report.text_chunks, report.pre_merge_chunks, report.reduction_ratio
        );
        println!(
            "indexed {} text, {} table, {} image records",
            report.counts.text, report.counts.table, report.counts.image
        );
        println!("coverage {covered}/{total}, stubs resolved {}", report.stubs_resolved());
    }
    for r in [&report.tables, &report.figures].into_iter().flatten() {
        for (id, cause) in &r.failures {
            eprintln!("warning: region {id} failed: {cause}");
        }
    }
    Ok(())
}

fn render_answer(cli: &Cli, a: &Answer, trace: bool) {
    if cli.json {
        print_json(&serde_json::to_value(a).expect("answer serializes"));
        return;
    }
    println!("{}", a.text);
    if trace {
        let t = &a.trace;
        let tier = match t.tier {
            Tier::TextOnly => "text-only",
            Tier::Fallback => "fallback",
        };
        println!(
            "-- tier {tier}: {} text hits >= {:.2} (need {})",
            t.text_hits.len(),
            t.thresholds.text,
            t.min_text_hits
        );
        if t.tier == Tier::Fallback {
            println!(
                "-- tables {} (>= {:.2}), images {} (>= {:.2})",
                t.table_hits.len(),
                t.thresholds.table,
                t.image_hits.len(),
                t.thresholds.image
            );
        }
        for h in t.text_hits.iter().chain(&t.table_hits).chain(&t.image_hits) {
            let used = if t.contexts.contains(&h.id) { "" } else { " (dropped)" };
            println!("   {:.4} {}{used}", h.similarity, h.id);
        }
        println!("-- prompt ~{} tokens", t.prompt_tokens);
    }
}

fn cmd_query(cli: &Cli, root: &Path, trace: bool, repl: bool, question: Option<&str>) -> Result<(), Error> {
    let (kb, cfg) = open_read(cli, root)?;
    let emb = embedder(cli, &cfg)?;
    let gw = gateway(cli, &cfg)?;
    let ask = |q: &str| -> Result<(), Error> {
        match answer(q, &kb, &cfg, emb.as_ref(), &gw) {
            Ok(a) => {
                render_answer(cli, &a, trace);
                Ok(())
            }
            Err(e) => {
                if let (true, Some(t)) = (trace, &e.trace) {
                    eprintln!("{}", serde_json::to_string_pretty(t).expect("trace serializes"));
                }
                Err(e.source)
            }
        }
    };
    if !repl {
        return ask(question.unwrap_or_default());
    }
    let stdin = std::io::stdin();
    loop {
        eprint!("> ");
        let _ = std::io::stderr().flush();
        let mut line = String::new();
        if stdin.lock().read_line(&mut line).map_err(|e| Error::Input(e.to_string()))? == 0 {
            return Ok(());
        }
        let q = line.trim();
        match q {
            "" => continue,
            ":q" | ":quit" | "exit" => return Ok(()),
            _ => {
                if let Err(e) = ask(q) {
                    if e.class() == ErrorClass::Transport {
                        return Err(e);
                    }
                    eprintln!("error: {e}");
                }
            }
        }
    }
}

fn cmd_calibrate(
    cli: &Cli,
    root: &Path,
    dev_path: &Path,
    csv: Option<&Path>,
    live: bool,
    budget: Option<usize>,
    precision_weight: f64,
) -> Result<(), Error> {
    let (kb, cfg) = open_read(cli, root)?;
    let dev = load_dev_set(dev_path)?;
    let emb = embedder(cli, &cfg)?;
    let gw = if live { Some(gateway(cli, &cfg)?) } else { None };
    let mut cal = Calibrator::new(&kb, emb.as_ref(), &cfg);
    cal.precision_weight = precision_weight;
    if let Some(b) = budget {
        cal.budget = b;
    }
    if let Some(gw) = &gw {
        cal.qa = QaMode::Live(gw);
    }
    let out = cal.calibrate(&dev)?;
    let points: Vec<_> = out.text_points.iter().chain(&out.table_image_points).cloned().collect();
    if let Some(p) = csv {
        let f = std::fs::File::create(p).map_err(|e| Error::Input(format!("creating {}: {e}", p.display())))?;
        write_csv(&points, std::io::BufWriter::new(f)).map_err(|e| Error::Input(format!("writing {}: {e}", p.display())))?;
    }
    if cli.json {
        print_json(&serde_json::to_value(&out).expect("outcome serializes"));
    } else {
        if csv.is_none() {
            write_csv(&points, std::io::stdout().lock()).map_err(|e| Error::Input(e.to_string()))?;
        }
        println!(
            "selected theta_text={:.2} theta_table={:.2} theta_image={:.2}",
            out.theta_text, out.theta_table, out.theta_image
        );
    }
    Ok(())
}

fn pending_stubs(dir: &Path) -> usize {
    let Ok(entries) = std::fs::read_dir(dir) else { return 0 };
    entries
        .flatten()
        .filter_map(|e| std::fs::read_to_string(e.path()).ok())
        .filter_map(|s| serde_json::from_str::<StubFile>(&s).ok())
        .filter(|s| !s.resolved)
        .count()
}

fn cmd_stats(cli: &Cli, root: &Path) -> Result<(), Error> {
    let (kb, _) = open_read(cli, root)?;
    let counts = kb.counts();
    let pending = pending_stubs(&kb.stub_dir());
    if cli.json {
        print_json(&json!({
            "documents": kb.manifest().documents,
            "counts": counts,
            "index_kind": format!("{:?}", kb.config().index_kind).to_lowercase(),
            "embed_dim": kb.config().embed_dim,
            "pending_stubs": pending,
            "config": kb.config(),
        }));
    } else {
        println!("knowledge base {}", kb.root().display());
        println!("documents: {}", kb.manifest().documents.join(", "));
        for m in Modality::ALL {
            println!("  {:<6} {:>7} records", m.as_str(), counts.get(m));
        }
        println!(
            "index {:?}, dim {}, pending stubs {pending}",
            kb.config().index_kind,
            kb.config().embed_dim
        );
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, root: &Path, qa: &Path) -> Result<(), Error> {
    let (kb, cfg) = open_read(cli, root)?;
    let items = load_qa(qa)?;
    let emb = embedder(cli, &cfg)?;
    let gw = gateway(cli, &cfg)?;
    let report = evaluate(&items, &kb, &cfg, emb.as_ref(), &gw)?;
    for r in report.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("warning: {:?} failed: {}", r.question, r.error.as_deref().unwrap_or_default());
    }
    if cli.json {
        print_json(&serde_json::to_value(&report).expect("report serializes"));
    } else {
        print!("{}", report.render());
    }
    Ok(())
}
