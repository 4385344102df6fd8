//! `vrdx`: generate synthetic corpora, train/evaluate/extract with the
//! graph-convolution BiLSTM-CRF models, run ablation grids, and verify
//! gradients.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use vrdx_core::document::{load_corpus, save_corpus, Document, TokenizerMode};
use vrdx_core::eval::{evaluate, MetricsReport};
use vrdx_core::gradcheck::gradient_check_mutated;
use vrdx_core::labels::TagSet;
use vrdx_core::model::{AblationFlags, Mode, Model, ModelConfig};
use vrdx_core::params::{load_checkpoint_file, save_checkpoint_file};
use vrdx_core::synth::{self, generate_corpus, GeneratorConfig};
use vrdx_core::train::{train, write_history_csv, TrainConfig};
use vrdx_core::vocab::Vocab;

#[derive(Parser)]
#[command(name = "vrdx", version, about = "entity extraction from visually rich documents")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; command-line flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// master seed for all randomness
    #[arg(long)]
    seed: Option<u64>,
    /// directory for all outputs (created if missing)
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// parallel cells for `ablate` (other commands are single-process)
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// model mode: baseline1 | baseline2 | gcn | gcn_multitask
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled corpus (train/val/test NDJSON)
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes checkpoint, history CSV and metrics JSON
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_corpus: PathBuf,
        #[arg(long)]
        val_corpus: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labeled corpus
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Extract entities from (possibly unlabeled) documents
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the full ablation grid and emit per-cell metrics + summary
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_corpus: PathBuf,
        #[arg(long)]
        val_corpus: PathBuf,
        /// corpus the per-cell metrics are computed on
        #[arg(long)]
        test_corpus: PathBuf,
    },
    /// Verify analytic gradients on a micro model, all modes + ablations
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// flip the sign of this parameter's gradient first (mutation
        /// probe; the check must then fail)
        #[arg(long)]
        flip_sign: Option<String>,
    },
}

// ---------------------------------------------------------------------------
// errors and exit codes

enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage<E: std::fmt::Display>(ctx: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Usage(format!("{ctx}: {e}"))
}

fn runtime<E: std::fmt::Display>(ctx: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{ctx}: {e}"))
}

// ---------------------------------------------------------------------------
// config file

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    generator: Option<GeneratorConfig>,
    model: Option<ModelSection>,
    train: Option<TrainSection>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    mode: Option<String>,
    layers: Option<usize>,
    d_tok: Option<usize>,
    enc_hidden: Option<usize>,
    d_hidden: Option<usize>,
    d_edge_out: Option<usize>,
    tagger_hidden: Option<usize>,
    leaky_slope: Option<f64>,
    edge_scale: Option<f64>,
    dropout: Option<f64>,
    tokenizer: Option<String>,
    no_edge_features: Option<bool>,
    no_text_features: Option<bool>,
    no_attention: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    epochs: Option<usize>,
    seed: Option<u64>,
    lr: Option<f64>,
    grad_clip: Option<f64>,
    patience: Option<usize>,
    overlap_threshold: Option<f64>,
    entity_types: Option<Vec<String>>,
    ambiguous_types: Option<Vec<String>>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(usage(&format!("cannot read config {}", path.display())))?;
    toml::from_str(&text).map_err(usage(&format!("invalid config {}", path.display())))
}

fn parse_mode(s: &str) -> Result<Mode, CliError> {
    match s {
        "baseline1" => Ok(Mode::Baseline1),
        "baseline2" => Ok(Mode::Baseline2),
        "gcn" => Ok(Mode::Gcn),
        "gcn_multitask" => Ok(Mode::GcnMultitask),
        other => Err(CliError::Usage(format!(
            "unknown mode `{other}` (expected baseline1|baseline2|gcn|gcn_multitask)"
        ))),
    }
}

/// Merge config file + flags into the core configs. Flags win.
fn resolve_train_config(file: &FileConfig, common: &Common) -> Result<TrainConfig, CliError> {
    let ms = file.model.clone().unwrap_or_default();
    let mode_str = common.mode.clone().or(ms.mode).unwrap_or_else(|| "gcn".to_string());
    let mut mc = ModelConfig::with_mode(parse_mode(&mode_str)?);
    if let Some(v) = ms.layers {
        mc.layers = v;
    }
    if let Some(v) = ms.d_tok {
        mc.d_tok = v;
    }
    if let Some(v) = ms.enc_hidden {
        mc.enc_hidden = v;
    }
    if let Some(v) = ms.d_hidden {
        mc.d_hidden = v;
    }
    if let Some(v) = ms.d_edge_out {
        mc.d_edge_out = v;
    }
    if let Some(v) = ms.tagger_hidden {
        mc.tagger_hidden = v;
    }
    if let Some(v) = ms.leaky_slope {
        mc.leaky_slope = v;
    }
    if let Some(v) = ms.edge_scale {
        mc.edge_scale = v;
    }
    if let Some(v) = ms.dropout {
        mc.dropout = v;
    }
    if let Some(v) = &ms.tokenizer {
        mc.tokenizer = match v.as_str() {
            "word" => TokenizerMode::Word,
            "char" => TokenizerMode::Char,
            other => return Err(CliError::Usage(format!("unknown tokenizer `{other}`"))),
        };
    }
    mc.ablation = AblationFlags {
        no_edge_features: ms.no_edge_features.unwrap_or(false),
        no_text_features: ms.no_text_features.unwrap_or(false),
        no_attention: ms.no_attention.unwrap_or(false),
    };
    mc.validate().map_err(usage("model config"))?;

    let ts = file.train.clone().unwrap_or_default();
    let mut cfg = TrainConfig::new(mc, ts.entity_types.unwrap_or_else(synth::entity_types));
    cfg.ambiguous_types = ts.ambiguous_types.unwrap_or_else(synth::ambiguous_types);
    if let Some(v) = ts.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = ts.lr {
        cfg.adam.lr = v;
    }
    if let Some(v) = ts.grad_clip {
        cfg.grad_clip = v;
    }
    if let Some(v) = ts.patience {
        cfg.patience = v;
    }
    if let Some(v) = ts.overlap_threshold {
        cfg.overlap_threshold = v;
    }
    cfg.seed = common.seed.or(ts.seed).unwrap_or(0);
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: u64,
    version: String,
    outputs: Vec<String>,
    duration_seconds: f64,
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    outputs: &[PathBuf],
    started: Instant,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        command: command.to_string(),
        config,
        seed,
        version: format!("vrdx-{}", env!("CARGO_PKG_VERSION")),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        duration_seconds: started.elapsed().as_secs_f64(),
    };
    // atomic: write to a temp file in the same directory, then rename
    let tmp = out_dir.join(".manifest.json.tmp");
    let final_path = out_dir.join("manifest.json");
    let data = serde_json::to_vec_pretty(&manifest).map_err(runtime("manifest"))?;
    std::fs::write(&tmp, data).map_err(runtime("manifest write"))?;
    std::fs::rename(&tmp, &final_path).map_err(runtime("manifest rename"))?;
    Ok(())
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(runtime(&format!("cannot create {}", dir.display())))
}

fn load_docs(path: &Path) -> Result<Vec<Document>, CliError> {
    load_docs_with(path, TokenizerMode::Word)
}

fn load_docs_with(path: &Path, mode: TokenizerMode) -> Result<Vec<Document>, CliError> {
    load_corpus(path, mode).map_err(runtime(&format!("corpus {}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let data = serde_json::to_vec_pretty(value).map_err(runtime("json"))?;
    std::fs::write(path, data).map_err(runtime(&format!("write {}", path.display())))
}

// ---------------------------------------------------------------------------
// commands

fn cmd_generate(common: &Common) -> Result<(), CliError> {
    let started = Instant::now();
    let file = load_file_config(common.config.as_deref())?;
    let mut cfg = file.generator.clone().unwrap_or_else(|| GeneratorConfig::fixed_template(0));
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(usage("generator config"))?;
    ensure_out_dir(&common.out_dir)?;
    let corpus = generate_corpus(&cfg).map_err(runtime("generate"))?;
    let mut outputs = Vec::new();
    for (name, docs) in [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)] {
        let path = common.out_dir.join(format!("{name}.ndjson"));
        save_corpus(&path, docs).map_err(runtime("save corpus"))?;
        outputs.push(path);
    }
    let config = serde_json::to_value(&cfg).map_err(runtime("config"))?;
    write_manifest(&common.out_dir, "generate", config, cfg.seed, &outputs, started)?;
    println!(
        "generated {} documents ({} train / {} val / {} test) in {}",
        corpus.train.len() + corpus.val.len() + corpus.test.len(),
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        common.out_dir.display()
    );
    Ok(())
}

fn run_training(
    cfg: &TrainConfig,
    train_docs: &[Document],
    val_docs: &[Document],
    out_dir: &Path,
    cell: Option<&str>,
) -> Result<(Model, PathBuf), CliError> {
    let out = train(train_docs, val_docs, cfg).map_err(runtime("train"))?;
    let suffix = cell.map(|c| format!("_{c}")).unwrap_or_default();
    let ckpt_path = out_dir.join(format!("checkpoint{suffix}.json"));
    save_checkpoint_file(&ckpt_path, &out.model.checkpoint_config(), &out.model.store)
        .map_err(runtime("checkpoint"))?;
    let hist_path = out_dir.join(format!("history{suffix}.csv"));
    let mut f = std::fs::File::create(&hist_path).map_err(runtime("history"))?;
    write_history_csv(&mut f, &out.history).map_err(runtime("history"))?;
    let metrics_path = out_dir.join(format!("metrics{suffix}.json"));
    let report = MetricsReport::new(cfg.model.mode, cfg.seed, out.val_metrics);
    write_json(&metrics_path, &report)?;
    Ok((out.model, metrics_path))
}

fn cmd_train(common: &Common, train_corpus: &Path, val_corpus: Option<&Path>) -> Result<(), CliError> {
    let started = Instant::now();
    let file = load_file_config(common.config.as_deref())?;
    let cfg = resolve_train_config(&file, common)?;
    let train_docs = load_docs(train_corpus)?;
    let val_docs = match val_corpus {
        Some(p) => load_docs(p)?,
        None => Vec::new(),
    };
    ensure_out_dir(&common.out_dir)?;
    let (_, metrics_path) = run_training(&cfg, &train_docs, &val_docs, &common.out_dir, None)?;
    let outputs = vec![
        common.out_dir.join("checkpoint.json"),
        common.out_dir.join("history.csv"),
        metrics_path,
    ];
    let config = serde_json::to_value(&cfg).map_err(runtime("config"))?;
    write_manifest(&common.out_dir, "train", config, cfg.seed, &outputs, started)?;
    println!("trained {} (seed {}); artifacts in {}", cfg.model.mode.as_str(), cfg.seed, common.out_dir.display());
    Ok(())
}

fn load_model(checkpoint: &Path) -> Result<Model, CliError> {
    let (config, store) =
        load_checkpoint_file(checkpoint).map_err(runtime(&format!("checkpoint {}", checkpoint.display())))?;
    Model::from_checkpoint(&config, store).map_err(runtime("checkpoint"))
}

fn cmd_evaluate(common: &Common, checkpoint: &Path, corpus: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let model = load_model(checkpoint)?;
    let docs = load_docs_with(corpus, model.config.tokenizer)?;
    ensure_out_dir(&common.out_dir)?;
    let file = load_file_config(common.config.as_deref())?;
    let ts = file.train.unwrap_or_default();
    let threshold = ts.overlap_threshold.unwrap_or(0.7);
    let ambiguous = ts.ambiguous_types.unwrap_or_else(synth::ambiguous_types);
    let metrics = evaluate(&model, &docs, threshold, &ambiguous).map_err(runtime("evaluate"))?;
    let seed = common.seed.unwrap_or(0);
    let report = MetricsReport::new(model.config.mode, seed, metrics);
    let path = common.out_dir.join("metrics.json");
    write_json(&path, &report)?;
    let config = serde_json::to_value(&model.config).map_err(runtime("config"))?;
    write_manifest(&common.out_dir, "evaluate", config, seed, &[path], started)?;
    println!("micro_f1 {:.4}", report.micro_f1);
    for (ty, m) in &report.per_type {
        println!("  {ty}: p {:.4} r {:.4} f1 {:.4} (support {})", m.p, m.r, m.f1, m.support);
    }
    Ok(())
}

#[derive(Serialize)]
struct ExtractionRecord {
    doc_id: String,
    entities: Vec<ExtractedEntity>,
}

#[derive(Serialize)]
struct ExtractedEntity {
    #[serde(rename = "type")]
    entity_type: String,
    value: String,
    segment_id: u32,
    token_range: (usize, usize),
}

fn cmd_extract(common: &Common, checkpoint: &Path, corpus: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let model = load_model(checkpoint)?;
    let docs = load_docs_with(corpus, model.config.tokenizer)?;
    ensure_out_dir(&common.out_dir)?;
    let path = common.out_dir.join("extractions.ndjson");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(runtime("extractions"))?);
    for doc in &docs {
        let pred = model.predict(doc).map_err(runtime(&format!("predict {}", doc.doc_id)))?;
        let rec = ExtractionRecord {
            doc_id: doc.doc_id.clone(),
            entities: pred
                .entities
                .into_iter()
                .map(|e| ExtractedEntity {
                    entity_type: e.entity_type,
                    value: e.surface,
                    segment_id: e.segment_id,
                    token_range: e.token_range,
                })
                .collect(),
        };
        let line = serde_json::to_string(&rec).map_err(runtime("json"))?;
        writeln!(f, "{line}").map_err(runtime("write"))?;
    }
    f.flush().map_err(runtime("write"))?;
    drop(f);
    let config = serde_json::to_value(&model.config).map_err(runtime("config"))?;
    write_manifest(&common.out_dir, "extract", config, common.seed.unwrap_or(0), &[path], started)?;
    println!("extracted entities for {} documents", docs.len());
    Ok(())
}

/// Grid cells for `ablate`: component ablations at the configured depth,
/// plus depth 1/2/3 with all components on.
fn ablation_cells() -> Vec<(&'static str, AblationFlags, Option<usize>)> {
    let f = AblationFlags::default();
    vec![
        ("full", f, None),
        ("no_edge_features", AblationFlags { no_edge_features: true, ..f }, None),
        ("no_text_features", AblationFlags { no_text_features: true, ..f }, None),
        ("no_attention", AblationFlags { no_attention: true, ..f }, None),
        ("layers_1", f, Some(1)),
        ("layers_2", f, Some(2)),
        ("layers_3", f, Some(3)),
    ]
}

#[derive(Serialize)]
struct AblateSummaryRow {
    cell: String,
    micro_f1: f64,
    ambiguous_micro_f1: Option<f64>,
}

fn cmd_ablate(
    common: &Common,
    train_corpus: &Path,
    val_corpus: &Path,
    test_corpus: &Path,
) -> Result<(), CliError> {
    let started = Instant::now();
    let file = load_file_config(common.config.as_deref())?;
    let base = resolve_train_config(&file, common)?;
    if !base.model.mode.uses_graph() {
        return Err(CliError::Usage("ablate requires a gcn mode".into()));
    }
    let train_docs = load_docs(train_corpus)?;
    let val_docs = load_docs(val_corpus)?;
    let test_docs = load_docs(test_corpus)?;
    ensure_out_dir(&common.out_dir)?;

    let cells = ablation_cells();
    let jobs = common.jobs.max(1);
    let mut results: Vec<(String, MetricsReport)> = Vec::new();
    for chunk in cells.chunks(jobs) {
        let chunk_results: Vec<Result<(String, MetricsReport), CliError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(name, flags, layers)| {
                    let mut cfg = base.clone();
                    cfg.model.ablation = *flags;
                    if let Some(l) = layers {
                        cfg.model.layers = *l;
                    }
                    let (train_docs, val_docs, test_docs) = (&train_docs, &val_docs, &test_docs);
                    let out_dir = &common.out_dir;
                    scope.spawn(move || -> Result<(String, MetricsReport), CliError> {
                        let (model, _) = run_training(&cfg, train_docs, val_docs, out_dir, Some(name))?;
                        let metrics = evaluate(&model, test_docs, cfg.overlap_threshold, &cfg.ambiguous_types)
                            .map_err(runtime("evaluate"))?;
                        let report = MetricsReport::new(cfg.model.mode, cfg.seed, metrics);
                        let path = out_dir.join(format!("metrics_{name}.json"));
                        write_json(&path, &report)?;
                        Ok((name.to_string(), report))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("cell thread")).collect()
        });
        for r in chunk_results {
            results.push(r?);
        }
    }

    let summary: Vec<AblateSummaryRow> = results
        .iter()
        .map(|(cell, r)| AblateSummaryRow {
            cell: cell.clone(),
            micro_f1: r.micro_f1,
            ambiguous_micro_f1: r.ambiguous_micro_f1,
        })
        .collect();
    let summary_path = common.out_dir.join("summary.json");
    write_json(&summary_path, &summary)?;
    println!("{:<20} {:>9} {:>9}", "cell", "micro_f1", "ambig_f1");
    for row in &summary {
        println!(
            "{:<20} {:>9.4} {:>9}",
            row.cell,
            row.micro_f1,
            row.ambiguous_micro_f1.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    let mut outputs: Vec<PathBuf> = results
        .iter()
        .map(|(c, _)| common.out_dir.join(format!("metrics_{c}.json")))
        .collect();
    outputs.push(summary_path);
    let config = serde_json::to_value(&base).map_err(runtime("config"))?;
    write_manifest(&common.out_dir, "ablate", config, base.seed, &outputs, started)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

/// The micro document: 2 segments × 3 tokens each.
fn micro_doc() -> Document {
    use vrdx_core::document::{BoundingBox, EntityAnnotation, TextSegment};
    let seg = |id: u32, text: &str, y: f64| TextSegment {
        id,
        text: text.into(),
        bbox: BoundingBox::new(20.0, y, 90.0, 12.0),
        tokens: vrdx_core::document::tokenize(text, TokenizerMode::Word),
    };
    Document {
        doc_id: "micro".into(),
        page_w: 200.0,
        page_h: 200.0,
        segments: vec![seg(0, "total 7.50 eur", 20.0), seg(1, "tax 7.50 eur", 60.0)],
        annotations: vec![
            EntityAnnotation {
                entity_type: "price".into(),
                value: "7.50".into(),
                bbox: BoundingBox::new(20.0, 20.0, 90.0, 12.0),
            },
            EntityAnnotation {
                entity_type: "tax".into(),
                value: "7.50".into(),
                bbox: BoundingBox::new(20.0, 60.0, 90.0, 12.0),
            },
        ],
    }
}

fn micro_configs() -> Vec<(String, ModelConfig)> {
    let base = |mode| {
        let mut c = ModelConfig::with_mode(mode);
        c.d_tok = 6;
        c.enc_hidden = 3;
        c.d_hidden = 5;
        c.d_edge_out = 4;
        c.tagger_hidden = 4;
        c
    };
    let mut out = vec![
        ("baseline1".to_string(), base(Mode::Baseline1)),
        ("baseline2".to_string(), base(Mode::Baseline2)),
        ("gcn".to_string(), base(Mode::Gcn)),
        ("gcn_multitask".to_string(), base(Mode::GcnMultitask)),
    ];
    for (name, set) in [
        ("gcn+no_edge_features", 0),
        ("gcn+no_text_features", 1),
        ("gcn+no_attention", 2),
    ] {
        let mut c = base(Mode::Gcn);
        match set {
            0 => c.ablation.no_edge_features = true,
            1 => c.ablation.no_text_features = true,
            _ => c.ablation.no_attention = true,
        }
        out.push((name.to_string(), c));
    }
    out
}

fn cmd_gradcheck(common: &Common, flip_sign: Option<&str>) -> Result<(), CliError> {
    let started = Instant::now();
    let doc = micro_doc();
    // K = 5 tags: O plus B/I for price and tax
    let tagset = TagSet::new(vec!["price".into(), "tax".into()]);
    let seed = common.seed.unwrap_or(7);
    let mut report_rows: Vec<serde_json::Value> = Vec::new();
    let mut worst = 0.0f64;
    for (name, cfg) in micro_configs() {
        let vocab = Vocab::build(std::slice::from_ref(&doc));
        let model = Model::new(cfg.clone(), vocab, tagset.clone(), seed).map_err(runtime("model"))?;
        let aligned = vrdx_core::labels::align_annotations(&doc, &tagset, 0.7, cfg.tokenizer);
        let ckpt_cfg = model.checkpoint_config();
        let mut f = |s: &vrdx_core::params::ParamStore, t: &mut vrdx_core::tape::Tape| {
            let m = Model::from_checkpoint(&ckpt_cfg, s.clone()).expect("micro model rebuild");
            m.loss(t, &doc, &aligned, None)
        };
        // only flip a parameter the current component actually has
        let flip = flip_sign.filter(|n| model.store.get(n).is_some());
        let rep = gradient_check_mutated(&mut f, &model.store, 1e-5, flip)
            .map_err(runtime("gradcheck"))?;
        let pass = rep.max_rel_error < 1e-4;
        worst = worst.max(rep.max_rel_error);
        println!(
            "{name:<22} max_rel_err {:.3e} at {}[{}] ({} coords) {}",
            rep.max_rel_error,
            rep.worst_param,
            rep.worst_index,
            rep.coords_checked,
            if pass { "pass" } else { "FAIL" }
        );
        report_rows.push(serde_json::json!({
            "component": name,
            "max_rel_error": rep.max_rel_error,
            "worst_param": rep.worst_param,
            "coords_checked": rep.coords_checked,
            "pass": pass,
        }));
    }
    ensure_out_dir(&common.out_dir)?;
    let path = common.out_dir.join("gradcheck.json");
    write_json(&path, &report_rows)?;
    write_manifest(&common.out_dir, "gradcheck", serde_json::json!({"eps": 1e-5}), seed, &[path], started)?;
    if worst < 1e-4 {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("gradient check failed: max rel err {worst:.3e}")))
    }
}

// ---------------------------------------------------------------------------

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Generate { common } => cmd_generate(common),
        Cmd::Train { common, train_corpus, val_corpus } => {
            cmd_train(common, train_corpus, val_corpus.as_deref())
        }
        Cmd::Evaluate { common, checkpoint, corpus } => cmd_evaluate(common, checkpoint, corpus),
        Cmd::Extract { common, checkpoint, corpus } => cmd_extract(common, checkpoint, corpus),
        Cmd::Ablate { common, train_corpus, val_corpus, test_corpus } => {
            cmd_ablate(common, train_corpus, val_corpus, test_corpus)
        }
        Cmd::Gradcheck { common, flip_sign } => cmd_gradcheck(common, flip_sign.as_deref()),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            std::process::exit(1);
        }
        Err(e) => {
            // --help / --version
            let _ = e.print();
            std::process::exit(0);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e.message());
        std::process::exit(e.code());
    }
}
