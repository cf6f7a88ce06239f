//! Single-binary pipeline: synthesize corpora, inspect statistics, train,
//! evaluate, cross-validate, predict, dump graphs and self-check gradients.
//!
//! Exit codes: 0 success, 1 bad input or configuration, 2 runtime failure.
//! Every command echoes its resolved configuration to standard error before
//! doing any work.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pbje_core::corpus::{
    corpus_stats, parse_corpus, rule_oracle, synth_generate, write_corpus, SynthConfig,
};
use pbje_core::encoder::load_precomputed;
use pbje_core::eval::{
    breakdown, confidence_matrix_csv, crossval, evaluate_docs, metrics_csv, metrics_table,
    BreakdownMode, ClauseEvalMode, CrossvalOptions,
};
use pbje_core::fixture::model_gradcheck;
use pbje_core::graph::{build_graph, enumerate_pairs, AblationMode};
use pbje_core::trainer::{
    extract, load_checkpoint, save_checkpoint, train, EncoderSpec, EncoderState, TrainConfig,
};
use pbje_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pbje",
    about = "Emotion-cause pair extraction with pair-based joint encoding",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted, oracle-recoverable pairs
    Synth(SynthArgs),
    /// Print corpus statistics (documents, pairs, relative positions)
    Stats {
        /// Corpus file (JSONL)
        corpus: PathBuf,
    },
    /// Train a model on a corpus
    Train(TrainArgs),
    /// Evaluate a trained model on a corpus
    Eval(EvalArgs),
    /// k-fold cross-validation (train + evaluate per fold)
    Xval(XvalArgs),
    /// Run extraction and write predictions (optionally confidence heatmaps)
    Predict(PredictArgs),
    /// Emit the heterogeneous graph for an n-clause document as an edge list
    GraphDump(GraphDumpArgs),
    /// Check model gradients against central finite differences
    Gradcheck {
        /// Seed for the checked fixture's weights
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Number of documents
    #[arg(long)]
    docs: usize,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output corpus path (JSONL)
    #[arg(long)]
    out: PathBuf,
    /// Relative-position distribution, e.g. "0:0.2358,1:0.6193,2:0.1034,3:0.0415"
    #[arg(long)]
    offset_dist: Option<String>,
    /// Gold pairs per document, e.g. "1:0.8977,2:0.0910,3:0.0113"
    #[arg(long)]
    pair_count_dist: Option<String>,
    /// Vocabulary size including reserved keyword/cue pools
    #[arg(long, default_value_t = 200)]
    vocab: usize,
    /// Candidate window the planted pairs must respect
    #[arg(long, default_value_t = 3)]
    lambda: usize,
    /// Clauses per document, "lo:hi" inclusive
    #[arg(long, default_value = "6:12")]
    doc_len: String,
    /// Plain tokens per clause, "lo:hi" inclusive
    #[arg(long, default_value = "3:6")]
    clause_len: String,
    /// Permit offset-distribution mass beyond the window
    #[arg(long, default_value_t = false)]
    allow_out_of_window: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus (JSONL)
    #[arg(long)]
    corpus: PathBuf,
    /// JSON config file; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Clause encoder: "toy" (trainable) or "precomputed"
    #[arg(long, default_value = "toy")]
    encoder: String,
    /// Embedding file for --encoder precomputed
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output model path
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

/// Flag-level overrides mirroring the config fields; unset flags leave the
/// config file (or default) value in place. The bracketed defaults are the
/// TrainConfig defaults that apply when neither file nor flag sets a value.
#[derive(Args)]
struct ConfigOverrides {
    /// Candidate window [default: 3]
    #[arg(long)]
    lambda: Option<usize>,
    /// Graph convolution layers [default: 1]
    #[arg(long)]
    theta: Option<usize>,
    /// Pair-loss weight [default: 1.0]
    #[arg(long)]
    alpha: Option<f64>,
    /// Emotion-loss weight [default: 1.0]
    #[arg(long)]
    beta: Option<f64>,
    /// Cause-loss weight [default: 1.0]
    #[arg(long)]
    gamma: Option<f64>,
    /// Learning rate [default: 1e-3 toy encoder, 2e-5 precomputed]
    #[arg(long)]
    lr: Option<f64>,
    /// Dropout rate [default: 0.2]
    #[arg(long)]
    dropout: Option<f64>,
    /// Documents per optimizer step [default: 4]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training epochs [default: 35]
    #[arg(long)]
    epochs: Option<usize>,
    /// Master seed for init, shuffling and dropout [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation mode: none|merge-clause-clause|merge-clause-pair|no-pair-node|no-pg|no-pair-node-no-pg [default: none]
    #[arg(long)]
    ablation: Option<String>,
    /// Extraction probability threshold, inclusive [default: 0.5]
    #[arg(long)]
    threshold: Option<f64>,
    /// Fall back to the argmax pair when nothing clears the threshold [default: false]
    #[arg(long)]
    fallback_argmax: Option<bool>,
    /// Embedding width [default: 32 toy encoder, file width precomputed]
    #[arg(long)]
    dim: Option<usize>,
    /// Share one self transform across node types [default: false]
    #[arg(long)]
    shared_self_transform: Option<bool>,
}

impl ConfigOverrides {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.theta {
            cfg.theta = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = Some(v);
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.ablation {
            cfg.ablation = v.parse()?;
        }
        if let Some(v) = self.threshold {
            cfg.threshold = v;
        }
        if let Some(v) = self.fallback_argmax {
            cfg.fallback_argmax = v;
        }
        if let Some(v) = self.dim {
            cfg.dim = Some(v);
        }
        if let Some(v) = self.shared_self_transform {
            cfg.shared_self_transform = v;
        }
        cfg.validate()
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluation corpus (JSONL)
    #[arg(long)]
    corpus: PathBuf,
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Embedding file (required for precomputed-encoder models)
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Also report a bucketed breakdown: pairs-per-doc|relpos|doclen
    #[arg(long)]
    breakdown: Option<String>,
    /// Bucket boundaries for the breakdown, e.g. "2" or "2,5"
    #[arg(long)]
    thresholds: Option<String>,
    /// Clause metrics from "heads" or "from-pairs"
    #[arg(long, default_value = "heads")]
    clause_eval_mode: String,
    /// Write machine-readable metrics here as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct XvalArgs {
    /// Corpus (JSONL)
    #[arg(long)]
    corpus: PathBuf,
    /// JSON config file; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Clause encoder: "toy" or "precomputed"
    #[arg(long, default_value = "toy")]
    encoder: String,
    /// Embedding file for --encoder precomputed
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Number of folds
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Independent repetitions with shifted seeds
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Parallel fold workers
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Clause metrics from "heads" or "from-pairs"
    #[arg(long, default_value = "heads")]
    clause_eval_mode: String,
    /// Write the per-fold metrics here as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct PredictArgs {
    /// Corpus to predict on (JSONL)
    #[arg(long)]
    corpus: PathBuf,
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Embedding file (required for precomputed-encoder models)
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output predictions path (JSONL)
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-document confidence matrices (CSV)
    #[arg(long)]
    heatmap: Option<PathBuf>,
}

#[derive(Args)]
struct GraphDumpArgs {
    /// Clause count
    #[arg(long)]
    n: usize,
    /// Candidate window
    #[arg(long, default_value_t = 3)]
    lambda: usize,
    /// Ablation mode
    #[arg(long, default_value = "none")]
    ablation: String,
    /// Output path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}

fn echo_config(command: &str, value: serde_json::Value) {
    eprintln!("{command} config: {value}");
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Stats { corpus } => cmd_stats(corpus),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Xval(args) => cmd_xval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::GraphDump(args) => cmd_graph_dump(args),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

fn parse_dist(text: &str) -> Result<BTreeMap<usize, f64>> {
    let mut dist = BTreeMap::new();
    for part in text.split(',') {
        let (k, v) = part
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("bad distribution entry `{part}`")))?;
        let key: usize = k
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad distribution key `{k}`")))?;
        let weight: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad distribution weight `{v}`")))?;
        dist.insert(key, weight);
    }
    Ok(dist)
}

fn parse_range(text: &str) -> Result<(usize, usize)> {
    let (lo, hi) = text
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("bad range `{text}`, expected lo:hi")))?;
    let lo = lo
        .parse()
        .map_err(|_| Error::Config(format!("bad range bound `{lo}`")))?;
    let hi = hi
        .parse()
        .map_err(|_| Error::Config(format!("bad range bound `{hi}`")))?;
    Ok((lo, hi))
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let mut cfg = SynthConfig {
        doc_count: args.docs,
        vocab_size: args.vocab,
        lambda: args.lambda,
        doc_len_range: parse_range(&args.doc_len)?,
        clause_len_range: parse_range(&args.clause_len)?,
        allow_out_of_window: args.allow_out_of_window,
        ..SynthConfig::default()
    };
    if let Some(text) = &args.offset_dist {
        cfg.offset_dist = parse_dist(text)?;
    }
    if let Some(text) = &args.pair_count_dist {
        cfg.pair_count_dist = parse_dist(text)?;
    }
    echo_config(
        "synth",
        serde_json::json!({
            "docs": cfg.doc_count, "vocab": cfg.vocab_size, "lambda": cfg.lambda,
            "doc_len": cfg.doc_len_range, "clause_len": cfg.clause_len_range,
            "offset_dist": cfg.offset_dist, "pair_count_dist": cfg.pair_count_dist,
            "allow_out_of_window": cfg.allow_out_of_window, "seed": args.seed,
            "out": args.out,
        }),
    );
    let docs = synth_generate(&cfg, args.seed)?;
    write_corpus(&args.out, &docs)?;
    let recovered = docs.iter().all(|d| rule_oracle(d) == d.gold_pairs);
    println!(
        "wrote {} documents ({} pairs) to {}; oracle recovery: {}",
        docs.len(),
        docs.iter().map(|d| d.gold_pairs.len()).sum::<usize>(),
        args.out.display(),
        if recovered { "exact" } else { "FAILED" }
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_stats(corpus: PathBuf) -> Result<ExitCode> {
    echo_config("stats", serde_json::json!({ "corpus": corpus }));
    let docs = parse_corpus(&corpus)?;
    let report = corpus_stats(&docs)?;
    print!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn resolve_config(path: Option<&PathBuf>, overrides: &ConfigOverrides) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn encoder_spec(encoder: &str, embeddings: Option<&PathBuf>) -> Result<EncoderSpec> {
    match encoder {
        "toy" => Ok(EncoderSpec::Toy),
        "precomputed" => {
            let path = embeddings.ok_or_else(|| {
                Error::Config("--encoder precomputed requires --embeddings".into())
            })?;
            Ok(EncoderSpec::Precomputed(path.clone()))
        }
        other => Err(Error::Config(format!(
            "unknown encoder `{other}` (toy|precomputed)"
        ))),
    }
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let cfg = resolve_config(args.config.as_ref(), &args.overrides)?;
    let encoder = encoder_spec(&args.encoder, args.embeddings.as_ref())?;
    echo_config(
        "train",
        serde_json::json!({
            "corpus": args.corpus, "encoder": args.encoder,
            "embeddings": args.embeddings, "out": args.out,
            "config": serde_json::to_value(&cfg).expect("config serializes"),
        }),
    );
    let docs = parse_corpus(&args.corpus)?;
    let out = train(&docs, encoder, &cfg)?;
    for (epoch, loss) in out.epoch_losses.iter().enumerate() {
        println!("epoch {epoch}: mean loss {loss:.6}");
    }
    save_checkpoint(&args.out, &out.checkpoint)?;
    println!(
        "saved model to {} (final mean loss {:.6})",
        args.out.display(),
        out.checkpoint.loss
    );
    Ok(ExitCode::SUCCESS)
}

fn load_embeddings_if_needed(
    encoder: &EncoderState,
    embeddings: Option<&PathBuf>,
) -> Result<Option<BTreeMap<String, pbje_core::Tensor>>> {
    match encoder {
        EncoderState::Toy { .. } => Ok(None),
        EncoderState::Precomputed { dim } => {
            let path = embeddings.ok_or_else(|| {
                Error::Config("this model needs --embeddings for extraction".into())
            })?;
            Ok(Some(load_precomputed(path, Some(*dim))?.1))
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let mode: ClauseEvalMode = args.clause_eval_mode.parse()?;
    echo_config(
        "eval",
        serde_json::json!({
            "corpus": args.corpus, "model": args.model,
            "breakdown": args.breakdown, "thresholds": args.thresholds,
            "clause_eval_mode": args.clause_eval_mode, "csv": args.csv,
        }),
    );
    let docs = parse_corpus(&args.corpus)?;
    let checkpoint = load_checkpoint(&args.model)?;
    let reps = load_embeddings_if_needed(&checkpoint.encoder, args.embeddings.as_ref())?;
    let scores = evaluate_docs(&docs, &checkpoint, reps.as_ref(), mode)?;

    let mode_note = match mode {
        ClauseEvalMode::Heads => "clause metrics from heads",
        ClauseEvalMode::FromPairs => "clause metrics derived from extracted pairs",
    };
    let rows = vec![
        ("ECPE".to_string(), scores.ecpe),
        ("EE".to_string(), scores.ee),
        ("CE".to_string(), scores.ce),
    ];
    print!("{}", metrics_table(&format!("overall ({mode_note})"), &rows));

    let mut csv_rows: Vec<(String, String, pbje_core::eval::Metrics)> = rows
        .iter()
        .map(|(task, m)| (task.to_lowercase(), "all".to_string(), *m))
        .collect();
    if let Some(kind) = &args.breakdown {
        let bmode: BreakdownMode = kind.parse()?;
        let thresholds = match &args.thresholds {
            Some(t) => t
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad threshold `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?,
            None => bmode.default_thresholds(),
        };
        let report = breakdown(&docs, &scores.predictions, bmode, &thresholds)?;
        let rows: Vec<(String, pbje_core::eval::Metrics)> = report
            .buckets
            .iter()
            .map(|b| (b.label.clone(), b.metrics))
            .collect();
        println!();
        print!(
            "{}",
            metrics_table(&format!("breakdown by {}", bmode.label()), &rows)
        );
        csv_rows.extend(
            report
                .buckets
                .iter()
                .map(|b| ("ecpe".to_string(), format!("{}:{}", bmode.label(), b.label), b.metrics)),
        );
    }
    if let Some(path) = &args.csv {
        std::fs::write(path, metrics_csv(&csv_rows))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_xval(args: XvalArgs) -> Result<ExitCode> {
    let cfg = resolve_config(args.config.as_ref(), &args.overrides)?;
    let encoder = encoder_spec(&args.encoder, args.embeddings.as_ref())?;
    let opts = CrossvalOptions {
        folds: args.folds,
        repeats: args.repeats,
        jobs: args.jobs,
        clause_eval_mode: args.clause_eval_mode.parse()?,
    };
    echo_config(
        "xval",
        serde_json::json!({
            "corpus": args.corpus, "encoder": args.encoder, "folds": opts.folds,
            "repeats": opts.repeats, "jobs": opts.jobs,
            "clause_eval_mode": args.clause_eval_mode,
            "config": serde_json::to_value(&cfg).expect("config serializes"),
        }),
    );
    let docs = parse_corpus(&args.corpus)?;
    let report = crossval(&docs, &encoder, &cfg, &opts)?;
    print!("{}", report.to_text());
    if let Some(path) = &args.csv {
        std::fs::write(path, report.to_csv())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(args: PredictArgs) -> Result<ExitCode> {
    echo_config(
        "predict",
        serde_json::json!({
            "corpus": args.corpus, "model": args.model, "out": args.out,
            "heatmap": args.heatmap,
        }),
    );
    let docs = parse_corpus(&args.corpus)?;
    let checkpoint = load_checkpoint(&args.model)?;
    let reps = load_embeddings_if_needed(&checkpoint.encoder, args.embeddings.as_ref())?;
    if let Some(dir) = &args.heatmap {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let mut lines = String::new();
    for doc in &docs {
        let extraction = extract(doc, &checkpoint, reps.as_ref())?;
        let record = serde_json::json!({
            "doc_id": doc.doc_id,
            "pairs": extraction.pairs.iter().collect::<Vec<_>>(),
            "emo_clauses": extraction.emo_clauses.iter().collect::<Vec<_>>(),
            "cause_clauses": extraction.cause_clauses.iter().collect::<Vec<_>>(),
        });
        lines.push_str(&record.to_string());
        lines.push('\n');
        if let Some(dir) = &args.heatmap {
            let path = dir.join(format!("{}.csv", doc.doc_id));
            std::fs::write(&path, confidence_matrix_csv(&extraction))
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    std::fs::write(&args.out, lines).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    println!("wrote predictions for {} documents to {}", docs.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_graph_dump(args: GraphDumpArgs) -> Result<ExitCode> {
    if args.n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let ablation: AblationMode = args.ablation.parse()?;
    echo_config(
        "graph-dump",
        serde_json::json!({
            "n": args.n, "lambda": args.lambda, "ablation": ablation.label(),
            "out": args.out,
        }),
    );
    let pairs = enumerate_pairs(args.n, args.lambda);
    let graph = build_graph(args.n, &pairs, ablation);
    let dump = graph.dump_edges();
    match &args.out {
        Some(path) => std::fs::write(path, dump)
            .map_err(|e| Error::io(path.display().to_string(), e))?,
        None => print!("{dump}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64) -> Result<ExitCode> {
    echo_config("gradcheck", serde_json::json!({ "seed": seed, "tolerance": 1e-4 }));
    let report = model_gradcheck(seed)?;
    println!(
        "checked {} parameter entries; max relative error {:.3e} at {}",
        report.entries_checked, report.max_rel_error, report.worst_param
    );
    if report.passes(1e-4) {
        println!("gradcheck PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck FAIL (tolerance 1e-4)");
        Ok(ExitCode::from(2))
    }
}
