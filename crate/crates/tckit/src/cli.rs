//! Command-line interface: pretrain, finetune, classify, embed, eval.
//!
//! All randomness flows from `--seed`; identical arguments and input
//! files produce identical checkpoints and identical metrics (up to
//! the wall-clock `seconds` field). Usage problems (unknown flags,
//! missing files, invalid config) exit with code 2, runtime failures
//! with code 1.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, METRICS_FILE};
use crate::corpus::{self, ExpandedExample, LabelSet};
use crate::error::{Error, Result};
use crate::eval;
use crate::prompt::PromptTemplate;
use crate::similarity;
use crate::trainer::{self, EpochMetrics, TrainConfig};

#[derive(Parser)]
#[command(
    name = "tckit",
    version,
    about = "Desk-scale prompt-based continued pre-training and few-shot topic classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train an encoder on a labeled corpus.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint with the joint masked-label +
    /// classification objective.
    Finetune(FinetuneArgs),
    /// Classify a labeled test file and print an accuracy report.
    Classify(ClassifyArgs),
    /// Write prompted sentence embeddings, one JSON record per line.
    Embed(EmbedArgs),
    /// Score a prediction file against a gold file.
    Eval(EvalArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON training config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset: one {"text": ..., "labels": [...]} record per line.
    #[arg(long)]
    data: PathBuf,
    /// Label-set file, one label per line, order significant.
    #[arg(long)]
    labels: PathBuf,
    /// Prompt template: pretrain | 1 | 2 | path to a pattern file.
    #[arg(long, default_value = "pretrain")]
    prompt: String,
    /// Pre-training objective: mlm | simcse | moco.
    #[arg(long)]
    objective: Option<String>,
    /// Momentum coefficient for the moco objective.
    #[arg(long)]
    momentum: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "1")]
    prompt: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClassifyMode {
    Finetune,
    Similarity,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled test records to classify and score.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_enum)]
    mode: ClassifyMode,
    /// Whiten embeddings before similarity scoring.
    #[arg(long)]
    whitening: bool,
    /// Labeled support records (similarity mode).
    #[arg(long)]
    support: Option<PathBuf>,
    #[arg(long, default_value = "1")]
    prompt: String,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Replace the label slot with MASK tokens instead of writing
    /// labels into the prompt.
    #[arg(long)]
    masked: bool,
    /// Label-set file; sets the MASK span width in masked mode.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value = "1")]
    prompt: String,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted labels, one per line.
    #[arg(long)]
    pred: PathBuf,
    /// Gold labels, one per line.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses argv and runs the selected command, returning the process
/// exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Classify(args) => cmd_classify(args),
        Command::Embed(args) => cmd_embed(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("tckit: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let raw = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&raw)
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))
        }
    }
}

fn load_expanded(data: &Path, labels: &LabelSet) -> Result<Vec<ExpandedExample>> {
    let samples = corpus::load_corpus(data)?;
    corpus::expand_multilabel(&samples, labels)
}

fn write_metrics(dir: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let path = dir.join(METRICS_FILE);
    fs::write(&path, trainer::metrics_to_jsonl(metrics)).map_err(|e| Error::io(&path, e))
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(o) = &args.objective {
        cfg.objective = o.parse()?;
    }
    if let Some(m) = args.momentum {
        cfg.momentum = m;
    }
    if let Some(t) = args.temperature {
        cfg.temperature = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let labels = LabelSet::from_file(&args.labels)?;
    let examples = load_expanded(&args.data, &labels)?;
    let template = PromptTemplate::resolve(&args.prompt)?;
    let (ckpt, metrics) = trainer::pretrain(&examples, &labels, &template, &cfg)?;
    ckpt.save(&args.out)?;
    write_metrics(&args.out, &metrics)?;
    if let Some(last) = metrics.last() {
        print_stdout(&format!(
            "pretrained objective={} epochs={} examples={} loss_total={:.6} -> {}\n",
            cfg.objective,
            metrics.len(),
            examples.len(),
            last.loss_total,
            args.out.display()
        ));
    }
    Ok(())
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let labels = LabelSet::from_file(&args.labels)?;
    let examples = load_expanded(&args.data, &labels)?;
    let template = PromptTemplate::resolve(&args.prompt)?;
    let (ckpt, metrics) = trainer::finetune(ckpt, &examples, &labels, &template, &cfg)?;
    ckpt.save(&args.out)?;
    write_metrics(&args.out, &metrics)?;
    if let Some(last) = metrics.last() {
        print_stdout(&format!(
            "finetuned epochs={} examples={} loss_total={:.6} -> {}\n",
            metrics.len(),
            examples.len(),
            last.loss_total,
            args.out.display()
        ));
    }
    Ok(())
}

/// Writes to stdout, treating a closed pipe as a normal exit request
/// rather than a panic.
fn print_stdout(body: &str) {
    let mut out = std::io::stdout().lock();
    if out.write_all(body.as_bytes()).is_err() || out.flush().is_err() {
        std::process::exit(0);
    }
}

fn emit_report(report: &eval::EvalReport, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serialize");
    if let Some(path) = out {
        fs::write(path, json.clone() + "\n").map_err(|e| Error::io(path, e))?;
    }
    print_stdout(&(json + "\n"));
    Ok(())
}

fn cmd_classify(args: ClassifyArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let labels = LabelSet::from_file(&args.labels)?;
    let queries = load_expanded(&args.data, &labels)?;
    let template = PromptTemplate::resolve(&args.prompt)?;
    let report = match args.mode {
        ClassifyMode::Finetune => {
            let texts: Vec<&str> = queries.iter().map(|e| e.text.as_str()).collect();
            let preds = trainer::predict_with_head(&ckpt, &texts, &template)?;
            let gold: Vec<String> = queries.iter().map(|e| e.label.clone()).collect();
            eval::accuracy(&preds, &gold)?
        }
        ClassifyMode::Similarity => {
            let support_path = args.support.as_deref().ok_or_else(|| {
                Error::config("--mode similarity needs --support <labeled records>")
            })?;
            let support = load_expanded(support_path, &labels)?;
            let result = similarity::evaluate_similarity(
                &ckpt,
                &support,
                &queries,
                &labels,
                &template,
                args.whitening,
            )?;
            if let Some(clamped) = result.clamped_dims {
                if clamped > 0 {
                    let s = if clamped == 1 { "" } else { "s" };
                    eprintln!("tckit: whitening clamped {clamped} zero-variance direction{s}");
                }
            }
            eval::accuracy(&result.predictions, &result.gold)?
        }
    };
    emit_report(&report, args.out.as_deref())
}

#[derive(Serialize)]
struct EmbedRecord {
    id: usize,
    label_or_mask: String,
    vector: Vec<f32>,
}

fn cmd_embed(args: EmbedArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let template = PromptTemplate::resolve(&args.prompt)?;
    let samples = corpus::load_corpus(&args.data)?;
    let mut records = Vec::new();
    if args.masked {
        let labels_path = args
            .labels
            .as_deref()
            .ok_or_else(|| Error::config("--masked needs --labels to size the MASK span"))?;
        let labels = LabelSet::from_file(labels_path)?;
        let span = labels.mask_span();
        for (id, s) in samples.iter().enumerate() {
            let rep =
                similarity::embed(&ckpt, &template, &s.text, &similarity::EmbedMode::Masked(span))?;
            records.push(EmbedRecord {
                id,
                label_or_mask: "[MASK]".into(),
                vector: rep.iter().map(|&x| x as f32).collect(),
            });
        }
    } else {
        let mut id = 0usize;
        for s in &samples {
            for label in &s.labels {
                let rep = similarity::embed(
                    &ckpt,
                    &template,
                    &s.text,
                    &similarity::EmbedMode::Filled(label.clone()),
                )?;
                records.push(EmbedRecord {
                    id,
                    label_or_mask: label.clone(),
                    vector: rep.iter().map(|&x| x as f32).collect(),
                });
                id += 1;
            }
        }
    }
    let mut body = String::new();
    for r in &records {
        body.push_str(&serde_json::to_string(r).expect("record serialize"));
        body.push('\n');
    }
    match &args.out {
        Some(path) => fs::write(path, body).map_err(|e| Error::io(path, e))?,
        None => print_stdout(&body),
    }
    Ok(())
}

fn read_label_lines(path: &Path) -> Result<Vec<String>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(raw.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let pred = read_label_lines(&args.pred)?;
    let gold = read_label_lines(&args.gold)?;
    let report = eval::accuracy(&pred, &gold)?;
    emit_report(&report, args.out.as_deref())
}
