use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hopqg::corpus::{
    compute_stats, filter_by_question_length, load_and_validate, load_lenient, read_header,
    split_reserve_dev, write_jsonl, AnnotatedExample, FileHeader,
};
use hopqg::encoding::Prepared;
use hopqg::error::QgError;
use hopqg::graph::build_graph;
use hopqg::inference::{generate_all, Decoder, GenerationRecord};
use hopqg::metrics::{evaluate, gleu_diff_report, metric_tokens};
use hopqg::model::{load_checkpoint, Model};
use hopqg::synthetic::{synthetic_corpus, synthetic_vocabulary};
use hopqg::tokenizer::Vocabulary;
use hopqg::trainer::{prepare_corpus, train};
use serde::Serialize;

use crate::args::*;
use crate::config::{config_error, RunConfig};

pub const RUN_CONFIG: &str = "run.toml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const PIECES_FILE: &str = "pieces.txt";

/// Loads the config; `fallback` is used when no `--config` is given.
fn load_config(common: &Common, fallback: Option<PathBuf>) -> Result<(RunConfig, String)> {
    let file = common.config.clone().or(fallback.filter(|p| p.exists()));
    let cfg = RunConfig::load(file.as_deref(), common.seed)?;
    Ok((cfg, file.map_or("none".to_string(), |p| p.display().to_string())))
}

/// Prints the effective values of the sections the command uses, after
/// flag overrides.
fn announce(cfg: &RunConfig, source: &str, sections: &[&str]) -> Result<()> {
    let mut err = std::io::stderr().lock();
    writeln!(err, "# config precedence: flag > file > default; file: {source}")?;
    if let Some(s) = cfg.seed {
        writeln!(err, "seed = {s}")?;
    }
    if !sections.is_empty() {
        write!(err, "{}", cfg.sections_toml(sections))?;
    }
    writeln!(err)?;
    Ok(())
}

/// Loads and announces a config no flag overrides.
fn startup(common: &Common, sections: &[&str]) -> Result<RunConfig> {
    let (cfg, source) = load_config(common, None)?;
    announce(&cfg, &source, sections)?;
    Ok(cfg)
}

fn load(path: &Path) -> Result<Vec<AnnotatedExample>> {
    load_and_validate(path).with_context(|| format!("loading {}", path.display()))
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn write_annotated(path: &Path, header: Option<&FileHeader>, records: &[AnnotatedExample]) -> Result<()> {
    write_jsonl(path, records).with_context(|| format!("writing {}", path.display()))?;
    if let Some(h) = header {
        let body = fs::read_to_string(path)?;
        #[derive(Serialize)]
        struct Line<'a> {
            header: &'a FileHeader,
        }
        let line = serde_json::to_string(&Line { header: h })?;
        fs::write(path, format!("{line}\n{body}"))?;
    }
    Ok(())
}

fn require_out(common: &Common, what: &str) -> Result<PathBuf> {
    common
        .out
        .clone()
        .ok_or_else(|| config_error(format!("--out {what} is required")))
}

#[derive(Serialize)]
struct Violation {
    line: usize,
    reason: String,
}

#[derive(Serialize)]
struct ValidationReport {
    file: PathBuf,
    header: Option<FileHeader>,
    records: usize,
    valid: usize,
    violations: Vec<Violation>,
}

/// Exit status 1 when any record is invalid.
pub fn validate(a: &ValidateArgs) -> Result<u8> {
    startup(&a.common, &[])?;
    let (kept, rejected) = load_lenient(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let report = ValidationReport {
        file: a.input.clone(),
        header: read_header(&a.input)?,
        records: kept.len() + rejected.len(),
        valid: kept.len(),
        violations: rejected
            .into_iter()
            .map(|r| Violation { line: r.line, reason: r.reason })
            .collect(),
    };
    write_json(a.common.out.as_deref(), &report)?;
    Ok(if report.violations.is_empty() { 0 } else { 1 })
}

pub fn filter(a: &FilterArgs) -> Result<u8> {
    let (mut cfg, source) = load_config(&a.common, None)?;
    if let Some(m) = a.max_words {
        cfg.train.max_question_words = m;
    }
    announce(&cfg, &source, &["train"])?;
    let out = match (&a.output, &a.common.out) {
        (Some(p), None) | (None, Some(p)) => p.clone(),
        (Some(_), Some(_)) => return Err(config_error("give the output either positionally or with --out")),
        (None, None) => return Err(config_error("an output path is required")),
    };
    let examples = load(&a.input)?;
    let (kept, report) = filter_by_question_length(&examples, cfg.train.max_question_words)?;
    write_annotated(&out, read_header(&a.input)?.as_ref(), &kept)?;
    let report_path = out.with_extension("report.json");
    write_json(Some(&report_path), &report)?;
    write_json(None, &report)?;
    Ok(0)
}

pub fn split(a: &SplitArgs) -> Result<u8> {
    let (mut cfg, source) = load_config(&a.common, None)?;
    if let Some(n) = a.n_dev {
        cfg.split.n_dev = n;
    }
    announce(&cfg, &source, &["split"])?;
    let dir = require_out(&a.common, "DIR")?;
    let examples = load(&a.input)?;
    let (train, dev) = split_reserve_dev(&examples, cfg.split.n_dev, cfg.train.seed)?;
    fs::create_dir_all(&dir)?;
    let header = read_header(&a.input)?;
    write_annotated(&dir.join("train.jsonl"), header.as_ref(), &train)?;
    write_annotated(&dir.join("dev.jsonl"), header.as_ref(), &dev)?;
    println!("train {} dev {}", train.len(), dev.len());
    Ok(0)
}

pub fn stats(a: &StatsArgs) -> Result<u8> {
    startup(&a.common, &[])?;
    let examples = load(&a.input)?;
    write_json(a.common.out.as_deref(), &compute_stats(&examples))?;
    Ok(0)
}

pub fn synth(a: &SynthArgs) -> Result<u8> {
    let (mut cfg, source) = load_config(&a.common, None)?;
    if let Some(n) = a.examples {
        cfg.synth.examples = n;
    }
    if let Some(f) = a.long_fraction {
        if !(0.0..=1.0).contains(&f) {
            return Err(config_error(format!("long fraction {f} outside [0, 1]")));
        }
        cfg.synth.long_fraction = f;
    }
    announce(&cfg, &source, &["synth"])?;
    let out = require_out(&a.common, "FILE")?;
    let examples = synthetic_corpus(&cfg.synth);
    write_annotated(&out, None, &examples)?;
    if let Some(v) = &a.vocab_out {
        synthetic_vocabulary()?.save(v)?;
    }
    println!("wrote {} examples to {}", examples.len(), out.display());
    Ok(0)
}

/// Every whitespace token a model can read or write for these examples.
fn vocabulary_lines(examples: &[AnnotatedExample]) -> Vec<String> {
    let mut lines = vec!["yes no".to_string()];
    for ex in examples {
        for doc in &ex.documents {
            lines.extend(doc.sentences.iter().map(|s| s.join(" ")));
        }
        lines.push(ex.question.join(" "));
    }
    lines
}

#[derive(Serialize)]
struct TrainSummary {
    examples: usize,
    dev_examples: usize,
    removed_by_filter: Option<usize>,
    vocab_size: usize,
    parameters: usize,
    steps: u64,
    final_nll: Option<f64>,
    best_step: Option<u64>,
    best_dev_bleu: Option<f64>,
}

pub fn train_cmd(a: &TrainArgs) -> Result<u8> {
    let (mut cfg, source) = load_config(&a.common, None)?;
    if let Some(arch) = a.arch {
        cfg.model.graph_enabled = arch == Arch::Gate;
    }
    if let Some(n) = a.max_steps {
        cfg.train.max_steps = n;
    }
    if let Some(l) = a.lambda {
        cfg.model.lambda = l;
    }
    if let Some(s) = a.lr_scale {
        cfg.train.lr_scale = s;
    }
    if let Some(b) = a.token_budget {
        cfg.train.token_budget = b;
    }
    if a.no_filter {
        cfg.train.filter_questions = false;
    }
    if let Some(m) = a.parallelism {
        cfg.train.parallelism = m.into();
    }
    announce(&cfg, &source, &["vocab", "model", "encoding", "graph", "train"])?;
    cfg.train.validate()?;
    let dir = require_out(&a.common, "DIR")?;

    let data = load(&a.data)?;
    let dev = a.dev.as_deref().map(load).transpose()?.unwrap_or_default();
    let vocab = match (&a.vocab, &a.pieces) {
        (Some(v), _) => Vocabulary::load(v)?,
        (None, Some(p)) => Vocabulary::load_piece_inventory(p)?,
        (None, None) => Vocabulary::build(vocabulary_lines(&data), cfg.vocab.max_size)?,
    };
    cfg.model.vocab_size = vocab.len();
    cfg.model.n_relations = cfg.graph.relation_count();
    cfg.model.validate()?;

    let mode = cfg.train.parallelism;
    let filter = cfg.train.filter_questions.then_some(cfg.train.max_question_words);
    let (train_set, report) = prepare_corpus(&data, &vocab, &cfg.encoding, &cfg.graph, filter, mode)?;
    let (dev_set, _) = prepare_corpus(&dev, &vocab, &cfg.encoding, &cfg.graph, None, mode)?;

    fs::create_dir_all(&dir)?;
    fs::write(dir.join(RUN_CONFIG), cfg.to_toml())?;
    let vocab_file = if a.pieces.is_some() { PIECES_FILE } else { VOCAB_FILE };
    vocab.save(&dir.join(vocab_file))?;

    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let result = train(&mut model, &train_set, &dev_set, &vocab, &cfg.train, Some(&dir))?;
    let summary = TrainSummary {
        examples: train_set.len(),
        dev_examples: dev_set.len(),
        removed_by_filter: report.map(|r| r.removed),
        vocab_size: vocab.len(),
        parameters: model.params.parameter_count(),
        steps: result.steps,
        final_nll: result.log.last().map(|r| r.nll),
        best_step: result.best_step,
        best_dev_bleu: result.best_dev_bleu,
    };
    write_json(Some(&dir.join("train_report.json")), &result)?;
    write_json(None, &summary)?;
    Ok(0)
}

/// Accepts a checkpoint given with or without its `.json`/`.bin` suffix.
fn checkpoint_stem(p: &Path) -> PathBuf {
    match p.extension().and_then(|e| e.to_str()) {
        Some("json" | "bin") => p.with_extension(""),
        _ => p.to_path_buf(),
    }
}

fn run_dir(stem: &Path) -> PathBuf {
    stem.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run_vocabulary(stem: &Path, explicit: Option<&Path>) -> Result<Vocabulary> {
    if let Some(v) = explicit {
        return Ok(Vocabulary::load(v)?);
    }
    let dir = run_dir(stem);
    let pieces = dir.join(PIECES_FILE);
    if pieces.exists() {
        return Ok(Vocabulary::load_piece_inventory(&pieces)?);
    }
    let path = dir.join(VOCAB_FILE);
    Vocabulary::load(&path).with_context(|| format!("no vocabulary at {}; pass --vocab", path.display()))
}

fn apply_decode(cfg: &mut RunConfig, d: &DecodeArgs) -> Result<()> {
    if let Some(w) = d.beam_width {
        cfg.decode.beam_width = w;
    }
    if let Some(n) = d.max_len {
        cfg.decode.max_len = n;
    }
    if let Some(x) = d.length_alpha {
        cfg.decode.length_alpha = x;
    }
    if let Some(t) = d.sf_threshold {
        cfg.decode.sf_threshold = t;
    }
    if let Some(m) = d.parallelism {
        cfg.train.parallelism = m.into();
    }
    cfg.decode.validate()?;
    Ok(())
}

fn load_model(stem: &Path, vocab: &Vocabulary, cfg: &RunConfig) -> Result<Model> {
    let (model, _) = load_checkpoint(stem, Some(&vocab.content_hash()))
        .with_context(|| format!("loading checkpoint {}", stem.display()))?;
    if model.config.graph_enabled && model.config.n_relations != cfg.graph.relation_count() {
        return Err(config_error(format!(
            "checkpoint {} has {} relations, graph config gives {}",
            stem.display(),
            model.config.n_relations,
            cfg.graph.relation_count()
        )));
    }
    Ok(model)
}

fn prepare(cfg: &RunConfig, vocab: &Vocabulary, data: &Path) -> Result<Vec<Prepared>> {
    let examples = load(data)?;
    let (prepared, _) =
        prepare_corpus(&examples, vocab, &cfg.encoding, &cfg.graph, None, cfg.train.parallelism)?;
    Ok(prepared)
}

fn write_generations(common: &Common, records: &[GenerationRecord]) -> Result<u8> {
    let out = require_out(common, "FILE")?;
    write_jsonl(&out, records)?;
    let truncated = records.iter().filter(|r| r.truncated).count();
    println!("wrote {} generations to {} ({truncated} truncated)", records.len(), out.display());
    Ok(0)
}

pub fn generate(a: &GenerateArgs) -> Result<u8> {
    let stem = checkpoint_stem(&a.checkpoint);
    let fallback = Some(run_dir(&stem).join(RUN_CONFIG));
    let (mut cfg, source) = load_config(&a.common, fallback)?;
    apply_decode(&mut cfg, &a.decode)?;
    announce(&cfg, &source, &["encoding", "graph", "decode"])?;
    let vocab = run_vocabulary(&stem, a.vocab.as_deref())?;
    let model = load_model(&stem, &vocab, &cfg)?;
    let data = prepare(&cfg, &vocab, &a.data)?;
    let records = generate_all(Decoder::Single(&model), &data, &vocab, &cfg.decode, cfg.train.parallelism)?;
    write_generations(&a.common, &records)
}

pub fn ensemble_generate(a: &EnsembleArgs) -> Result<u8> {
    let (sa, sb) = (checkpoint_stem(&a.a), checkpoint_stem(&a.b));
    let fallback = Some(run_dir(&sa).join(RUN_CONFIG));
    let (mut cfg, source) = load_config(&a.common, fallback)?;
    apply_decode(&mut cfg, &a.decode)?;
    if let Some(x) = a.alpha {
        cfg.ensemble.alpha = x;
    }
    announce(&cfg, &source, &["encoding", "graph", "decode", "ensemble"])?;
    let vocab = run_vocabulary(&sa, a.vocab.as_deref())?;
    let (ma, mb) = (load_model(&sa, &vocab, &cfg)?, load_model(&sb, &vocab, &cfg)?);
    let decoder = Decoder::Ensemble { a: &ma, b: &mb, alpha: cfg.ensemble.alpha };
    decoder.validate().map_err(|e| config_error(e.to_string()))?;
    let data = prepare(&cfg, &vocab, &a.data)?;
    let records = generate_all(decoder, &data, &vocab, &cfg.decode, cfg.train.parallelism)?;
    write_generations(&a.common, &records)
}

fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                QgError::Validation { line: i + 1, reason: format!("{}: {e}", path.display()) }.into()
            })
        })
        .collect()
}

/// Orders generation records like `refs`; every reference needs exactly one.
fn align(records: Vec<GenerationRecord>, refs: &[AnnotatedExample], path: &Path) -> Result<Vec<GenerationRecord>> {
    let n = records.len();
    let mut by_id: BTreeMap<String, GenerationRecord> = BTreeMap::new();
    for r in records {
        if by_id.insert(r.id.clone(), r).is_some() {
            return Err(QgError::Alignment(format!("{} repeats an id", path.display())).into());
        }
    }
    let aligned = refs
        .iter()
        .map(|ex| {
            by_id.remove(&ex.id).ok_or_else(|| {
                QgError::Alignment(format!("{} has no generation for {}", path.display(), ex.id))
            })
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if aligned.len() != n {
        return Err(QgError::Alignment(format!(
            "{} has {} generations without a reference",
            path.display(),
            n - aligned.len()
        ))
        .into());
    }
    Ok(aligned)
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> Result<u8> {
    let (mut cfg, source) = load_config(&a.common, None)?;
    if let Some(b) = a.rouge_beta {
        cfg.eval.rouge_beta = b;
    }
    if let Some(m) = a.margin {
        cfg.eval.gleu_margin = m;
    }
    announce(&cfg, &source, &["eval"])?;
    if !(cfg.eval.rouge_beta > 0.0 && cfg.eval.gleu_margin >= 0.0) {
        return Err(config_error("rouge beta must be positive and margin non-negative"));
    }
    let refs = load(&a.reference)?;
    let hyps = align(read_generations(&a.hyp)?, &refs, &a.hyp)?;
    let hyp_text: Vec<String> = hyps.iter().map(|h| h.question_text.clone()).collect();
    let ref_text: Vec<String> = refs.iter().map(|r| r.question.join(" ")).collect();
    let pred: Vec<BTreeSet<(usize, usize)>> = hyps
        .iter()
        .map(|h| h.predicted_supporting_facts.iter().copied().collect())
        .collect();
    let gold: Vec<BTreeSet<(usize, usize)>> = refs.iter().map(AnnotatedExample::supporting_set).collect();
    let report = evaluate(&hyp_text, &ref_text, Some((&pred, &gold)), cfg.eval.rouge_beta, &cfg.hash())?;

    let comparison = match &a.compare {
        Some(path) => {
            let other = align(read_generations(path)?, &refs, path)?;
            let tok = |v: &[String]| v.iter().map(|s| metric_tokens(s)).collect::<Vec<_>>();
            let b_text: Vec<String> = other.into_iter().map(|h| h.question_text).collect();
            Some(gleu_diff_report(&tok(&hyp_text), &tok(&b_text), &tok(&ref_text), cfg.eval.gleu_margin)?)
        }
        None => None,
    };
    let value = match comparison {
        Some(c) => serde_json::json!({ "report": report, "comparison": c }),
        None => serde_json::to_value(&report)?,
    };
    write_json(a.common.out.as_deref(), &value)?;
    Ok(0)
}

pub fn graph_dump(a: &GraphDumpArgs) -> Result<u8> {
    let cfg = startup(&a.common, &["graph"])?;
    let examples = load(&a.input)?;
    let selected: Vec<&AnnotatedExample> = match &a.id {
        Some(id) => {
            let found: Vec<_> = examples.iter().filter(|e| &e.id == id).collect();
            if found.is_empty() {
                bail!("no example with id {id}");
            }
            found
        }
        None => examples.iter().collect(),
    };
    let mut text = String::new();
    for ex in selected {
        let g = build_graph(ex, &cfg.graph);
        text += &serde_json::to_string(&serde_json::json!({ "id": ex.id, "graph": g }))?;
        text.push('\n');
    }
    match &a.common.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(0)
}
