//! Optimization loop: warmup schedule, token-budget batching, composite
//! loss training, checkpoints and dev-BLEU model selection.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use numkit::{adam_step, AdamState, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{filter_by_question_length, AnnotatedExample, FilterReport};
use crate::encoding::{prepare_example, EncodingConfig, Prepared};
use crate::error::{QgError, Result};
use crate::graph::GraphConfig;
use crate::inference::{generate_all, DecodeConfig, Decoder};
use crate::metrics::{bleu4, metric_tokens};
use crate::model::{save_checkpoint, Model, ParamStore};
use crate::par::{self, Parallelism};
use crate::tokenizer::Vocabulary;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.997;
pub const ADAM_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Cap on padded source plus target tokens per batch.
    pub token_budget: usize,
    pub max_steps: u64,
    pub warmup_steps: u64,
    /// Multiplier on the scheduled learning rate.
    pub lr_scale: f64,
    pub seed: u64,
    /// Checkpoint and dev evaluation cadence in steps; 0 means only at the end.
    pub checkpoint_every: u64,
    pub filter_questions: bool,
    pub max_question_words: usize,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Longest greedy decode during dev evaluation.
    pub dev_max_len: usize,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            token_budget: 12_000,
            max_steps: 2_000,
            warmup_steps: 16_000,
            lr_scale: 1.0,
            seed: 0,
            checkpoint_every: 500,
            filter_questions: true,
            max_question_words: 30,
            grad_clip: None,
            dev_max_len: 64,
            parallelism: Parallelism::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(QgError::Config("warmup_steps must be at least 1".into()));
        }
        if self.token_budget == 0 || self.max_steps == 0 {
            return Err(QgError::Config("token_budget and max_steps must be positive".into()));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(QgError::Config(format!("lr_scale {}", self.lr_scale)));
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(QgError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// `2 d^-0.5 min(step^-0.5, step warmup^-1.5)`.
pub fn lr(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(QgError::Config("learning-rate step starts at 1".into()));
    }
    if warmup == 0 {
        return Err(QgError::Config("warmup must be at least 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(2.0 / (d_model as f64).sqrt() * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub max_source: usize,
    pub max_target: usize,
    /// Per example, true over real tokens of the padded source row.
    pub source_mask: Vec<Vec<bool>>,
    pub target_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn padded_tokens(&self) -> usize {
        self.indices.len() * (self.max_source + self.max_target)
    }
}

/// Groups examples of similar length so each batch's padded source plus
/// target token count stays within `budget`. `lengths` holds
/// `(source, target)` per example.
pub fn make_batches(lengths: &[(usize, usize)], budget: usize, seed: u64) -> Result<Vec<Batch>> {
    if let Some((i, (s, t))) = lengths.iter().enumerate().find(|(_, (s, t))| s + t > budget) {
        return Err(QgError::Config(format!(
            "example {i} needs {} tokens, over the batch budget {budget}",
            s + t
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| lengths[i].0 + lengths[i].1);

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let (mut cur, mut ms, mut mt) = (Vec::new(), 0, 0);
    for i in order {
        let (s, t) = lengths[i];
        let (ns, nt) = (ms.max(s), mt.max(t));
        if !cur.is_empty() && (cur.len() + 1) * (ns + nt) > budget {
            groups.push(std::mem::take(&mut cur));
            (ms, mt) = (s, t);
        } else {
            (ms, mt) = (ns, nt);
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        groups.push(cur);
    }
    groups.shuffle(&mut rng);
    Ok(groups
        .into_iter()
        .map(|indices| {
            let max_source = indices.iter().map(|&i| lengths[i].0).max().unwrap_or(0);
            let max_target = indices.iter().map(|&i| lengths[i].1).max().unwrap_or(0);
            let mask = |n: usize, m: usize| (0..m).map(|k| k < n).collect();
            Batch {
                source_mask: indices.iter().map(|&i| mask(lengths[i].0, max_source)).collect(),
                target_mask: indices.iter().map(|&i| mask(lengths[i].1, max_target)).collect(),
                indices,
                max_source,
                max_target,
            }
        })
        .collect())
}

/// Applies the question-length filter when enabled, then encodes every
/// example and builds its graph.
pub fn prepare_corpus(
    examples: &[AnnotatedExample],
    vocab: &Vocabulary,
    enc: &EncodingConfig,
    graph: &GraphConfig,
    filter: Option<usize>,
    mode: Parallelism,
) -> Result<(Vec<Prepared>, Option<FilterReport>)> {
    let (kept, report) = match filter {
        Some(max) => {
            let (k, r) = filter_by_question_length(examples, max)?;
            (k, Some(r))
        }
        None => (examples.to_vec(), None),
    };
    let prepared = par::map(mode, &kept, |_, ex| prepare_example(ex, vocab, enc, graph))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok((prepared, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub nll: f64,
    pub ct: f64,
    pub composite: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_bleu: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub log: Vec<StepRecord>,
    pub best_step: Option<u64>,
    pub best_dev_bleu: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub nll: f64,
    pub ct: f64,
    pub composite: f64,
}

struct ExampleGrad {
    nll: f64,
    ct: f64,
    composite: f64,
    grads: Vec<Option<Tensor>>,
}

fn example_seed(seed: u64, step: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ step.wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (index as u64).wrapping_mul(0x94D0_49BB_1331_11EB)
}

fn example_grad(model: &Model, p: &Prepared, tape_seed: u64) -> Result<ExampleGrad> {
    let mut tape = Tape::with_seed(tape_seed);
    let (w, vars) = model.bind(&mut tape, true);
    let l = model.losses(&mut tape, &w, p, true)?;
    let (nll, ct, composite) = (
        tape.value(l.nll).item()?,
        tape.value(l.ct).item()?,
        tape.value(l.composite).item()?,
    );
    if !composite.is_finite() {
        return Ok(ExampleGrad { nll, ct, composite, grads: Vec::new() });
    }
    tape.backward(l.composite)?;
    let grads = vars.iter().map(|&v| tape.grad(v).cloned()).collect();
    Ok(ExampleGrad { nll, ct, composite, grads })
}

/// Batch-mean losses and gradients, one tape per example.
pub fn batch_gradients(
    model: &Model,
    data: &[Prepared],
    indices: &[usize],
    seed: u64,
    step: u64,
    mode: Parallelism,
) -> Result<(LossSummary, Vec<Tensor>)> {
    let per = par::map(mode, indices, |_, &i| example_grad(model, &data[i], example_seed(seed, step, i)));
    let n = indices.len() as f64;
    let mut sum = LossSummary { nll: 0.0, ct: 0.0, composite: 0.0 };
    let mut grads: Vec<Tensor> = model.params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
    for r in per {
        let r = r?;
        sum.nll += r.nll;
        sum.ct += r.ct;
        sum.composite += r.composite;
        if !r.composite.is_finite() {
            continue;
        }
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            if let Some(g) = g {
                acc.add_assign(g);
            }
        }
    }
    for g in &mut grads {
        g.scale_assign(1.0 / n);
    }
    Ok((
        LossSummary {
            nll: sum.nll / n,
            ct: sum.ct / n,
            composite: sum.composite / n,
        },
        grads,
    ))
}

/// Mean losses over `data` with dropout off.
pub fn mean_losses(model: &Model, data: &[Prepared], mode: Parallelism) -> Result<LossSummary> {
    if data.is_empty() {
        return Err(QgError::EmptyInput("no examples to score".into()));
    }
    let per = par::map(mode, data, |_, p| {
        let mut tape = Tape::new();
        let (w, _) = model.bind(&mut tape, false);
        let l = model.losses(&mut tape, &w, p, false)?;
        Ok::<_, QgError>((
            tape.value(l.nll).item()?,
            tape.value(l.ct).item()?,
            tape.value(l.composite).item()?,
        ))
    });
    let mut s = LossSummary { nll: 0.0, ct: 0.0, composite: 0.0 };
    for r in per {
        let (a, b, c) = r?;
        s.nll += a;
        s.ct += b;
        s.composite += c;
    }
    let n = data.len() as f64;
    Ok(LossSummary {
        nll: s.nll / n,
        ct: s.ct / n,
        composite: s.composite / n,
    })
}

/// Corpus BLEU of greedy decodes against the gold questions.
pub fn dev_bleu(
    model: &Model,
    dev: &[Prepared],
    vocab: &Vocabulary,
    max_len: usize,
    mode: Parallelism,
) -> Result<f64> {
    let cfg = DecodeConfig {
        beam_width: 1,
        max_len,
        ..Default::default()
    };
    let out = generate_all(Decoder::Single(model), dev, vocab, &cfg, mode)?;
    let hyps: Vec<Vec<String>> = out.iter().map(|r| metric_tokens(&r.question_text)).collect();
    let refs: Vec<Vec<String>> = dev.iter().map(|p| metric_tokens(&p.example.question.join(" "))).collect();
    bleu4(&hyps, &refs)
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        for g in grads {
            g.scale_assign(max_norm / norm);
        }
    }
}

/// Trains `model` in place. With `out_dir` set, appends the metrics log
/// to `metrics.jsonl` and writes checkpoints there. With a non-empty dev
/// set, the checkpoint with the best dev BLEU is restored at the end.
pub fn train(
    model: &mut Model,
    data: &[Prepared],
    dev: &[Prepared],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(QgError::EmptyInput("no training examples".into()));
    }
    if vocab.len() != model.config.vocab_size {
        return Err(QgError::Config(format!(
            "vocabulary has {} pieces, model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let lengths: Vec<(usize, usize)> = data
        .iter()
        .map(|p| (p.encoded.source_len(), p.encoded.target_len()))
        .collect();
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(
                OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?,
            ))
        }
        None => None,
    };
    let vocab_hash = vocab.content_hash();
    let mut adam = {
        let tensors: Vec<&Tensor> = model.params.tensors().collect();
        AdamState::new(&tensors, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
    };
    let mut report = TrainReport {
        steps: 0,
        log: Vec::new(),
        best_step: None,
        best_dev_bleu: None,
        checkpoints: Vec::new(),
    };
    let mut best_params: Option<ParamStore> = None;
    let mut epoch = 0u64;
    let mut queue: Vec<Batch> = Vec::new();

    for step in 1..=cfg.max_steps {
        if queue.is_empty() {
            queue = make_batches(&lengths, cfg.token_budget, cfg.seed ^ epoch.wrapping_mul(0x2545_F491))?;
            queue.reverse();
            epoch += 1;
        }
        let batch = queue.pop().expect("batches are never empty");
        let (loss, mut grads) =
            batch_gradients(model, data, &batch.indices, cfg.seed, step, cfg.parallelism)?;
        if !loss.composite.is_finite() {
            return Err(QgError::NonFiniteLoss {
                step,
                batch: batch.indices.iter().map(|&i| data[i].example.id.clone()).collect(),
            });
        }
        if let Some(c) = cfg.grad_clip {
            clip_gradients(&mut grads, c);
        }
        let rate = lr(step, model.config.d_model, cfg.warmup_steps)? * cfg.lr_scale;
        {
            let mut params = model.params.tensors_mut();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam_step(&mut params, &grad_refs, &mut adam, rate)?;
        }

        let mut record = StepRecord {
            step,
            lr: rate,
            nll: loss.nll,
            ct: loss.ct,
            composite: loss.composite,
            dev_bleu: None,
        };
        let at_checkpoint =
            step == cfg.max_steps || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0);
        if at_checkpoint {
            if !dev.is_empty() {
                let bleu = dev_bleu(model, dev, vocab, cfg.dev_max_len, cfg.parallelism)?;
                record.dev_bleu = Some(bleu);
                // Later checkpoints win ties.
                if report.best_dev_bleu.is_none_or(|b| bleu >= b) {
                    report.best_dev_bleu = Some(bleu);
                    report.best_step = Some(step);
                    best_params = Some(model.params.clone());
                }
            }
            if let Some(dir) = out_dir {
                let stem = dir.join(format!("step-{step:06}"));
                save_checkpoint(model, &vocab_hash, step, &stem)?;
                report.checkpoints.push(stem);
            }
            log::info!("step {step}: nll {:.4} ct {:.4} dev_bleu {:?}", loss.nll, loss.ct, record.dev_bleu);
        }
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
        }
        report.log.push(record);
        report.steps = step;
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    if let Some(best) = best_params {
        model.params = best;
    }
    if let Some(dir) = out_dir {
        save_checkpoint(model, &vocab_hash, report.best_step.unwrap_or(report.steps), &dir.join("best"))?;
    }
    Ok(report)
}

/// Reads a metrics log back.
pub fn read_metrics_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Writes a training config next to checkpoints, for provenance.
pub fn write_config<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.flush()?;
    Ok(())
}
