//! Greedy and beam-search decoding, two-model ensembles and
//! supporting-fact prediction.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::encoding::{EncodedInput, Prepared};
use crate::error::{QgError, Result};
use crate::model::{Memory, Model};
use crate::par::{self, Parallelism};
use crate::tokenizer::{Vocabulary, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_len: usize,
    /// Length-normalization exponent; 0 ranks by raw log-probability.
    pub length_alpha: f64,
    pub sf_threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 5,
            max_len: 64,
            length_alpha: 1.0,
            sf_threshold: 0.5,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_len == 0 {
            return Err(QgError::Config("beam width and max_len must be at least 1".into()));
        }
        if self.length_alpha.is_nan() || self.length_alpha < 0.0 {
            return Err(QgError::Config(format!("length alpha {}", self.length_alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated ids, without `<bos>`; ends with `<eos>` when finished.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamOutput {
    pub best: Hypothesis,
    /// No hypothesis reached `<eos>` within `max_len`.
    pub truncated: bool,
}

/// `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

fn hypothesis(tokens: Vec<u32>, log_prob: f64, alpha: f64) -> Hypothesis {
    Hypothesis {
        finished: tokens.last() == Some(&EOS),
        score: log_prob / length_penalty(tokens.len(), alpha),
        tokens,
        log_prob,
    }
}

fn by_log_prob(a: &(f64, Vec<u32>), b: &(f64, Vec<u32>)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

fn by_score(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search from `<bos>`. `step` maps a prefix (starting with `<bos>`)
/// to next-token log-probabilities.
///
/// Each step keeps the `width` best extensions by log-prob; those ending
/// in `<eos>` move to the finished pool. Search stops once no alive
/// hypothesis can still beat the best finished one.
pub fn beam_search<F>(mut step: F, width: usize, max_len: usize, alpha: f64) -> Result<BeamOutput>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    if width == 0 || max_len == 0 {
        return Err(QgError::Config("beam width and max_len must be at least 1".into()));
    }
    let mut alive: Vec<(f64, Vec<u32>)> = vec![(0.0, Vec::new())];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut prefix = Vec::with_capacity(max_len + 1);
    for _ in 0..max_len {
        let mut candidates = Vec::with_capacity(alive.len() * 8);
        for (lp, tokens) in &alive {
            prefix.clear();
            prefix.push(BOS);
            prefix.extend_from_slice(tokens);
            let next = step(&prefix)?;
            for (t, &l) in next.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut ext = tokens.clone();
                ext.push(t as u32);
                candidates.push((lp + l, ext));
            }
        }
        candidates.sort_by(by_log_prob);
        candidates.truncate(width);
        alive.clear();
        for (lp, tokens) in candidates {
            if tokens.last() == Some(&EOS) {
                finished.push(hypothesis(tokens, lp, alpha));
            } else {
                alive.push((lp, tokens));
            }
        }
        if alive.is_empty() {
            break;
        }
        // Log-probs only fall as hypotheses grow, so an alive hypothesis
        // scores at most its current log-prob over the longest penalty.
        if let Some(best) = finished.iter().map(|h| h.score).reduce(f64::max) {
            let ceiling = length_penalty(max_len, alpha);
            if alive.iter().all(|(lp, _)| lp / ceiling < best) {
                break;
            }
        }
    }
    let truncated = finished.is_empty();
    let pool = if truncated {
        alive.into_iter().map(|(lp, t)| hypothesis(t, lp, alpha)).collect()
    } else {
        finished
    };
    let best = pool
        .into_iter()
        .min_by(by_score)
        .ok_or_else(|| QgError::EmptyInput("every continuation has zero probability".into()))?;
    Ok(BeamOutput { best, truncated })
}

/// Argmax decoding; ties go to the lowest id.
pub fn greedy<F>(mut step: F, max_len: usize, alpha: f64) -> Result<BeamOutput>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    let mut prefix = vec![BOS];
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let next = step(&prefix)?;
        let (t, l) = next
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &l)| if l > best.1 { (i, l) } else { best });
        prefix.push(t as u32);
        log_prob += l;
        if t as u32 == EOS {
            break;
        }
    }
    let best = hypothesis(prefix[1..].to_vec(), log_prob, alpha);
    Ok(BeamOutput {
        truncated: !best.finished,
        best,
    })
}

/// `alpha * p_a + (1 - alpha) * p_b`, in probability space.
pub fn ensemble_step(p_a: &[f64], p_b: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_ensemble(p_a.len(), p_b.len(), alpha)?;
    Ok(p_a
        .iter()
        .zip(p_b)
        .map(|(&a, &b)| a + (1.0 - alpha) * (b - a))
        .collect())
}

/// Same mixture as [`ensemble_step`] on log-probabilities, computed
/// without leaving log space.
pub fn ensemble_log_step(l_a: &[f64], l_b: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_ensemble(l_a.len(), l_b.len(), alpha)?;
    Ok(l_a
        .iter()
        .zip(l_b)
        .map(|(&a, &b)| {
            if alpha == 1.0 {
                a
            } else if alpha == 0.0 {
                b
            } else if a >= b {
                a + ((1.0 - alpha) * ((b - a).exp() - 1.0)).ln_1p()
            } else {
                b + (alpha * ((a - b).exp() - 1.0)).ln_1p()
            }
        })
        .collect())
}

fn check_ensemble(a: usize, b: usize, alpha: f64) -> Result<()> {
    if a != b {
        return Err(QgError::Ensemble(format!("vocabulary sizes {a} and {b} differ")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(QgError::Ensemble(format!("weight {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Sentences whose classifier probability reaches `threshold`.
pub fn predict_supporting_facts(
    sf_probs: &[f64],
    encoded: &EncodedInput,
    threshold: f64,
) -> BTreeSet<(usize, usize)> {
    sf_probs
        .iter()
        .zip(&encoded.sep_sources)
        .filter(|(&p, _)| p >= threshold)
        .filter_map(|(_, s)| *s)
        .collect()
}

/// One model, or two combined per step.
#[derive(Clone, Copy, Debug)]
pub enum Decoder<'a> {
    Single(&'a Model),
    Ensemble {
        a: &'a Model,
        b: &'a Model,
        alpha: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub question_text: String,
    pub normalized_score: f64,
    pub predicted_supporting_facts: Vec<(usize, usize)>,
    pub truncated: bool,
}

impl Decoder<'_> {
    pub fn validate(&self) -> Result<()> {
        if let Decoder::Ensemble { a, b, alpha } = *self {
            check_ensemble(a.config.vocab_size, b.config.vocab_size, alpha)?;
        }
        Ok(())
    }

    /// Decodes one example and predicts its supporting facts.
    pub fn generate(&self, p: &Prepared, cfg: &DecodeConfig) -> Result<(BeamOutput, BTreeSet<(usize, usize)>)> {
        cfg.validate()?;
        let (out, sf_probs) = match *self {
            Decoder::Single(m) => {
                let mem = m.memory(p)?;
                let out = run(|prefix| m.next_log_probs(&mem, prefix), cfg)?;
                (out, mem.sf_probs)
            }
            Decoder::Ensemble { a, b, alpha } => {
                check_ensemble(a.config.vocab_size, b.config.vocab_size, alpha)?;
                let (ma, mb): (Memory, Memory) = (a.memory(p)?, b.memory(p)?);
                let out = run(
                    |prefix| {
                        let la = a.next_log_probs(&ma, prefix)?;
                        let lb = b.next_log_probs(&mb, prefix)?;
                        ensemble_log_step(&la, &lb, alpha)
                    },
                    cfg,
                )?;
                let sf = ensemble_step(&ma.sf_probs, &mb.sf_probs, alpha)?;
                (out, sf)
            }
        };
        let sf = predict_supporting_facts(&sf_probs, &p.encoded, cfg.sf_threshold);
        Ok((out, sf))
    }
}

fn run<F>(step: F, cfg: &DecodeConfig) -> Result<BeamOutput>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    if cfg.beam_width == 1 {
        greedy(step, cfg.max_len, cfg.length_alpha)
    } else {
        beam_search(step, cfg.beam_width, cfg.max_len, cfg.length_alpha)
    }
}

/// Decodes every example; examples are spread over workers, each beam
/// runs sequentially.
pub fn generate_all(
    decoder: Decoder<'_>,
    examples: &[Prepared],
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
    mode: Parallelism,
) -> Result<Vec<GenerationRecord>> {
    decoder.validate()?;
    par::map(mode, examples, |_, p| {
        let (out, sf) = decoder.generate(p, cfg)?;
        Ok(GenerationRecord {
            id: p.example.id.clone(),
            question_text: vocab.detokenize(&out.best.tokens)?,
            normalized_score: out.best.score,
            predicted_supporting_facts: sf.into_iter().collect(),
            truncated: out.truncated,
        })
    })
    .into_iter()
    .collect()
}
