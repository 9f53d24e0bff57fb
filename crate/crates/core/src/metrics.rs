//! Corpus BLEU-4, ROUGE-L, sentence GLEU, supporting-fact F1/EM and the
//! GLEU-difference comparison between two systems.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{QgError, Result};

/// Supporting facts of one example as `(doc, sentence)` pairs.
pub type FactSet = BTreeSet<(usize, usize)>;

pub const DEFAULT_ROUGE_BETA: f64 = 1.2;
pub const DEFAULT_GLEU_MARGIN: f64 = 20.0;
pub const TOKENIZATION_NOTE: &str = "lowercased whitespace tokens after subword detokenization";

/// Tokens the metrics compare: lowercased, split on whitespace.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(AsRef::as_ref).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_matches(hyp: &HashMap<Vec<&str>, usize>, reference: &HashMap<Vec<&str>, usize>) -> usize {
    hyp.iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Corpus-level BLEU-4 in `[0, 100]`: geometric mean of clipped 1-4-gram
/// precisions pooled over the corpus, times the brevity penalty. No
/// smoothing, so any zero precision gives 0.
pub fn bleu4<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(QgError::EmptyInput("BLEU over an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(QgError::Alignment(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            matches[n - 1] += clipped_matches(&hc, &ngram_counts(r, n));
            totals[n - 1] += hc.values().sum::<usize>();
        }
    }
    if matches.contains(&0) {
        return Ok(0.0);
    }
    let log_mean = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_mean.exp())
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence ROUGE-L F-measure in `[0, 100]`.
pub fn rouge_l_sentence<S: AsRef<str>>(hyp: &[S], reference: &[S], beta: f64) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hyp, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = beta * beta;
    100.0 * (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean sentence ROUGE-L over aligned pairs.
pub fn rouge_l<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>], beta: f64) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(QgError::EmptyInput("ROUGE-L over an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(QgError::Alignment(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let total: f64 = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| rouge_l_sentence(h, r, beta))
        .sum();
    Ok(total / hypotheses.len() as f64)
}

/// Sentence GLEU in `[0, 100]`: the smaller of precision and recall of
/// the pooled 1-4-gram multisets.
pub fn gleu<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    let (mut matches, mut h_total, mut r_total) = (0usize, 0usize, 0usize);
    for n in 1..=4 {
        let hc = ngram_counts(hyp, n);
        let rc = ngram_counts(reference, n);
        matches += clipped_matches(&hc, &rc);
        h_total += hc.values().sum::<usize>();
        r_total += rc.values().sum::<usize>();
    }
    if h_total == 0 || r_total == 0 {
        return 0.0;
    }
    100.0 * (matches as f64 / h_total as f64).min(matches as f64 / r_total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfScores {
    pub f1: f64,
    pub em: f64,
}

/// Macro-averaged F1 and exact match over `(doc, sentence)` sets, in
/// `[0, 100]`. Two empty sets count as a perfect match.
pub fn sf_scores(
    predicted: &[BTreeSet<(usize, usize)>],
    gold: &[BTreeSet<(usize, usize)>],
) -> Result<SfScores> {
    if predicted.len() != gold.len() {
        return Err(QgError::Alignment(format!(
            "{} predictions for {} gold sets",
            predicted.len(),
            gold.len()
        )));
    }
    if predicted.is_empty() {
        return Err(QgError::EmptyInput("no supporting-fact predictions".into()));
    }
    let (mut f1, mut em) = (0.0, 0.0);
    for (p, g) in predicted.iter().zip(gold) {
        if p == g {
            em += 1.0;
        }
        f1 += if p.is_empty() && g.is_empty() {
            1.0
        } else {
            let tp = p.intersection(g).count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                let (prec, rec) = (tp / p.len() as f64, tp / g.len() as f64);
                2.0 * prec * rec / (prec + rec)
            }
        };
    }
    let n = predicted.len() as f64;
    Ok(SfScores {
        f1: 100.0 * f1 / n,
        em: 100.0 * em / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GleuDiffReport {
    pub margin: f64,
    pub total: usize,
    pub a_wins: usize,
    pub b_wins: usize,
    pub a_fraction: f64,
    pub b_fraction: f64,
}

/// Counts examples where one system's GLEU beats the other's by at least
/// `margin` points.
pub fn gleu_diff_report<S: AsRef<str>>(
    a: &[Vec<S>],
    b: &[Vec<S>],
    references: &[Vec<S>],
    margin: f64,
) -> Result<GleuDiffReport> {
    if a.len() != b.len() || a.len() != references.len() {
        return Err(QgError::Alignment(format!(
            "output counts {} / {} do not match {} references",
            a.len(),
            b.len(),
            references.len()
        )));
    }
    let (mut a_wins, mut b_wins) = (0, 0);
    for ((x, y), r) in a.iter().zip(b).zip(references) {
        let (ga, gb) = (gleu(x, r), gleu(y, r));
        if ga >= gb + margin {
            a_wins += 1;
        } else if gb >= ga + margin {
            b_wins += 1;
        }
    }
    let total = a.len();
    let frac = |c: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
    Ok(GleuDiffReport {
        margin,
        total,
        a_wins,
        b_wins,
        a_fraction: frac(a_wins),
        b_fraction: frac(b_wins),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub examples: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub rouge_beta: f64,
    pub meteor: String,
    pub gleu_mean: f64,
    pub sf_f1: Option<f64>,
    pub sf_em: Option<f64>,
    pub config_hash: String,
    pub tokenization: String,
}

/// Scores generated questions against references, optionally with
/// supporting-fact predictions.
pub fn evaluate(
    hypotheses: &[String],
    references: &[String],
    supporting: Option<(&[FactSet], &[FactSet])>,
    rouge_beta: f64,
    config_hash: &str,
) -> Result<EvaluationReport> {
    let h: Vec<Vec<String>> = hypotheses.iter().map(|s| metric_tokens(s)).collect();
    let r: Vec<Vec<String>> = references.iter().map(|s| metric_tokens(s)).collect();
    let bleu = bleu4(&h, &r)?;
    let rouge = rouge_l(&h, &r, rouge_beta)?;
    let gleu_mean = h.iter().zip(&r).map(|(a, b)| gleu(a, b)).sum::<f64>() / h.len() as f64;
    let sf = supporting.map(|(p, g)| sf_scores(p, g)).transpose()?;
    Ok(EvaluationReport {
        examples: h.len(),
        bleu4: bleu,
        rouge_l: rouge,
        rouge_beta,
        meteor: "n/a".into(),
        gleu_mean,
        sf_f1: sf.map(|s| s.f1),
        sf_em: sf.map(|s| s.em),
        config_hash: config_hash.into(),
        tokenization: TOKENIZATION_NOTE.into(),
    })
}
