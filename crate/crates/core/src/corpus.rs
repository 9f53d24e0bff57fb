//! Canonical annotated examples: loading, validation, question-length
//! filtering, dev splitting and corpus statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QgError, Result};

/// Questions longer than this many words are pruned from training data.
pub const DEFAULT_MAX_QUESTION_WORDS: usize = 30;
pub const DEFAULT_DEV_SIZE: usize = 500;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub title: String,
    pub sentences: Vec<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", try_from = "RawAnswer")]
pub enum Answer {
    Span {
        doc: usize,
        sentence: usize,
        start: usize,
        end: usize,
    },
    Yes,
    No,
}

/// Wire form of [`Answer`]. Serde ignores `deny_unknown_fields` on unit
/// variants of a tagged enum, so offsets on yes/no are rejected here.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnswer {
    kind: String,
    doc: Option<usize>,
    sentence: Option<usize>,
    start: Option<usize>,
    end: Option<usize>,
}

impl TryFrom<RawAnswer> for Answer {
    type Error = String;

    fn try_from(r: RawAnswer) -> std::result::Result<Self, String> {
        let offsets = (r.doc, r.sentence, r.start, r.end);
        match (r.kind.as_str(), offsets) {
            ("span", (Some(doc), Some(sentence), Some(start), Some(end))) => Ok(Answer::Span {
                doc,
                sentence,
                start,
                end,
            }),
            ("span", _) => Err("span answer needs doc, sentence, start and end".into()),
            ("yes", (None, None, None, None)) => Ok(Answer::Yes),
            ("no", (None, None, None, None)) => Ok(Answer::No),
            ("yes" | "no", _) => Err(format!("{} answer carries span offsets", r.kind)),
            (k, _) => Err(format!("unknown answer kind `{k}`")),
        }
    }
}

impl Answer {
    pub fn literal(&self) -> Option<&'static str> {
        match self {
            Answer::Yes => Some("yes"),
            Answer::No => Some("no"),
            Answer::Span { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QType {
    Bridge,
    Comparison,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Easy,
    Medium,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityMention {
    pub doc: usize,
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub norm: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorefMention {
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorefDoc {
    pub doc: usize,
    pub clusters: Vec<Vec<CorefMention>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedExample {
    pub id: String,
    pub documents: Vec<Document>,
    pub answer: Answer,
    pub question: Vec<String>,
    /// `(doc, sentence)` pairs.
    pub supporting_facts: Vec<(usize, usize)>,
    pub qtype: QType,
    pub level: Level,
    #[serde(default)]
    pub entities: Vec<EntityMention>,
    #[serde(default)]
    pub coref: Vec<CorefDoc>,
}

/// Case-folded, whitespace-collapsed surface form.
pub fn normalize_surface(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whitespace words of the raw question text.
pub fn question_words(ex: &AnnotatedExample) -> usize {
    ex.question.iter().map(|t| t.split_whitespace().count()).sum()
}

impl AnnotatedExample {
    pub fn sentence(&self, doc: usize, sentence: usize) -> Option<&[String]> {
        self.documents
            .get(doc)
            .and_then(|d| d.sentences.get(sentence))
            .map(Vec::as_slice)
    }

    pub fn sentence_count(&self) -> usize {
        self.documents.iter().map(|d| d.sentences.len()).sum()
    }

    pub fn supporting_set(&self) -> BTreeSet<(usize, usize)> {
        self.supporting_facts.iter().copied().collect()
    }

    /// Normalized surface of an entity mention; falls back to its tokens
    /// when the record carries no `norm`.
    pub fn mention_norm(&self, m: &EntityMention) -> String {
        if !m.norm.trim().is_empty() {
            return normalize_surface(&m.norm);
        }
        self.sentence(m.doc, m.sentence)
            .and_then(|s| s.get(m.start..m.end))
            .map(|toks| normalize_surface(&toks.join(" ")))
            .unwrap_or_default()
    }

    /// Checks every record invariant; the error names the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.documents.len() != 2 {
            return Err(format!("expected 2 gold documents, found {}", self.documents.len()));
        }
        for (d, doc) in self.documents.iter().enumerate() {
            if doc.sentences.is_empty() {
                return Err(format!("document {d} has no sentences"));
            }
            if let Some(s) = doc.sentences.iter().position(Vec::is_empty) {
                return Err(format!("document {d} sentence {s} is empty"));
            }
        }
        if self.question.is_empty() {
            return Err("question is empty".into());
        }
        let span_ok = |doc: usize, sentence: usize, start: usize, end: usize| -> bool {
            self.sentence(doc, sentence)
                .is_some_and(|s| start < end && end <= s.len())
        };
        match self.answer {
            Answer::Span {
                doc,
                sentence,
                start,
                end,
            } => {
                if !span_ok(doc, sentence, start, end) {
                    return Err(format!(
                        "answer span doc {doc} sentence {sentence} tokens {start}..{end} is outside its sentence"
                    ));
                }
            }
            Answer::Yes | Answer::No => {
                if self.qtype != QType::Comparison {
                    return Err("yes/no answer on a non-comparison question".into());
                }
            }
        }
        for &(doc, sentence) in &self.supporting_facts {
            if self.sentence(doc, sentence).is_none() {
                return Err(format!("supporting fact ({doc}, {sentence}) does not exist"));
            }
        }
        for m in &self.entities {
            if !span_ok(m.doc, m.sentence, m.start, m.end) {
                return Err(format!(
                    "entity mention doc {} sentence {} tokens {}..{} is outside its sentence",
                    m.doc, m.sentence, m.start, m.end
                ));
            }
        }
        for c in &self.coref {
            for cluster in &c.clusters {
                for m in cluster {
                    if !span_ok(c.doc, m.sentence, m.start, m.end) {
                        return Err(format!(
                            "coref mention doc {} sentence {} tokens {}..{} is outside its sentence",
                            c.doc, m.sentence, m.start, m.end
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A record rejected while loading.
#[derive(Clone, Debug, Serialize)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

/// Parses and validates one record line; the error names the failure.
pub fn parse_record(line: &str) -> std::result::Result<AnnotatedExample, String> {
    let ex: AnnotatedExample =
        serde_json::from_str(line).map_err(|e| format!("malformed record: {e}"))?;
    ex.validate().map_err(|reason| format!("{}: {reason}", ex.id))?;
    Ok(ex)
}

fn parse_line(line: &str, lineno: usize) -> std::result::Result<AnnotatedExample, Rejection> {
    parse_record(line).map_err(|reason| Rejection { line: lineno, reason })
}

/// Optional first line of an annotated file, `{"header": {...}}`, naming
/// the format and the annotation tools (with versions) that produced it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHeader {
    pub format: String,
    #[serde(default)]
    pub annotators: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: FileHeader,
}

fn parse_header(line: &str) -> Option<FileHeader> {
    serde_json::from_str::<HeaderLine>(line).ok().map(|h| h.header)
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<(usize, String)> = reader
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)))
        .collect::<std::io::Result<_>>()?;
    Ok(lines.into_iter().filter(|(_, l)| !l.trim().is_empty()).collect())
}

fn records(path: &Path) -> Result<impl Iterator<Item = (usize, String)>> {
    let mut lines = read_lines(path)?;
    if lines.first().is_some_and(|(_, l)| parse_header(l).is_some()) {
        lines.remove(0);
    }
    Ok(lines.into_iter())
}

/// The header line of `path`, if it has one.
pub fn read_header(path: &Path) -> Result<Option<FileHeader>> {
    Ok(read_lines(path)?.first().and_then(|(_, l)| parse_header(l)))
}

/// Loads one record per line; the first invalid record aborts the load.
pub fn load_and_validate(path: &Path) -> Result<Vec<AnnotatedExample>> {
    records(path)?
        .map(|(n, l)| {
            parse_line(&l, n).map_err(|r| QgError::Validation {
                line: r.line,
                reason: r.reason,
            })
        })
        .collect()
}

/// Loads every valid record and reports the rest as spurious.
pub fn load_lenient(path: &Path) -> Result<(Vec<AnnotatedExample>, Vec<Rejection>)> {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (n, l) in records(path)? {
        match parse_line(&l, n) {
            Ok(ex) => kept.push(ex),
            Err(r) => {
                log::warn!("dropping spurious record at line {}: {}", r.line, r.reason);
                rejected.push(r);
            }
        }
    }
    Ok((kept, rejected))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub max_words: usize,
    pub kept: usize,
    pub removed: usize,
    pub removed_by_level: BTreeMap<Level, usize>,
}

/// Keeps exactly the examples whose question has at most `max_words` words.
pub fn filter_by_question_length(
    examples: &[AnnotatedExample],
    max_words: usize,
) -> Result<(Vec<AnnotatedExample>, FilterReport)> {
    if max_words == 0 {
        return Err(QgError::Config("max_words must be at least 1".into()));
    }
    let mut report = FilterReport {
        max_words,
        ..Default::default()
    };
    let mut kept = Vec::with_capacity(examples.len());
    for ex in examples {
        if question_words(ex) <= max_words {
            kept.push(ex.clone());
        } else {
            report.removed += 1;
            *report.removed_by_level.entry(ex.level).or_default() += 1;
        }
    }
    report.kept = kept.len();
    Ok((kept, report))
}

/// Seeded shuffle, then the first `n_dev` shuffled examples form the dev
/// set. Both parts keep the input's relative order.
pub fn split_reserve_dev(
    examples: &[AnnotatedExample],
    n_dev: usize,
    seed: u64,
) -> Result<(Vec<AnnotatedExample>, Vec<AnnotatedExample>)> {
    if n_dev >= examples.len() {
        return Err(QgError::Config(format!(
            "dev size {n_dev} must be smaller than the example count {}",
            examples.len()
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let dev_idx: BTreeSet<usize> = order[..n_dev].iter().copied().collect();
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (i, ex) in examples.iter().enumerate() {
        if dev_idx.contains(&i) {
            dev.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    Ok((train, dev))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub examples: usize,
    pub question_length_histogram: BTreeMap<usize, usize>,
    pub context_length_histogram: BTreeMap<usize, usize>,
    pub supporting_fact_length_histogram: BTreeMap<usize, usize>,
    pub mean_question_words: f64,
    pub mean_entities: f64,
    pub by_level: BTreeMap<Level, usize>,
    pub by_qtype: BTreeMap<QType, usize>,
}

/// Number of entity mentions that overlap no previously counted mention,
/// scanning in `(doc, sentence, start, longest-first)` order.
pub fn distinct_entity_mentions(ex: &AnnotatedExample) -> usize {
    let mut ms: Vec<&EntityMention> = ex.entities.iter().collect();
    ms.sort_by_key(|m| (m.doc, m.sentence, m.start, std::cmp::Reverse(m.end)));
    let mut counted: Vec<&EntityMention> = Vec::new();
    for m in ms {
        let overlaps = counted.iter().any(|c| {
            c.doc == m.doc && c.sentence == m.sentence && c.start < m.end && m.start < c.end
        });
        if !overlaps {
            counted.push(m);
        }
    }
    counted.len()
}

pub fn compute_stats(examples: &[AnnotatedExample]) -> DatasetStats {
    let mut st = DatasetStats {
        examples: examples.len(),
        ..Default::default()
    };
    if examples.is_empty() {
        return st;
    }
    let (mut words, mut ents) = (0usize, 0usize);
    for ex in examples {
        let q = question_words(ex);
        words += q;
        ents += distinct_entity_mentions(ex);
        *st.question_length_histogram.entry(q).or_default() += 1;
        let ctx: usize = ex
            .documents
            .iter()
            .flat_map(|d| &d.sentences)
            .map(Vec::len)
            .sum();
        *st.context_length_histogram.entry(ctx).or_default() += 1;
        let sf: usize = ex
            .supporting_set()
            .iter()
            .filter_map(|&(d, s)| ex.sentence(d, s))
            .map(<[String]>::len)
            .sum();
        *st.supporting_fact_length_histogram.entry(sf).or_default() += 1;
        *st.by_level.entry(ex.level).or_default() += 1;
        *st.by_qtype.entry(ex.qtype).or_default() += 1;
    }
    st.mean_question_words = words as f64 / examples.len() as f64;
    st.mean_entities = ents as f64 / examples.len() as f64;
    st
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    /// Two documents of two sentences each with a span answer.
    pub fn small_example(id: &str) -> AnnotatedExample {
        AnnotatedExample {
            id: id.into(),
            documents: vec![
                Document {
                    title: "Walker".into(),
                    sentences: vec![
                        toks("byron walker was a banker ."),
                        toks("he helped found the university of toronto ."),
                    ],
                },
                Document {
                    title: "University of Toronto".into(),
                    sentences: vec![
                        toks("the university of toronto is a university ."),
                        toks("it was controlled by the church of england ."),
                    ],
                },
            ],
            answer: Answer::Span {
                doc: 1,
                sentence: 0,
                start: 0,
                end: 4,
            },
            question: toks("which institution founded by walker was controlled by the church of england ?"),
            supporting_facts: vec![(0, 1), (1, 1)],
            qtype: QType::Bridge,
            level: Level::Hard,
            entities: vec![
                EntityMention {
                    doc: 0,
                    sentence: 0,
                    start: 0,
                    end: 2,
                    label: "PERSON".into(),
                    norm: String::new(),
                },
                EntityMention {
                    doc: 0,
                    sentence: 1,
                    start: 4,
                    end: 7,
                    label: "ORG".into(),
                    norm: String::new(),
                },
                EntityMention {
                    doc: 1,
                    sentence: 0,
                    start: 1,
                    end: 4,
                    label: "ORG".into(),
                    norm: String::new(),
                },
                EntityMention {
                    doc: 1,
                    sentence: 1,
                    start: 5,
                    end: 8,
                    label: "ORG".into(),
                    norm: String::new(),
                },
            ],
            coref: vec![CorefDoc {
                doc: 0,
                clusters: vec![vec![
                    CorefMention {
                        sentence: 0,
                        start: 0,
                        end: 2,
                    },
                    CorefMention {
                        sentence: 1,
                        start: 0,
                        end: 1,
                    },
                ]],
            }],
        }
    }

    pub fn with_question_words(id: &str, words: usize, level: Level) -> AnnotatedExample {
        let mut ex = small_example(id);
        ex.question = (0..words).map(|i| format!("w{i}")).collect();
        ex.level = level;
        ex
    }
}
