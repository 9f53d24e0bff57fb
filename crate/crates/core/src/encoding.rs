//! Model-ready sequences: context tokens with a `<sep>` after every
//! sentence, answer type ids, decoder framing and supporting-fact labels.

use serde::{Deserialize, Serialize};

use crate::corpus::{Answer, AnnotatedExample};
use crate::error::{QgError, Result};
use crate::graph::{build_graph, node_token_map, ContextEntityGraph, GraphConfig, Relation};
use crate::tokenizer::{Vocabulary, BOS, EOS, SEP};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingConfig {
    /// Encoder length cap; sentences are dropped from the end to fit.
    pub max_encoder_len: Option<usize>,
    /// Append `<sep>` plus the answer tokens after the context instead of
    /// marking the answer with type ids.
    pub answer_concat: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedInput {
    pub encoder_ids: Vec<u32>,
    pub answer_type_ids: Vec<u32>,
    pub sep_positions: Vec<usize>,
    /// `(doc, sentence)` behind each sep; `None` for an appended yes/no.
    pub sep_sources: Vec<Option<(usize, usize)>>,
    /// Token range of every word, per sep slot.
    pub word_spans: Vec<Vec<(usize, usize)>>,
    pub decoder_input_ids: Vec<u32>,
    pub decoder_target_ids: Vec<u32>,
    pub sf_labels: Vec<u8>,
}

impl EncodedInput {
    pub fn sentence_slot(&self, doc: usize, sentence: usize) -> Option<usize> {
        self.sep_sources
            .iter()
            .position(|s| *s == Some((doc, sentence)))
    }

    pub fn source_len(&self) -> usize {
        self.encoder_ids.len()
    }

    pub fn target_len(&self) -> usize {
        self.decoder_target_ids.len()
    }
}

pub fn sf_labels(ex: &AnnotatedExample, sep_sources: &[Option<(usize, usize)>]) -> Vec<u8> {
    let gold = ex.supporting_set();
    sep_sources
        .iter()
        .map(|s| u8::from(s.is_some_and(|k| gold.contains(&k))))
        .collect()
}

pub fn encode_example(
    ex: &AnnotatedExample,
    vocab: &Vocabulary,
    cfg: &EncodingConfig,
) -> Result<EncodedInput> {
    let mut ids = Vec::new();
    let mut types = Vec::new();
    let mut seps = Vec::new();
    let mut sources = Vec::new();
    let mut word_spans = Vec::new();
    let span = match ex.answer {
        Answer::Span {
            doc,
            sentence,
            start,
            end,
        } if !cfg.answer_concat => Some((doc, sentence, start, end)),
        _ => None,
    };

    for (d, doc) in ex.documents.iter().enumerate() {
        for (s, words) in doc.sentences.iter().enumerate() {
            let mut spans = Vec::with_capacity(words.len());
            for (w, word) in words.iter().enumerate() {
                let pieces = vocab.encode_word(word);
                let t = u32::from(span.is_some_and(|(ad, as_, st, en)| {
                    (ad, as_) == (d, s) && (st..en).contains(&w)
                }));
                spans.push((ids.len(), ids.len() + pieces.len()));
                types.extend(std::iter::repeat_n(t, pieces.len()));
                ids.extend(pieces);
            }
            if let Some((ad, as_, st, en)) = span {
                if (ad, as_) == (d, s) && spans[st..en].iter().any(|(a, b)| a == b) {
                    return Err(QgError::Alignment(format!(
                        "{}: answer words {st}..{en} produce no tokens",
                        ex.id
                    )));
                }
            }
            seps.push(ids.len());
            sources.push(Some((d, s)));
            word_spans.push(spans);
            ids.push(SEP);
            types.push(0);
        }
    }

    if let Some(lit) = ex.answer.literal() {
        let pieces = vocab.encode_word(lit);
        let t = u32::from(!cfg.answer_concat);
        word_spans.push(vec![(ids.len(), ids.len() + pieces.len())]);
        types.extend(std::iter::repeat_n(t, pieces.len()));
        ids.extend(pieces);
        seps.push(ids.len());
        sources.push(None);
        ids.push(SEP);
        types.push(0);
    } else if cfg.answer_concat {
        if let Answer::Span {
            doc,
            sentence,
            start,
            end,
        } = ex.answer
        {
            let words = &ex.documents[doc].sentences[sentence][start..end];
            let pieces = vocab.encode_tokens(words);
            ids.push(SEP);
            types.push(0);
            types.extend(std::iter::repeat_n(0, pieces.len()));
            ids.extend(pieces);
        }
    }

    let question = vocab.encode_tokens(&ex.question);
    let mut decoder_input_ids = Vec::with_capacity(question.len() + 1);
    decoder_input_ids.push(BOS);
    decoder_input_ids.extend(&question);
    let mut decoder_target_ids = question;
    decoder_target_ids.push(EOS);

    let sf = sf_labels(ex, &sources);
    Ok(EncodedInput {
        encoder_ids: ids,
        answer_type_ids: types,
        sep_positions: seps,
        sep_sources: sources,
        word_spans,
        decoder_input_ids,
        decoder_target_ids,
        sf_labels: sf,
    })
}

/// Drops trailing sentences until the encoded context fits `max_len`,
/// never removing the sentence holding the answer span. Indices in
/// supporting facts and annotations are remapped.
pub fn truncate_example(
    ex: &AnnotatedExample,
    vocab: &Vocabulary,
    cfg: &EncodingConfig,
) -> Result<AnnotatedExample> {
    let Some(max_len) = cfg.max_encoder_len else {
        return Ok(ex.clone());
    };
    let mut len = encode_example(ex, vocab, cfg)?.encoder_ids.len();
    if len <= max_len {
        return Ok(ex.clone());
    }
    let protected = match ex.answer {
        Answer::Span { doc, sentence, .. } => Some((doc, sentence)),
        _ => None,
    };
    let mut keep: Vec<Vec<bool>> = ex
        .documents
        .iter()
        .map(|d| vec![true; d.sentences.len()])
        .collect();
    let order: Vec<(usize, usize)> = ex
        .documents
        .iter()
        .enumerate()
        .flat_map(|(d, doc)| (0..doc.sentences.len()).map(move |s| (d, s)))
        .rev()
        .collect();
    for (d, s) in order {
        if len <= max_len {
            break;
        }
        if Some((d, s)) == protected {
            continue;
        }
        keep[d][s] = false;
        len -= vocab.encode_tokens(&ex.documents[d].sentences[s]).len() + 1;
    }
    if len > max_len {
        return Err(QgError::Config(format!(
            "{}: context needs {len} tokens even after truncation, limit is {max_len}",
            ex.id
        )));
    }
    Ok(remap(ex, &keep))
}

fn remap(ex: &AnnotatedExample, keep: &[Vec<bool>]) -> AnnotatedExample {
    let new_index: Vec<Vec<Option<usize>>> = keep
        .iter()
        .map(|k| {
            let mut next = 0;
            k.iter()
                .map(|&kept| {
                    kept.then(|| {
                        next += 1;
                        next - 1
                    })
                })
                .collect()
        })
        .collect();
    let at = |d: usize, s: usize| new_index[d][s];

    let mut out = ex.clone();
    for (d, doc) in out.documents.iter_mut().enumerate() {
        let mut s = 0;
        doc.sentences.retain(|_| {
            s += 1;
            keep[d][s - 1]
        });
    }
    out.supporting_facts = ex
        .supporting_facts
        .iter()
        .filter_map(|&(d, s)| at(d, s).map(|n| (d, n)))
        .collect();
    if let Answer::Span {
        doc,
        sentence,
        start,
        end,
    } = ex.answer
    {
        out.answer = Answer::Span {
            doc,
            sentence: at(doc, sentence).expect("answer sentence is kept"),
            start,
            end,
        };
    }
    out.entities = ex
        .entities
        .iter()
        .filter_map(|m| {
            at(m.doc, m.sentence).map(|n| {
                let mut m = m.clone();
                m.sentence = n;
                m
            })
        })
        .collect();
    for c in &mut out.coref {
        for cluster in &mut c.clusters {
            cluster.retain_mut(|m| match at(c.doc, m.sentence) {
                Some(n) => {
                    m.sentence = n;
                    true
                }
                None => false,
            });
        }
        c.clusters.retain(|cl| !cl.is_empty());
    }
    out
}

/// Graph inputs for the encoder: pooled token spans per node and typed edges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphInput {
    pub node_spans: Vec<(usize, usize)>,
    /// `(source, target, relation index)`, sorted by source.
    pub edges: Vec<(usize, usize, usize)>,
}

impl GraphInput {
    pub fn from_graph(graph: &ContextEntityGraph, node_spans: Vec<(usize, usize)>) -> Self {
        Self {
            node_spans,
            edges: graph
                .edges
                .iter()
                .map(|e| (e.source, e.target, e.relation.index()))
                .collect(),
        }
    }

    /// Every node linked to every node, itself included, with relation 0.
    pub fn complete(node_spans: Vec<(usize, usize)>) -> Self {
        let n = node_spans.len();
        let edges = (0..n)
            .flat_map(|a| (0..n).map(move |b| (a, b, 0)))
            .collect();
        Self { node_spans, edges }
    }

    pub fn max_relation(&self) -> Option<usize> {
        self.edges.iter().map(|e| e.2).max()
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub example: AnnotatedExample,
    pub encoded: EncodedInput,
    pub graph: GraphInput,
}

/// Truncates, encodes and builds the graph for one example.
pub fn prepare_example(
    ex: &AnnotatedExample,
    vocab: &Vocabulary,
    enc: &EncodingConfig,
    graph_cfg: &GraphConfig,
) -> Result<Prepared> {
    let example = truncate_example(ex, vocab, enc)?;
    let encoded = encode_example(&example, vocab, enc)?;
    let graph = build_graph(&example, graph_cfg);
    let spans = node_token_map(&graph, &encoded)?;
    debug_assert!(graph
        .edges
        .iter()
        .all(|e| e.relation != Relation::Containment || graph_cfg.separate_containment_relation));
    Ok(Prepared {
        example,
        graph: GraphInput::from_graph(&graph, spans),
        encoded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::{small_example, toks};
    use crate::corpus::{Document, Level, QType};
    use crate::tokenizer::Segmentation;

    fn tiny() -> (AnnotatedExample, Vocabulary) {
        let ex = AnnotatedExample {
            id: "t".into(),
            documents: vec![Document {
                title: String::new(),
                sentences: vec![toks("a b c"), toks("d e f")],
            }],
            answer: Answer::Span {
                doc: 0,
                sentence: 1,
                start: 0,
                end: 2,
            },
            question: toks("w1 w2"),
            supporting_facts: vec![(0, 0)],
            qtype: QType::Bridge,
            level: Level::Easy,
            entities: vec![],
            coref: vec![],
        };
        let vocab = Vocabulary::build(["a b c d e f w1 w2 yes no"], 100).unwrap();
        (ex, vocab)
    }

    #[test]
    fn span_layout() {
        let (ex, vocab) = tiny();
        let enc = encode_example(&ex, &vocab, &EncodingConfig::default()).unwrap();
        assert_eq!(enc.encoder_ids.len(), 8);
        assert_eq!(enc.answer_type_ids, [0, 0, 0, 0, 1, 1, 0, 0]);
        assert_eq!(enc.sep_positions, [3, 7]);
        assert_eq!(enc.sf_labels, [1, 0]);
        let w1 = vocab.id("w1").unwrap();
        let w2 = vocab.id("w2").unwrap();
        assert_eq!(enc.decoder_input_ids, [BOS, w1, w2]);
        assert_eq!(enc.decoder_target_ids, [w1, w2, EOS]);
    }

    #[test]
    fn yes_answer_appended() {
        let (mut ex, vocab) = tiny();
        ex.answer = Answer::Yes;
        ex.qtype = QType::Comparison;
        let enc = encode_example(&ex, &vocab, &EncodingConfig::default()).unwrap();
        let n = enc.encoder_ids.len();
        assert_eq!(&enc.encoder_ids[n - 2..], &[vocab.id("yes").unwrap(), SEP]);
        assert_eq!(&enc.answer_type_ids[n - 2..], &[1, 0]);
        assert_eq!(enc.answer_type_ids.iter().sum::<u32>(), 1);
        assert_eq!(enc.sep_positions.len(), 3);
        assert_eq!(enc.sf_labels, [1, 0, 0]);
    }

    #[test]
    fn labels_follow_supporting_facts() {
        let ex = small_example("x");
        let vocab = Vocabulary::build(
            ex.documents.iter().flat_map(|d| &d.sentences).map(|s| s.join(" ")),
            1000,
        )
        .unwrap();
        let mut e2 = ex.clone();
        e2.supporting_facts = vec![(0, 0), (1, 1)];
        let enc = encode_example(&e2, &vocab, &EncodingConfig::default()).unwrap();
        assert_eq!(enc.sf_labels, [1, 0, 0, 1]);
        e2.supporting_facts.clear();
        let enc = encode_example(&e2, &vocab, &EncodingConfig::default()).unwrap();
        assert_eq!(enc.sf_labels, [0, 0, 0, 0]);
    }

    #[test]
    fn stripping_seps_round_trips() {
        let ex = small_example("x");
        let vocab = Vocabulary::build(
            ex.documents.iter().flat_map(|d| &d.sentences).map(|s| s.join(" ")),
            1000,
        )
        .unwrap();
        let enc = encode_example(&ex, &vocab, &EncodingConfig::default()).unwrap();
        let stripped: Vec<u32> = enc.encoder_ids.iter().copied().filter(|&i| i != SEP).collect();
        let words: Vec<String> = ex.documents.iter().flat_map(|d| d.sentences.concat()).collect();
        assert_eq!(stripped, vocab.encode_tokens(&words));
        assert_eq!(enc.answer_type_ids.iter().sum::<u32>(), 4);
    }

    #[test]
    fn answer_concat_mode() {
        let (ex, vocab) = tiny();
        let cfg = EncodingConfig {
            answer_concat: true,
            ..Default::default()
        };
        let enc = encode_example(&ex, &vocab, &cfg).unwrap();
        assert_eq!(enc.encoder_ids.len(), 11);
        assert_eq!(enc.encoder_ids[8], SEP);
        assert_eq!(enc.sep_positions, [3, 7]);
        assert!(enc.answer_type_ids.iter().all(|&t| t == 0));
    }

    #[test]
    fn truncation_keeps_answer_sentence() {
        let mut ex = small_example("x");
        ex.answer = Answer::Span {
            doc: 1,
            sentence: 1,
            start: 5,
            end: 8,
        };
        let vocab = Vocabulary::build(
            ex.documents.iter().flat_map(|d| &d.sentences).map(|s| s.join(" ")),
            1000,
        )
        .unwrap();
        // Full length: (6+1)+(8+1)+(8+1)+(9+1) = 35.
        let cfg = EncodingConfig {
            max_encoder_len: Some(26),
            ..Default::default()
        };
        let p = prepare_example(&ex, &vocab, &cfg, &GraphConfig::default()).unwrap();
        assert_eq!(p.example.documents[1].sentences.len(), 1);
        assert_eq!(p.encoded.encoder_ids.len(), 26);
        assert_eq!(p.encoded.sep_sources, [Some((0, 0)), Some((0, 1)), Some((1, 0))]);
        assert_eq!(p.example.supporting_facts, [(0, 1), (1, 0)]);
        assert_eq!(p.encoded.answer_type_ids.iter().sum::<u32>(), 3);
        let tight = EncodingConfig {
            max_encoder_len: Some(5),
            ..Default::default()
        };
        assert!(matches!(
            prepare_example(&ex, &vocab, &tight, &GraphConfig::default()),
            Err(QgError::Config(_))
        ));
    }

    #[test]
    fn unknown_words_still_mark_answer() {
        let (ex, _) = tiny();
        let vocab = Vocabulary::from_pieces(
            vec!["▁a".to_string()],
            Segmentation::Pieces {
                word_marker: true,
            },
        )
        .unwrap();
        let enc = encode_example(&ex, &vocab, &EncodingConfig::default()).unwrap();
        assert_eq!(enc.answer_type_ids.iter().sum::<u32>() as usize, 2 * vocab.encode_word("d").len());
    }
}
