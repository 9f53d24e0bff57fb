//! Context-entity graph over entity mentions, coreferent mentions and
//! sentences.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedExample;
use crate::encoding::EncodedInput;
use crate::error::{QgError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Relation {
    Entity,
    Coref,
    Sentence,
    /// Mention-to-sentence edges when they are given their own type.
    Containment,
}

impl Relation {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Link every mention node to its sentence node.
    pub containment_edges: bool,
    /// Type those links `CONTAINMENT` instead of `SENTENCE`.
    pub separate_containment_relation: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            containment_edges: true,
            separate_containment_relation: false,
        }
    }
}

impl GraphConfig {
    pub fn relation_count(&self) -> usize {
        if self.separate_containment_relation {
            4
        } else {
            3
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    /// A token span; a span annotated both as an entity and as a
    /// coreference mention is a single node carrying both roles.
    Mention { entity: bool, coref: bool },
    Sentence,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    #[serde(flatten)]
    pub kind: NodeKind,
    pub doc: usize,
    pub sentence: usize,
    /// Word span within the sentence; absent for sentence nodes.
    pub span: Option<(usize, usize)>,
    /// Normalized surface for entity mentions.
    pub surface: Option<String>,
}

impl GraphNode {
    fn is_entity(&self) -> bool {
        matches!(self.kind, NodeKind::Mention { entity: true, .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub relation: Relation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEntityGraph {
    pub nodes: Vec<GraphNode>,
    /// Sorted by `(source, target, relation)`; both directions present.
    pub edges: Vec<Edge>,
}

type SpanKey = (usize, usize, usize, usize);

#[derive(Default)]
struct Roles {
    entity: bool,
    coref: bool,
    surface: Option<String>,
}

/// Builds the graph for one validated example.
pub fn build_graph(ex: &AnnotatedExample, cfg: &GraphConfig) -> ContextEntityGraph {
    let mut spans: BTreeMap<SpanKey, Roles> = BTreeMap::new();
    for m in &ex.entities {
        let r = spans.entry((m.doc, m.sentence, m.start, m.end)).or_default();
        r.entity = true;
        if r.surface.is_none() {
            r.surface = Some(ex.mention_norm(m));
        }
    }
    for c in &ex.coref {
        for cluster in &c.clusters {
            for m in cluster {
                spans.entry((c.doc, m.sentence, m.start, m.end)).or_default().coref = true;
            }
        }
    }

    let mut nodes = Vec::new();
    let mut span_node: BTreeMap<SpanKey, usize> = BTreeMap::new();
    let mut sentence_node: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut mentions = spans.into_iter().peekable();
    for (d, doc) in ex.documents.iter().enumerate() {
        for s in 0..doc.sentences.len() {
            while let Some(((md, ms, start, end), _)) = mentions.peek() {
                if (*md, *ms) != (d, s) {
                    break;
                }
                let key = (*md, *ms, *start, *end);
                let (_, roles) = mentions.next().unwrap();
                span_node.insert(key, nodes.len());
                nodes.push(GraphNode {
                    kind: NodeKind::Mention {
                        entity: roles.entity,
                        coref: roles.coref,
                    },
                    doc: d,
                    sentence: s,
                    span: Some((key.2, key.3)),
                    surface: roles.surface,
                });
            }
            sentence_node.insert((d, s), nodes.len());
            nodes.push(GraphNode {
                kind: NodeKind::Sentence,
                doc: d,
                sentence: s,
                span: None,
                surface: None,
            });
        }
    }

    let mut edges = BTreeSet::new();
    let mut link = |a: usize, b: usize, relation: Relation| {
        if a != b {
            edges.insert(Edge {
                source: a,
                target: b,
                relation,
            });
            edges.insert(Edge {
                source: b,
                target: a,
                relation,
            });
        }
    };

    let entity_nodes: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].is_entity()).collect();
    for (x, &a) in entity_nodes.iter().enumerate() {
        for &b in &entity_nodes[x + 1..] {
            let (na, nb) = (&nodes[a], &nodes[b]);
            let same_sentence = (na.doc, na.sentence) == (nb.doc, nb.sentence);
            let same_surface = na.surface.as_deref().is_some_and(|s| !s.is_empty())
                && na.surface == nb.surface;
            if same_sentence || same_surface {
                link(a, b, Relation::Entity);
            }
        }
    }

    for c in &ex.coref {
        for cluster in &c.clusters {
            let ids: Vec<usize> = cluster
                .iter()
                .map(|m| span_node[&(c.doc, m.sentence, m.start, m.end)])
                .collect();
            for (x, &a) in ids.iter().enumerate() {
                for &b in &ids[x + 1..] {
                    link(a, b, Relation::Coref);
                }
            }
        }
    }

    let sentences: Vec<usize> = sentence_node.values().copied().collect();
    for (x, &a) in sentences.iter().enumerate() {
        for &b in &sentences[x + 1..] {
            link(a, b, Relation::Sentence);
        }
    }

    if cfg.containment_edges {
        let relation = if cfg.separate_containment_relation {
            Relation::Containment
        } else {
            Relation::Sentence
        };
        for (&(d, s, _, _), &node) in &span_node {
            link(node, sentence_node[&(d, s)], relation);
        }
    }

    ContextEntityGraph {
        nodes,
        edges: edges.into_iter().collect(),
    }
}

impl ContextEntityGraph {
    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = &Edge> {
        let lo = self.edges.partition_point(|e| e.source < node);
        let hi = self.edges.partition_point(|e| e.source <= node);
        self.edges[lo..hi].iter()
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for e in self.neighbors(n) {
                if !seen[e.target] {
                    seen[e.target] = true;
                    stack.push(e.target);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn undirected_count(&self, relation: Relation) -> usize {
        self.edges.iter().filter(|e| e.relation == relation).count() / 2
    }
}

/// Encoder token span `start..end` of every node. Sentence nodes map to
/// their `<sep>` position.
pub fn node_token_map(
    graph: &ContextEntityGraph,
    encoded: &EncodedInput,
) -> Result<Vec<(usize, usize)>> {
    graph
        .nodes
        .iter()
        .map(|n| {
            let sentence = encoded
                .sentence_slot(n.doc, n.sentence)
                .ok_or_else(|| QgError::Alignment(format!(
                    "sentence ({}, {}) is not part of the encoded input",
                    n.doc, n.sentence
                )))?;
            match n.span {
                None => {
                    let p = encoded.sep_positions[sentence];
                    Ok((p, p + 1))
                }
                Some((start, end)) => {
                    let words = &encoded.word_spans[sentence];
                    let span = words
                        .get(start)
                        .zip(end.checked_sub(1).and_then(|e| words.get(e)))
                        .map(|(a, b)| (a.0, b.1))
                        .filter(|(a, b)| a < b);
                    span.ok_or_else(|| {
                        QgError::Alignment(format!(
                            "mention doc {} sentence {} words {start}..{end} has no token span",
                            n.doc, n.sentence
                        ))
                    })
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::{small_example, toks};
    use crate::corpus::{Answer, CorefDoc, CorefMention, Document, EntityMention, Level, QType};
    use crate::encoding::{encode_example, EncodingConfig};
    use crate::tokenizer::Vocabulary;
    use proptest::prelude::*;

    fn mention(doc: usize, sentence: usize, start: usize, end: usize) -> EntityMention {
        EntityMention {
            doc,
            sentence,
            start,
            end,
            label: String::new(),
            norm: String::new(),
        }
    }

    fn bare(sentences: &[&[&str]]) -> AnnotatedExample {
        let docs: Vec<Document> = sentences
            .iter()
            .map(|s| Document {
                title: String::new(),
                sentences: s.iter().map(|t| toks(t)).collect(),
            })
            .collect();
        AnnotatedExample {
            id: "g".into(),
            documents: docs,
            answer: Answer::Yes,
            question: toks("q ?"),
            supporting_facts: vec![],
            qtype: QType::Comparison,
            level: Level::Easy,
            entities: vec![],
            coref: vec![],
        }
    }

    #[test]
    fn one_sentence_two_mentions() {
        let mut ex = bare(&[&["ann met bob today"]]);
        ex.entities = vec![mention(0, 0, 0, 1), mention(0, 0, 2, 3)];
        let g = build_graph(&ex, &GraphConfig::default());
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(g.undirected_count(Relation::Entity), 1);
        assert_eq!(g.undirected_count(Relation::Sentence), 2);
        assert_eq!(g.edges.len(), 6);
        assert!(g.is_connected());
    }

    #[test]
    fn two_sentences_no_mentions() {
        let g = build_graph(&bare(&[&["a b", "c d"]]), &GraphConfig::default());
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges.len(), 2);
        assert_eq!(g.undirected_count(Relation::Sentence), 1);
    }

    #[test]
    fn bridge_entity_links_documents() {
        let ex = small_example("fig");
        let g = build_graph(&ex, &GraphConfig::default());
        let uoft: Vec<usize> = (0..g.nodes.len())
            .filter(|&i| g.nodes[i].surface.as_deref() == Some("university of toronto"))
            .collect();
        assert_eq!(uoft.len(), 2);
        assert_ne!(g.nodes[uoft[0]].doc, g.nodes[uoft[1]].doc);
        assert!(g
            .neighbors(uoft[0])
            .any(|e| e.target == uoft[1] && e.relation == Relation::Entity));
        // "byron walker" is both an entity and a coref mention.
        assert_eq!(g.nodes[0].kind, NodeKind::Mention { entity: true, coref: true });
        assert!(g.is_connected());
    }

    #[test]
    fn separate_containment_relation() {
        let mut ex = bare(&[&["ann met bob"]]);
        ex.entities = vec![mention(0, 0, 0, 1)];
        let cfg = GraphConfig {
            separate_containment_relation: true,
            ..Default::default()
        };
        let g = build_graph(&ex, &cfg);
        assert_eq!(g.undirected_count(Relation::Containment), 1);
        assert_eq!(g.undirected_count(Relation::Sentence), 0);
        let off = GraphConfig {
            containment_edges: false,
            ..Default::default()
        };
        assert!(build_graph(&ex, &off).edges.is_empty());
    }

    #[test]
    fn whitespace_offsets() {
        let mut ex = bare(&[&["s0 a b c d e f g h i", "x y z w u v"]]);
        ex.entities = vec![mention(0, 1, 3, 5)];
        let text: Vec<String> = ex.documents[0].sentences.iter().map(|s| s.join(" ")).collect();
        let vocab = Vocabulary::build(text.iter().map(String::as_str).chain(["yes"]), 100).unwrap();
        let enc = encode_example(&ex, &vocab, &EncodingConfig::default()).unwrap();
        let g = build_graph(&ex, &GraphConfig::default());
        let map = node_token_map(&g, &enc).unwrap();
        // Sentence 1 starts at 11 (10 words + sep).
        assert_eq!(map[1], (14, 16));
        assert_eq!(map[0], (10, 11));
        assert_eq!(map[2], (17, 18));
    }

    #[test]
    fn subword_mention_spans_all_pieces() {
        let mut ex = bare(&[&["in toronto now"]]);
        ex.entities = vec![mention(0, 0, 1, 2)];
        let vocab = Vocabulary::from_pieces(
            ["▁in", "▁to", "ronto", "▁now", "▁yes"].map(String::from).to_vec(),
            crate::tokenizer::Segmentation::Pieces {
                word_marker: true,
            },
        )
        .unwrap();
        let enc = encode_example(&ex, &vocab, &EncodingConfig::default()).unwrap();
        let map = node_token_map(&build_graph(&ex, &GraphConfig::default()), &enc).unwrap();
        assert_eq!(map[0], (1, 3));
    }

    #[test]
    fn coref_clique() {
        let mut ex = bare(&[&["ann sang", "she left", "her song won"]]);
        ex.coref = vec![CorefDoc {
            doc: 0,
            clusters: vec![vec![
                CorefMention { sentence: 0, start: 0, end: 1 },
                CorefMention { sentence: 1, start: 0, end: 1 },
                CorefMention { sentence: 2, start: 0, end: 1 },
            ]],
        }];
        let g = build_graph(&ex, &GraphConfig::default());
        assert_eq!(g.undirected_count(Relation::Coref), 3);
        assert_eq!(g.undirected_count(Relation::Entity), 0);
    }

    fn random_example() -> impl Strategy<Value = AnnotatedExample> {
        (
            prop::collection::vec(prop::collection::vec(1usize..6, 1..4), 2..=2),
            prop::collection::vec((0usize..2, 0usize..4, 0usize..6, 0usize..3), 0..8),
        )
            .prop_map(|(docs, ms)| {
                let words = ["ann", "bob", "cal", "dee", "eve", "fay"];
                let documents: Vec<Document> = docs
                    .iter()
                    .map(|lens| Document {
                        title: String::new(),
                        sentences: lens
                            .iter()
                            .map(|&n| (0..n).map(|i| words[i].to_string()).collect())
                            .collect(),
                    })
                    .collect();
                let mut entities = Vec::new();
                for (d, s, st, w) in ms {
                    let s = s % documents[d].sentences.len();
                    let len = documents[d].sentences[s].len();
                    let st = st % len;
                    entities.push(mention(d, s, st, (st + 1 + w).min(len)));
                }
                AnnotatedExample {
                    entities,
                    documents,
                    ..bare(&[&["a"], &["b"]])
                }
            })
    }

    proptest! {
        #[test]
        fn structural_invariants(ex in random_example()) {
            let g = build_graph(&ex, &GraphConfig::default());
            prop_assert_eq!(&g, &build_graph(&ex, &GraphConfig::default()));
            let set: BTreeSet<_> = g.edges.iter().copied().collect();
            for e in &g.edges {
                prop_assert_ne!(e.source, e.target);
                let back = Edge { source: e.target, target: e.source, relation: e.relation };
                prop_assert!(set.contains(&back));
            }
            let s = ex.sentence_count();
            prop_assert_eq!(g.undirected_count(Relation::Sentence) >= s * (s - 1) / 2, true);
            prop_assert!(g.is_connected());
        }
    }
}
