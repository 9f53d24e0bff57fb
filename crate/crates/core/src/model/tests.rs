use std::path::PathBuf;

use approx::assert_abs_diff_eq;
use numkit::{Tape, Tensor};

use super::layers::{self, Ctx};
use super::*;
use crate::encoding::{prepare_example, EncodingConfig, GraphInput, Prepared};
use crate::graph::GraphConfig;
use crate::synthetic::{synthetic_corpus, synthetic_vocabulary, SyntheticConfig};
use crate::tokenizer::{Vocabulary, BOS};

fn fixture(n: usize) -> (Vocabulary, Vec<Prepared>) {
    let vocab = synthetic_vocabulary().unwrap();
    let exs = synthetic_corpus(&SyntheticConfig {
        examples: n,
        seed: 3,
        ..Default::default()
    });
    let prepared = exs
        .iter()
        .map(|e| {
            prepare_example(e, &vocab, &EncodingConfig::default(), &GraphConfig::default()).unwrap()
        })
        .collect();
    (vocab, prepared)
}

fn tiny(vocab: usize, graph: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        graph_enabled: graph,
        dropout: 0.0,
        ..Default::default()
    }
}

#[test]
fn encoder_shape() {
    let (vocab, p) = fixture(1);
    for graph in [false, true] {
        let m = Model::new(tiny(vocab.len(), graph), 1).unwrap();
        let mut tape = Tape::new();
        let (w, _) = m.bind(&mut tape, false);
        let s = m.encode(&mut tape, &w, &p[0].encoded, Some(&p[0].graph), false).unwrap();
        assert_eq!(tape.shape(s), &[p[0].encoded.encoder_ids.len(), 16]);
    }
}

#[test]
fn identical_tokens_differ_by_position_only() {
    let (vocab, _) = fixture(1);
    let m = Model::new(tiny(vocab.len(), false), 1).unwrap();
    let enc = crate::encoding::EncodedInput {
        encoder_ids: vec![7, 7],
        answer_type_ids: vec![0, 0],
        sep_positions: vec![],
        sep_sources: vec![],
        word_spans: vec![],
        decoder_input_ids: vec![BOS],
        decoder_target_ids: vec![],
        sf_labels: vec![],
    };
    let mut tape = Tape::new();
    let (w, _) = m.bind(&mut tape, false);
    let x = m.embed_encoder(&mut tape, &w, &enc, false).unwrap();
    let pe = layers::positional_encoding(2, 16);
    let x = tape.value(x);
    for c in 0..16 {
        assert_abs_diff_eq!(
            x.get(0, c) - x.get(1, c),
            pe.get(0, c) - pe.get(1, c),
            epsilon = 1e-12
        );
    }
}

#[test]
fn decoder_is_causal() {
    let (vocab, p) = fixture(1);
    let m = Model::new(tiny(vocab.len(), true), 2).unwrap();
    let run = |dec: &[u32]| {
        let mut tape = Tape::new();
        let (w, _) = m.bind(&mut tape, false);
        let s = m.encode(&mut tape, &w, &p[0].encoded, Some(&p[0].graph), false).unwrap();
        let l = m.decode_teacher_forced(&mut tape, &w, s, dec, false).unwrap();
        tape.value(l).clone()
    };
    let a = run(&[BOS, 10, 11, 12]);
    let b = run(&[BOS, 10, 20, 21]);
    assert_eq!(a.row(0), b.row(0));
    assert_eq!(a.row(1), b.row(1));
    assert_ne!(a.row(2), b.row(2));
}

#[test]
fn single_step_matches_teacher_forced_first_row() {
    let (vocab, p) = fixture(1);
    let m = Model::new(tiny(vocab.len(), false), 4).unwrap();
    let mem = m.memory(&p[0]).unwrap();
    let step = m.next_log_probs(&mem, &[BOS]).unwrap();
    let mut tape = Tape::new();
    let (w, _) = m.bind(&mut tape, false);
    let s = m.encode(&mut tape, &w, &p[0].encoded, Some(&p[0].graph), false).unwrap();
    let l = m
        .decode_teacher_forced(&mut tape, &w, s, &p[0].encoded.decoder_input_ids, false)
        .unwrap();
    let expect = log_softmax(tape.value(l).row(0));
    for (a, b) in step.iter().zip(expect) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
    }
}

#[test]
fn output_projection_is_the_embedding_table() {
    let (vocab, p) = fixture(1);
    let mut m = Model::new(tiny(vocab.len(), false), 5).unwrap();
    assert!(!m.params.names().iter().any(|n| n.contains("output")));
    let mem = m.memory(&p[0]).unwrap();
    let before = m.next_log_probs(&mem, &[BOS]).unwrap();
    let e = m.layout.embed;
    m.params.get_mut(e).row_mut(9).iter_mut().for_each(|v| *v *= 3.0);
    let after = m.next_log_probs(&mem, &[BOS]).unwrap();
    assert_ne!(before[9], after[9]);
}

/// Fusion weights with `f([z, z̃]) = relu(z) - relu(-z) = z`.
fn passthrough_fusion(m: &mut Model) {
    let d = m.config.d_model;
    let h = m.config.fusion_width();
    assert!(h >= 2 * d);
    for l in 0..m.config.n_layers {
        let fuse = m.layout.encoder[l].graph.unwrap().fuse;
        let mut w1 = Tensor::zeros(&[2 * d, h]);
        let mut w2 = Tensor::zeros(&[h, d]);
        for i in 0..d {
            w1.row_mut(i)[i] = 1.0;
            w1.row_mut(i)[d + i] = -1.0;
            w2.row_mut(i)[i] = 1.0;
            w2.row_mut(d + i)[i] = -1.0;
        }
        *m.params.get_mut(fuse.w1) = w1;
        *m.params.get_mut(fuse.w2) = w2;
    }
}

fn copy_shared(from: &Model, to: &mut Model) {
    for (i, name) in from.params.names().iter().enumerate() {
        let j = to.params.names().iter().position(|n| n == name).unwrap();
        *to.params.get_mut(j) = from.params.get(i).clone();
    }
}

#[test]
fn passthrough_fusion_reduces_to_plain_encoder() {
    let (vocab, p) = fixture(2);
    let mut cfg = tiny(vocab.len(), false);
    cfg.n_layers = 2;
    let te = Model::new(cfg.clone(), 6).unwrap();
    cfg.graph_enabled = true;
    let mut gate = Model::new(cfg, 7).unwrap();
    copy_shared(&te, &mut gate);
    passthrough_fusion(&mut gate);
    for ex in &p {
        let a = te.memory(ex).unwrap();
        let b = gate.memory(ex).unwrap();
        assert!(a.states.max_abs_diff(&b.states) < 1e-12);
    }
}

#[test]
fn graph_reduces_to_single_head_self_attention() {
    let mut tape = Tape::new();
    let x = tape.constant(numkit::init_lecun_uniform(&[5, 8], 11));
    let w = params::Attention {
        wq: tape.constant(numkit::init_lecun_uniform(&[8, 8], 12)),
        wk: tape.constant(numkit::init_lecun_uniform(&[8, 8], 13)),
        wv: tape.constant(numkit::init_lecun_uniform(&[8, 8], 14)),
        wf: tape.constant(numkit::init_lecun_uniform(&[8, 8], 15)),
    };
    let gw = params::GraphAttention {
        wq: w.wq,
        wk: w.wk,
        wv: w.wv,
        wf: w.wf,
        gamma: tape.constant(Tensor::zeros(&[1, 8])),
    };
    let spans = vec![(0, 2), (2, 3), (3, 5)];
    let g = GraphInput::complete(spans.clone());
    let out = layers::graph_attention(&mut tape, x, &g, &gw, Ctx::eval()).unwrap();
    let nodes = layers::pool_nodes(&mut tape, x, &spans).unwrap();
    let sa = layers::self_attention(&mut tape, nodes, &w, 1, None, Ctx::eval()).unwrap();
    assert!(tape.value(out).max_abs_diff(tape.value(sa)) < 1e-12);
}

#[test]
fn neighbor_order_does_not_matter() {
    let (vocab, p) = fixture(1);
    let m = Model::new(tiny(vocab.len(), true), 8).unwrap();
    let g = &p[0].graph;
    let mut shuffled = g.clone();
    shuffled.edges.reverse();
    let run = |graph: &GraphInput| {
        let mut tape = Tape::new();
        let (w, _) = m.bind(&mut tape, false);
        let x = m.embed_encoder(&mut tape, &w, &p[0].encoded, false).unwrap();
        let blk = w.encoder[0].graph.unwrap();
        let (out, alpha, edges) =
            layers::graph_attention_with_coefficients(&mut tape, x, graph, &blk.attn, Ctx::eval())
                .unwrap();
        let a = tape.value(alpha).data().to_vec();
        let mut sums = vec![0.0; graph.node_spans.len()];
        for (e, v) in edges.iter().zip(&a) {
            sums[e.0] += v;
        }
        (tape.value(out).clone(), sums)
    };
    let (a, sums) = run(g);
    let (b, _) = run(&shuffled);
    assert!(a.max_abs_diff(&b) < 1e-12);
    for s in sums {
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-9);
    }
}

#[test]
fn zero_lambda_leaves_classifier_untouched() {
    let (vocab, p) = fixture(1);
    let mut cfg = tiny(vocab.len(), true);
    cfg.lambda = 0.0;
    let m = Model::new(cfg, 9).unwrap();
    let mut tape = Tape::new();
    let (w, vars) = m.bind(&mut tape, true);
    let l = m.losses(&mut tape, &w, &p[0], true).unwrap();
    assert!(tape.value(l.ct).item().unwrap() > 0.0);
    tape.backward(l.composite).unwrap();
    let c = m.layout.classifier;
    for i in [c.w1, c.b1, c.w2, c.b2] {
        let g = tape.grad(vars[i]).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0), "{}", m.params.names()[i]);
    }
    let e = tape.grad(vars[m.layout.embed]).unwrap();
    assert!(e.data().iter().any(|&v| v != 0.0));
}

#[test]
fn eval_loss_is_deterministic() {
    let (vocab, p) = fixture(1);
    let mut cfg = tiny(vocab.len(), true);
    cfg.dropout = 0.1;
    let m = Model::new(cfg, 10).unwrap();
    let run = || {
        let mut tape = Tape::with_seed(99);
        let (w, _) = m.bind(&mut tape, false);
        let l = m.losses(&mut tape, &w, &p[0], false).unwrap();
        tape.value(l.composite).item().unwrap()
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn relation_count_is_checked() {
    let (vocab, p) = fixture(1);
    let mut cfg = tiny(vocab.len(), true);
    cfg.n_relations = 2;
    let m = Model::new(cfg, 1).unwrap();
    assert!(matches!(m.memory(&p[0]), Err(QgError::Config(_))));
}

#[test]
fn checkpoint_round_trip_and_hash_check() {
    let (vocab, p) = fixture(1);
    let m = Model::new(tiny(vocab.len(), true), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("ckpt/step-1");
    save_checkpoint(&m, &vocab.content_hash(), 1, &stem).unwrap();
    let (back, manifest) = load_checkpoint(&stem, Some(&vocab.content_hash())).unwrap();
    assert_eq!(manifest.step, 1);
    assert_eq!(back.config, m.config);
    let a = m.memory(&p[0]).unwrap();
    let b = back.memory(&p[0]).unwrap();
    assert_eq!(a.states.data(), b.states.data());
    assert!(matches!(
        load_checkpoint(&stem, Some("deadbeef")),
        Err(QgError::Checkpoint(_))
    ));
}

#[test]
fn invalid_configs() {
    let bad = [
        ModelConfig { d_model: 10, n_heads: 3, ..Default::default() },
        ModelConfig { lambda: 1.5, ..Default::default() },
        ModelConfig { dropout: 1.0, ..Default::default() },
    ];
    for cfg in bad {
        assert!(Model::new(cfg, 0).unwrap_err().is_config());
    }
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/encoder_two_layer_d16.json")
}

/// Regression against a stored run of a fixed 2-layer d=16 model. Set
/// `HOPQG_BLESS=1` to rewrite the golden file.
#[test]
fn two_layer_golden_outputs() {
    let (vocab, p) = fixture(1);
    let mut cfg = tiny(vocab.len(), true);
    cfg.n_layers = 2;
    let m = Model::new(cfg, 2024).unwrap();
    let mem = m.memory(&p[0]).unwrap();
    let step = m.next_log_probs(&mem, &p[0].encoded.decoder_input_ids[..3]).unwrap();
    let got = serde_json::json!({
        "encoder_states": mem.states.data(),
        "sf_probs": mem.sf_probs,
        "next_log_probs": step,
    });
    let path = golden_path();
    if std::env::var_os("HOPQG_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&got).unwrap()).unwrap();
        return;
    }
    let want: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for key in ["encoder_states", "sf_probs", "next_log_probs"] {
        let a = got[key].as_array().unwrap();
        let b = want[key].as_array().unwrap();
        assert_eq!(a.len(), b.len(), "{key}");
        for (x, y) in a.iter().zip(b) {
            assert_abs_diff_eq!(x.as_f64().unwrap(), y.as_f64().unwrap(), epsilon = 1e-10);
        }
    }
}
