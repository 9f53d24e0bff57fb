//! Parameter storage and the typed layout that names every tensor.
//!
//! Layout structs are generic over the handle type: `usize` indexes the
//! [`ParamStore`], `Var` is the same tensor registered on a tape.

use std::sync::Arc;

use numkit::{init_gaussian_embedding, init_lecun_uniform, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;

#[derive(Clone, Copy, Debug)]
pub struct Attention<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wf: T,
}

/// Two-layer perceptron `relu(x W1 + b1) W2 + b2`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Copy, Debug)]
pub struct GraphAttention<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wf: T,
    /// One row per relation type.
    pub gamma: T,
}

#[derive(Clone, Copy, Debug)]
pub struct GraphBlock<T> {
    pub attn: GraphAttention<T>,
    pub fuse: Mlp<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer<T> {
    pub attn: Attention<T>,
    pub graph: Option<GraphBlock<T>>,
    pub ln1: LayerNorm<T>,
    pub ff: Mlp<T>,
    pub ln2: LayerNorm<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer<T> {
    pub self_attn: Attention<T>,
    pub ln1: LayerNorm<T>,
    pub cross: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub ff: Mlp<T>,
    pub ln3: LayerNorm<T>,
}

#[derive(Clone, Debug)]
pub struct Layout<T> {
    /// Shared by encoder input, decoder input and the output projection.
    pub embed: T,
    pub answer_type: T,
    pub encoder: Vec<EncoderLayer<T>>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub classifier: Mlp<T>,
}

impl<T: Copy> Attention<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Attention<U> {
        Attention {
            wq: f(self.wq),
            wk: f(self.wk),
            wv: f(self.wv),
            wf: f(self.wf),
        }
    }
}

impl<T: Copy> Mlp<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Mlp<U> {
        Mlp {
            w1: f(self.w1),
            b1: f(self.b1),
            w2: f(self.w2),
            b2: f(self.b2),
        }
    }
}

impl<T: Copy> LayerNorm<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> LayerNorm<U> {
        LayerNorm {
            gain: f(self.gain),
            bias: f(self.bias),
        }
    }
}

impl<T: Copy> GraphAttention<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> GraphAttention<U> {
        GraphAttention {
            wq: f(self.wq),
            wk: f(self.wk),
            wv: f(self.wv),
            wf: f(self.wf),
            gamma: f(self.gamma),
        }
    }
}

impl<T: Copy> Layout<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Layout<U> {
        let f = &f;
        Layout {
            embed: f(self.embed),
            answer_type: f(self.answer_type),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayer {
                    attn: l.attn.map(f),
                    graph: l.graph.map(|g| GraphBlock {
                        attn: g.attn.map(f),
                        fuse: g.fuse.map(f),
                    }),
                    ln1: l.ln1.map(f),
                    ff: l.ff.map(f),
                    ln2: l.ln2.map(f),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLayer {
                    self_attn: l.self_attn.map(f),
                    ln1: l.ln1.map(f),
                    cross: l.cross.map(f),
                    ln2: l.ln2.map(f),
                    ff: l.ff.map(f),
                    ln3: l.ln3.map(f),
                })
                .collect(),
            classifier: self.classifier.map(f),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    /// Copy-on-write access; clones only if a tape still holds the tensor.
    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[i])
    }

    /// Mutable views of every tensor, in parameter order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().map(Arc::make_mut).collect()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|t| t.as_ref())
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(Arc::new(t));
        self.tensors.len() - 1
    }

    /// Registers every tensor as a gradient-bearing leaf.
    pub fn bind_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(Arc::clone(t))).collect()
    }

    /// Registers every tensor as a constant (inference).
    pub fn bind_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.constant_arc(Arc::clone(t)))
            .collect()
    }

    pub(crate) fn replace(&mut self, i: usize, t: Tensor) {
        self.tensors[i] = Arc::new(t);
    }
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn seed(&mut self) -> u64 {
        self.rng.random()
    }

    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let s = self.seed();
        self.store.push(name, init_lecun_uniform(&[rows, cols], s))
    }

    fn embedding(&mut self, name: String, rows: usize, d: usize) -> usize {
        let s = self.seed();
        self.store.push(name, init_gaussian_embedding(rows, d, s))
    }

    fn zeros(&mut self, name: String, n: usize) -> usize {
        self.store.push(name, Tensor::zeros(&[n]))
    }

    fn ones(&mut self, name: String, n: usize) -> usize {
        self.store.push(name, Tensor::full(&[n], 1.0))
    }

    fn attention(&mut self, p: &str, d: usize) -> Attention<usize> {
        Attention {
            wq: self.matrix(format!("{p}.wq"), d, d),
            wk: self.matrix(format!("{p}.wk"), d, d),
            wv: self.matrix(format!("{p}.wv"), d, d),
            wf: self.matrix(format!("{p}.wf"), d, d),
        }
    }

    fn mlp(&mut self, p: &str, d_in: usize, hidden: usize, d_out: usize) -> Mlp<usize> {
        Mlp {
            w1: self.matrix(format!("{p}.w1"), d_in, hidden),
            b1: self.zeros(format!("{p}.b1"), hidden),
            w2: self.matrix(format!("{p}.w2"), hidden, d_out),
            b2: self.zeros(format!("{p}.b2"), d_out),
        }
    }

    fn layer_norm(&mut self, p: &str, d: usize) -> LayerNorm<usize> {
        LayerNorm {
            gain: self.ones(format!("{p}.gain"), d),
            bias: self.zeros(format!("{p}.bias"), d),
        }
    }
}

/// Allocates and initializes all parameters for `cfg`.
pub fn build_params(cfg: &ModelConfig, seed: u64) -> (Layout<usize>, ParamStore) {
    let d = cfg.d_model;
    let mut b = Builder {
        store: ParamStore::default(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let embed = b.embedding("embed".into(), cfg.vocab_size, d);
    let answer_type = b.embedding("answer_type".into(), 2, d);
    let shared_gamma = (cfg.graph_enabled && cfg.shared_relation_embeddings)
        .then(|| b.embedding("graph.gamma".into(), cfg.n_relations, d));
    let encoder = (0..cfg.n_layers)
        .map(|l| {
            let p = format!("enc{l}");
            let attn = b.attention(&format!("{p}.attn"), d);
            let graph = cfg.graph_enabled.then(|| {
                let g = b.attention(&format!("{p}.graph"), d);
                let gamma = shared_gamma.unwrap_or_else(|| {
                    b.embedding(format!("{p}.graph.gamma"), cfg.n_relations, d)
                });
                GraphBlock {
                    attn: GraphAttention {
                        wq: g.wq,
                        wk: g.wk,
                        wv: g.wv,
                        wf: g.wf,
                        gamma,
                    },
                    fuse: b.mlp(&format!("{p}.fuse"), 2 * d, cfg.fusion_width(), d),
                }
            });
            let ln1 = b.layer_norm(&format!("{p}.ln1"), d);
            let ff = b.mlp(&format!("{p}.ff"), d, cfg.d_ff, d);
            let ln2 = b.layer_norm(&format!("{p}.ln2"), d);
            EncoderLayer {
                attn,
                graph,
                ln1,
                ff,
                ln2,
            }
        })
        .collect();
    let decoder = (0..cfg.n_layers)
        .map(|l| {
            let p = format!("dec{l}");
            DecoderLayer {
                self_attn: b.attention(&format!("{p}.self"), d),
                ln1: b.layer_norm(&format!("{p}.ln1"), d),
                cross: b.attention(&format!("{p}.cross"), d),
                ln2: b.layer_norm(&format!("{p}.ln2"), d),
                ff: b.mlp(&format!("{p}.ff"), d, cfg.d_ff, d),
                ln3: b.layer_norm(&format!("{p}.ln3"), d),
            }
        })
        .collect();
    let classifier = b.mlp("classifier", d, d, 1);
    let layout = Layout {
        embed,
        answer_type,
        encoder,
        decoder,
        classifier,
    };
    (layout, b.store)
}
