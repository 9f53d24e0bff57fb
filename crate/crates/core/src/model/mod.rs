//! Transformer encoder-decoder with optional graph-augmented encoder
//! layers, plus the supporting-fact classifier.

mod checkpoint;
pub mod config;
pub mod layers;
pub mod loss;
pub mod params;

use std::sync::Arc;

use numkit::{Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use config::ModelConfig;
use layers::{Ctx, attention, feed_forward, fuse, graph_attention, mlp, residual_norm};
pub use params::{build_params, Layout, ParamStore};

use crate::encoding::{EncodedInput, GraphInput, Prepared};
use crate::error::{QgError, Result};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout<usize>,
    pub params: ParamStore,
}

/// Scalar losses of one example, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub nll: Var,
    pub ct: Var,
    pub composite: Var,
}

/// Encoder output reused across decoding steps.
#[derive(Clone, Debug)]
pub struct Memory {
    pub states: Arc<Tensor>,
    /// Classifier probability per `<sep>`.
    pub sf_probs: Vec<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, params) = build_params(&config, seed);
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Registers all parameters on `tape`; `trainable` decides whether
    /// they collect gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (Layout<Var>, Vec<Var>) {
        let vars = if trainable {
            self.params.bind_params(tape)
        } else {
            self.params.bind_constants(tape)
        };
        (self.layout.map(|i| vars[i]), vars)
    }

    fn ctx(&self, train: bool) -> Ctx {
        Ctx {
            dropout: self.config.dropout,
            train,
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&i| {
                if (i as usize) < self.config.vocab_size {
                    Ok(i as usize)
                } else {
                    Err(QgError::Decode {
                        id: i,
                        size: self.config.vocab_size,
                    })
                }
            })
            .collect()
    }

    fn embed_tokens(&self, tape: &mut Tape, table: Var, ids: &[u32]) -> Result<Var> {
        let ids = self.check_ids(ids)?;
        let e = tape.embedding(table, &ids)?;
        let e = tape.scale(e, (self.config.d_model as f64).sqrt());
        let pos = tape.constant(layers::positional_encoding(ids.len(), self.config.d_model));
        Ok(tape.add(e, pos)?)
    }

    /// Token, position and answer-type embeddings of the context.
    pub fn embed_encoder(
        &self,
        tape: &mut Tape,
        w: &Layout<Var>,
        enc: &EncodedInput,
        train: bool,
    ) -> Result<Var> {
        let x = self.embed_tokens(tape, w.embed, &enc.encoder_ids)?;
        let types: Vec<usize> = enc.answer_type_ids.iter().map(|&t| t as usize).collect();
        let t = tape.embedding(w.answer_type, &types)?;
        let x = tape.add(x, t)?;
        Ok(tape.dropout(x, self.config.dropout, train)?)
    }

    /// Token states of the final encoder layer.
    pub fn encode(
        &self,
        tape: &mut Tape,
        w: &Layout<Var>,
        enc: &EncodedInput,
        graph: Option<&GraphInput>,
        train: bool,
    ) -> Result<Var> {
        let ctx = self.ctx(train);
        let cfg = &self.config;
        let graph = if cfg.graph_enabled {
            let g = graph.ok_or_else(|| {
                QgError::Config("graph-enabled model needs a context-entity graph".into())
            })?;
            if g.max_relation().is_some_and(|r| r >= cfg.n_relations) {
                return Err(QgError::Config(format!(
                    "graph uses relation {} but the model has {}",
                    g.max_relation().unwrap_or(0),
                    cfg.n_relations
                )));
            }
            Some(g)
        } else {
            None
        };
        let mut x = self.embed_encoder(tape, w, enc, train)?;
        for layer in &w.encoder {
            let mut z = attention(tape, x, x, &layer.attn, cfg.n_heads, None, ctx)?;
            if let (Some(block), Some(g)) = (&layer.graph, graph) {
                let nodes = graph_attention(tape, x, g, &block.attn, ctx)?;
                z = fuse(tape, z, nodes, &g.node_spans, &block.fuse)?;
            }
            x = residual_norm(tape, x, z, &layer.ln1, cfg.layer_norm_eps, ctx)?;
            let h = feed_forward(tape, x, &layer.ff, ctx)?;
            x = residual_norm(tape, x, h, &layer.ln2, cfg.layer_norm_eps, ctx)?;
        }
        Ok(x)
    }

    /// Classifier logits for the given `<sep>` positions.
    pub fn classifier_logits(
        &self,
        tape: &mut Tape,
        w: &Layout<Var>,
        states: Var,
        sep_positions: &[usize],
    ) -> Result<Var> {
        let h = tape.gather_rows(states, sep_positions)?;
        mlp(tape, h, &w.classifier)
    }

    /// Next-token logits at every decoder position, given gold prefixes.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        w: &Layout<Var>,
        memory: Var,
        decoder_input: &[u32],
        train: bool,
    ) -> Result<Var> {
        let ctx = self.ctx(train);
        let cfg = &self.config;
        let mask = layers::causal_mask(decoder_input.len());
        let y = self.embed_tokens(tape, w.embed, decoder_input)?;
        let mut y = tape.dropout(y, cfg.dropout, train)?;
        for layer in &w.decoder {
            let s = attention(tape, y, y, &layer.self_attn, cfg.n_heads, Some(&mask), ctx)?;
            y = residual_norm(tape, y, s, &layer.ln1, cfg.layer_norm_eps, ctx)?;
            let c = attention(tape, y, memory, &layer.cross, cfg.n_heads, None, ctx)?;
            y = residual_norm(tape, y, c, &layer.ln2, cfg.layer_norm_eps, ctx)?;
            let h = feed_forward(tape, y, &layer.ff, ctx)?;
            y = residual_norm(tape, y, h, &layer.ln3, cfg.layer_norm_eps, ctx)?;
        }
        Ok(tape.matmul_nt(y, w.embed)?)
    }

    /// Teacher-forced generation loss, supporting-fact loss and their
    /// weighted sum for one prepared example.
    pub fn losses(
        &self,
        tape: &mut Tape,
        w: &Layout<Var>,
        p: &Prepared,
        train: bool,
    ) -> Result<Losses> {
        let states = self.encode(tape, w, &p.encoded, Some(&p.graph), train)?;
        let logits =
            self.decode_teacher_forced(tape, w, states, &p.encoded.decoder_input_ids, train)?;
        let nll = loss::label_smoothed_nll(
            tape,
            logits,
            &p.encoded.decoder_target_ids,
            self.config.label_smoothing,
            None,
        )?;
        let sep_logits = self.classifier_logits(tape, w, states, &p.encoded.sep_positions)?;
        let ct = loss::bce_with_logits(tape, sep_logits, &p.encoded.sf_labels)?;
        let composite = loss::composite_loss(tape, nll, ct, self.config.lambda)?;
        Ok(Losses { nll, ct, composite })
    }

    /// Runs the encoder and classifier without dropout.
    pub fn memory(&self, p: &Prepared) -> Result<Memory> {
        let mut tape = Tape::new();
        let (w, _) = self.bind(&mut tape, false);
        let states = self.encode(&mut tape, &w, &p.encoded, Some(&p.graph), false)?;
        let logits = self.classifier_logits(&mut tape, &w, states, &p.encoded.sep_positions)?;
        let sf_probs = tape
            .value(logits)
            .data()
            .iter()
            .map(|&z| numkit::tape::sigmoid(z))
            .collect();
        Ok(Memory {
            states: Arc::new(tape.value(states).clone()),
            sf_probs,
        })
    }

    /// Log-probabilities of the token following `prefix` (which starts
    /// with `<bos>`).
    pub fn next_log_probs(&self, memory: &Memory, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (w, _) = self.bind(&mut tape, false);
        let mem = tape.constant_arc(Arc::clone(&memory.states));
        let logits = self.decode_teacher_forced(&mut tape, &w, mem, prefix, false)?;
        let last = tape.value(logits).row(prefix.len() - 1);
        Ok(log_softmax(last))
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests;
