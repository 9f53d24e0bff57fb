use serde::{Deserialize, Serialize};

use crate::error::{QgError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Hidden width of the fusion MLP; `None` means `2 * d_model`.
    pub fusion_hidden: Option<usize>,
    pub n_relations: usize,
    pub graph_enabled: bool,
    /// One relation-embedding table for all layers instead of one per layer.
    pub shared_relation_embeddings: bool,
    pub dropout: f64,
    pub label_smoothing: f64,
    /// Weight of the supporting-fact loss in the composite objective.
    pub lambda: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32_000,
            d_model: 512,
            n_heads: 8,
            n_layers: 2,
            d_ff: 2048,
            fusion_hidden: None,
            n_relations: 3,
            graph_enabled: false,
            shared_relation_embeddings: false,
            dropout: 0.1,
            label_smoothing: 0.1,
            lambda: 0.5,
            layer_norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(QgError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 5 {
            return fail(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.n_relations == 0 {
            return fail("n_layers, d_ff and n_relations must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn fusion_width(&self) -> usize {
        self.fusion_hidden.unwrap_or(2 * self.d_model)
    }
}
