use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of one QA network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub attention_heads: usize,
    pub conv_kernel: usize,
    pub embedding_encoder_blocks: usize,
    pub model_encoder_blocks: usize,
    /// Convolutions per embedding-encoder block.
    pub convs_per_block: usize,
    /// Convolutions per model-encoder block.
    pub model_convs_per_block: usize,
    pub max_span_length: usize,
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_window: usize,
    pub highway_layers: usize,
    pub dropout_rate: f64,
    pub word_vocab_size: usize,
    pub char_vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 96,
            attention_heads: 2,
            conv_kernel: 5,
            embedding_encoder_blocks: 1,
            model_encoder_blocks: 7,
            convs_per_block: 4,
            model_convs_per_block: 2,
            max_span_length: 30,
            word_dim: 64,
            char_dim: 32,
            char_window: 3,
            highway_layers: 2,
            dropout_rate: 0.1,
            word_vocab_size: 2,
            char_vocab_size: 2,
        }
    }
}

impl ModelConfig {
    /// A very small architecture for gradient checks and quick tests.
    pub fn tiny() -> Self {
        ModelConfig {
            hidden_dim: 8,
            attention_heads: 2,
            conv_kernel: 3,
            embedding_encoder_blocks: 1,
            model_encoder_blocks: 1,
            convs_per_block: 1,
            model_convs_per_block: 1,
            max_span_length: 4,
            word_dim: 6,
            char_dim: 4,
            char_window: 3,
            highway_layers: 1,
            dropout_rate: 0.0,
            word_vocab_size: 12,
            char_vocab_size: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.attention_heads == 0 {
            return fail("hidden_dim and attention_heads must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.attention_heads) {
            return fail(format!(
                "hidden_dim {} is not divisible by attention_heads {}",
                self.hidden_dim, self.attention_heads
            ));
        }
        if self.model_encoder_blocks == 0 {
            return fail("model_encoder_blocks must be at least 1".into());
        }
        if self.max_span_length == 0 {
            return fail("max_span_length must be at least 1".into());
        }
        if self.conv_kernel.is_multiple_of(2) || self.char_window.is_multiple_of(2) {
            return fail("conv_kernel and char_window must be odd".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.word_vocab_size < 2 || self.char_vocab_size < 2 {
            return fail("vocabularies need at least the PAD and OOV entries".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.attention_heads
    }
}
