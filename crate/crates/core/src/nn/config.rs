use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Transformer shape parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub max_seq_len: usize,
}

impl TransformerConfig {
    /// Supervised encoder: one block, four heads, daily positions over a leap year.
    pub const SUPERVISED: TransformerConfig = TransformerConfig {
        embed_dim: 128,
        num_heads: 4,
        hidden_dim: 256,
        encoder_blocks: 1,
        decoder_blocks: 0,
        max_seq_len: 366,
    };

    /// Original PRESTO encoder-decoder.
    pub const PRESTO: TransformerConfig = TransformerConfig {
        embed_dim: 128,
        num_heads: 8,
        hidden_dim: 512,
        encoder_blocks: 2,
        decoder_blocks: 2,
        max_seq_len: 24,
    };

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.num_heads == 0
            || self.hidden_dim == 0
            || self.encoder_blocks == 0
            || self.max_seq_len == 0
        {
            return Err(contract(format!("non-positive transformer extent in {self:?}")));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(contract(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}
