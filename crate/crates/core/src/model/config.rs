use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROPE_BASE: f64 = 10000.0;
const RMS_EPS: f64 = 1e-5;

/// Architecture hyperparameters of a LLaMA-style decoder. Missing fields
/// take the values of the default 6-block toy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_blocks: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub rms_eps: f64,
    /// Per-head width. Unset means `d_model / n_heads`; only width-pruned
    /// models carry an explicit value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(6, 128, 4, 384)
    }
}

impl ModelConfig {
    /// LLaMA-7B geometry (vocab 32000, d 4096, 32 heads, FFN 11008, 32 blocks).
    pub fn llama_7b() -> Self {
        ModelConfig {
            vocab_size: 32000,
            d_model: 4096,
            n_heads: 32,
            d_ffn: 11008,
            n_blocks: 32,
            max_seq_len: 2048,
            rope_base: ROPE_BASE,
            rms_eps: RMS_EPS,
            head_dim: None,
        }
    }

    /// LLaMA-13B geometry.
    pub fn llama_13b() -> Self {
        ModelConfig {
            d_model: 5120,
            n_heads: 40,
            d_ffn: 13824,
            n_blocks: 40,
            ..Self::llama_7b()
        }
    }

    /// Byte-level desk-scale model.
    pub fn toy(n_blocks: usize, d_model: usize, n_heads: usize, d_ffn: usize) -> Self {
        ModelConfig {
            vocab_size: crate::data::VOCAB_SIZE,
            d_model,
            n_heads,
            d_ffn,
            n_blocks,
            max_seq_len: 256,
            rope_base: ROPE_BASE,
            rms_eps: RMS_EPS,
            head_dim: None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim.unwrap_or(self.d_model / self.n_heads.max(1))
    }

    /// Width of the attention projections, `n_heads * head_dim`.
    pub fn attn_inner(&self) -> usize {
        self.n_heads * self.head_dim()
    }

    /// Full validation for a freshly built model.
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be >= 1".into()));
        }
        self.validate_dims()
    }

    /// Validation that tolerates zero live blocks (pruned models).
    pub fn validate_dims(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        match self.head_dim {
            None if self.d_model % self.n_heads != 0 => {
                return Err(Error::Config(format!(
                    "d_model {} is not divisible by n_heads {}",
                    self.d_model, self.n_heads
                )))
            }
            Some(0) => return Err(Error::Config("head_dim must be >= 1".into())),
            _ => {}
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if !(self.rms_eps > 0.0) {
            return Err(Error::Config(format!("rms_eps must be positive, got {}", self.rms_eps)));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::Config(format!("rope_base must exceed 1, got {}", self.rope_base)));
        }
        Ok(())
    }

    /// Projection weights plus the pre-norm of one attention module.
    pub fn mha_params(&self) -> u64 {
        let d = self.d_model as u64;
        4 * d * self.attn_inner() as u64 + d
    }

    /// Projection weights plus the pre-norm of one feed-forward module.
    pub fn ffn_params(&self) -> u64 {
        let d = self.d_model as u64;
        3 * d * self.d_ffn as u64 + d
    }

    pub fn block_params(&self) -> u64 {
        self.mha_params() + self.ffn_params()
    }

    /// Embedding, LM head and final norm.
    pub fn non_block_params(&self) -> u64 {
        let d = self.d_model as u64;
        2 * self.vocab_size as u64 * d + d
    }

    pub fn total_params(&self) -> u64 {
        self.non_block_params() + self.n_blocks as u64 * self.block_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn llama_7b_counts() {
        let c = ModelConfig::llama_7b();
        assert_eq!(c.block_params(), 202_383_360);
        assert_eq!(c.total_params(), 6_738_415_616);
    }

    #[test]
    fn llama_13b_counts() {
        let c = ModelConfig::llama_13b();
        assert_eq!(c.block_params(), 4 * 5120 * 5120 + 3 * 5120 * 13824 + 2 * 5120);
        assert!((c.total_params() as f64 / 1e9 - 13.0).abs() < 0.05);
    }

    #[test]
    fn zero_blocks_is_embedding_head_and_norm() {
        let c = ModelConfig {
            n_blocks: 0,
            ..ModelConfig::toy(1, 8, 2, 16)
        };
        assert_eq!(c.total_params(), 2 * 257 * 8 + 8);
        assert!(c.validate().is_err());
        assert!(c.validate_dims().is_ok());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig::toy(2, 10, 3, 16);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn json_defaults_fill_rope_and_eps() {
        let c: ModelConfig = serde_json::from_str(
            r#"{"vocab_size":257,"d_model":8,"n_heads":2,"d_ffn":16,"n_blocks":2,"max_seq_len":32}"#,
        )
        .unwrap();
        assert_eq!(c.rope_base, 10000.0);
        assert_eq!(c.rms_eps, 1e-5);
        assert_eq!(c.head_dim(), 4);
    }
}
