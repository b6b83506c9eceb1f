use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Where a prefix (compressed context) sits in the rotary position space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrefixPositions {
    /// Prefix entries at `0..m`, following tokens from `m`.
    Contiguous,
    /// Prefix entry `i` at `floor(i·t/m)`, following tokens from `t`, so the
    /// target sees the same positions it would for the uncompressed prompt.
    Stretched,
}

impl PrefixPositions {
    /// Positions of an `m`-entry prefix summarizing `t` source tokens, and
    /// the first position available to the tokens that follow.
    pub fn assign(self, m: usize, t: usize) -> (Vec<usize>, usize) {
        match self {
            PrefixPositions::Contiguous => ((0..m).collect(), m),
            PrefixPositions::Stretched => {
                let t = t.max(m);
                ((0..m).map(|i| i * t / m).collect(), t)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_kv_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub prefix_positions: PrefixPositions,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            head_dim: 32,
            n_kv_heads: 4,
            ffn_dim: 256,
            vocab_size: 512,
            max_seq: 1024,
            rope_base: 10000.0,
            norm_eps: 1e-5,
            prefix_positions: PrefixPositions::Contiguous,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks and unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            head_dim: 8,
            n_kv_heads: 4,
            ffn_dim: 64,
            vocab_size: 64,
            max_seq: 256,
            ..Default::default()
        }
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: format!("model.{key}"),
                message,
            })
        };
        if self.n_layers == 0 {
            return bad("n_layers", "must be at least 1".into());
        }
        if self.n_heads == 0 || self.n_heads * self.head_dim != self.d_model {
            return bad(
                "n_heads",
                format!(
                    "n_heads ({}) x head_dim ({}) must equal d_model ({})",
                    self.n_heads, self.head_dim, self.d_model
                ),
            );
        }
        if self.head_dim % 2 != 0 {
            return bad("head_dim", "must be even for rotary positions".into());
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return bad("n_kv_heads", "must divide n_heads".into());
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 || self.max_seq == 0 {
            return bad("vocab_size", "sizes must be positive".into());
        }
        if self.norm_eps <= 0.0 || self.rope_base <= 0.0 {
            return bad("norm_eps", "norm_eps and rope_base must be positive".into());
        }
        Ok(())
    }

    /// Canonical text used for hashing; stable across runs and platforms.
    pub fn canonical(&self) -> String {
        format!(
            "n_layers={};d_model={};n_heads={};head_dim={};n_kv_heads={};ffn_dim={};vocab_size={};max_seq={};rope_base={:e};norm_eps={:e};prefix_positions={:?}",
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.head_dim,
            self.n_kv_heads,
            self.ffn_dim,
            self.vocab_size,
            self.max_seq,
            self.rope_base,
            self.norm_eps,
            self.prefix_positions,
        )
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }
}
