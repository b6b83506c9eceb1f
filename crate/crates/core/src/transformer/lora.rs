//! Low-rank adapters on attention projections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Float, Rng, Tensor, Var};
use crate::transformer::config::ModelConfig;
use crate::transformer::params::ParamStore;

/// Attention projection an adapter can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Post,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [
        LoraTarget::Query,
        LoraTarget::Key,
        LoraTarget::Value,
        LoraTarget::Post,
    ];

    pub fn weight_name(self) -> &'static str {
        match self {
            LoraTarget::Query => "wq",
            LoraTarget::Key => "wk",
            LoraTarget::Value => "wv",
            LoraTarget::Post => "wo",
        }
    }

    /// `(in, out)` dims of the adapted matrix.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        let q = cfg.n_heads * cfg.head_dim;
        match self {
            LoraTarget::Query => (cfg.d_model, q),
            LoraTarget::Key | LoraTarget::Value => (cfg.d_model, cfg.kv_dim()),
            LoraTarget::Post => (q, cfg.d_model),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub scope: Vec<LoraTarget>,
}

impl LoraConfig {
    pub fn new(rank: usize, alpha: f64, scope: &[LoraTarget]) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config {
                key: "lora.rank".into(),
                message: "rank must be at least 1".into(),
            });
        }
        let mut scope = scope.to_vec();
        scope.sort();
        scope.dedup();
        Ok(LoraConfig { rank, alpha, scope })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Trainable adapter parameters added to one stack.
    pub fn param_count(&self, cfg: &ModelConfig) -> usize {
        let per_layer: usize = self
            .scope
            .iter()
            .map(|t| {
                let (i, o) = t.dims(cfg);
                i * self.rank + self.rank * o
            })
            .sum();
        cfg.n_layers * per_layer
    }
}

/// Add `lora_a` / `lora_b` tensors next to every scoped projection of the
/// stack stored under `prefix` (empty for an unprefixed store). `B` starts
/// at zero so the adapted stack equals the base stack.
pub fn attach<S: Float>(
    params: &mut ParamStore<S>,
    prefix: &str,
    cfg: &ModelConfig,
    lora: &LoraConfig,
    rng: &mut Rng,
) {
    for layer in 0..cfg.n_layers {
        for &t in &lora.scope {
            let (i, o) = t.dims(cfg);
            let base = join(prefix, &format!("layer.{layer}.attn.{}", t.weight_name()));
            let std = 1.0 / (i as f64).sqrt();
            params.insert(format!("{base}.lora_a"), rng.normal_tensor(&[i, lora.rank], std));
            params.insert(format!("{base}.lora_b"), Tensor::zeros([lora.rank, o]));
        }
    }
}

pub(crate) fn join(prefix: &str, path: &str) -> String {
    if prefix.is_empty() {
        path.to_string()
    } else {
        format!("{prefix}.{path}")
    }
}

/// `x·W + scale·(x·A)·B`, never forming `A·B`.
pub fn lora_forward<'t, S: Float>(
    x: Var<'t, S>,
    w: Var<'t, S>,
    a: Var<'t, S>,
    b: Var<'t, S>,
    scale: S,
) -> Result<Var<'t, S>> {
    let base = x.matmul(w)?;
    let delta = x.matmul(a)?.matmul(b)?.scale(scale)?;
    base.add(delta)
}
