//! Two-stack compressor: a source pass exposes per-layer token states, and
//! memory tokens read them through a cross-attention block in every layer.

use serde::{Deserialize, Serialize};

use crate::compressors::{Payload, System, MEMORY, MEMORY_TOKENS, SOURCE};
use crate::error::{Error, Result};
use crate::numerics::{AttnSpec, Float, Rng, Var};
use crate::transformer::{Bound, ModelConfig, ParamStore, Stack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CrossAttnVariant {
    /// One head spanning the full model width.
    OneHead,
    /// The host's head layout, one kv head per query head.
    Mha,
    /// The host's query heads over a single shared kv head.
    Mqa,
    /// The host's self-attention layout and weights, copied.
    MqaSelfInit,
}

impl CrossAttnVariant {
    pub const ALL: [CrossAttnVariant; 4] = [
        CrossAttnVariant::OneHead,
        CrossAttnVariant::Mha,
        CrossAttnVariant::Mqa,
        CrossAttnVariant::MqaSelfInit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CrossAttnVariant::OneHead => "one_head",
            CrossAttnVariant::Mha => "mha",
            CrossAttnVariant::Mqa => "mqa",
            CrossAttnVariant::MqaSelfInit => "mqa_self_init",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// `(n_heads, n_kv_heads, head_dim)` of the block.
    pub fn geometry(self, cfg: &ModelConfig) -> (usize, usize, usize) {
        match self {
            CrossAttnVariant::OneHead => (1, 1, cfg.d_model),
            CrossAttnVariant::Mha => (cfg.n_heads, cfg.n_heads, cfg.head_dim),
            CrossAttnVariant::Mqa => (cfg.n_heads, 1, cfg.head_dim),
            CrossAttnVariant::MqaSelfInit => (cfg.n_heads, cfg.n_kv_heads, cfg.head_dim),
        }
    }
}

/// What each layer hands to the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PayloadTap {
    /// Memory stream right after the cross-attention residual add.
    PostResidual,
    /// The cross-attention output alone.
    RawOutput,
}

pub fn xattn_param_count(cfg: &ModelConfig, variant: CrossAttnVariant) -> usize {
    let (h, kvh, hd) = variant.geometry(cfg);
    let d = cfg.d_model;
    2 * d * h * hd + 2 * d * kvh * hd
}

/// Weights `wq, wk, wv, wo` of one cross-attention block. `host` holds the
/// layer's self-attention weights (`wq`, `wk`, `wv`, `wo`).
pub fn build_cross_attention<S: Float>(
    cfg: &ModelConfig,
    variant: CrossAttnVariant,
    host: &ParamStore<S>,
    rng: &mut Rng,
) -> Result<ParamStore<S>> {
    let (h, kvh, hd) = variant.geometry(cfg);
    if kvh == 0 || h % kvh != 0 {
        return Err(Error::Config {
            key: "model.n_kv_heads".into(),
            message: format!("{kvh} kv heads do not divide {h} heads"),
        });
    }
    let d = cfg.d_model;
    let mut p = ParamStore::new();
    if variant == CrossAttnVariant::MqaSelfInit {
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(w, host.get(w)?.clone());
        }
        return Ok(p);
    }
    p.insert("wq", rng.normal_tensor(&[d, h * hd], 0.02));
    p.insert("wk", rng.normal_tensor(&[d, kvh * hd], 0.02));
    p.insert("wv", rng.normal_tensor(&[d, kvh * hd], 0.02));
    p.insert("wo", rng.normal_tensor(&[h * hd, d], 0.02));
    Ok(p)
}

/// Non-causal, position-free attention of `queries` over `states`.
pub fn cross_attention<'t, S: Float>(
    bound: &Bound<'t, S>,
    prefix: &str,
    geometry: (usize, usize, usize),
    queries: Var<'t, S>,
    states: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let (n_heads, n_kv_heads, head_dim) = geometry;
    let p = |w: &str| bound.get(&format!("{prefix}.{w}"));
    let q = queries.matmul(p("wq")?)?;
    let k = states.matmul(p("wk")?)?;
    let v = states.matmul(p("wv")?)?;
    let n = states.shape()[0];
    let spec = AttnSpec {
        n_heads,
        n_kv_heads,
        head_dim,
        visible: vec![n; queries.shape()[0]],
    };
    q.attention(k, v, &spec)?.matmul(p("wo")?)
}

pub(super) fn compress<'t, S: Float>(
    sys: &System<S>,
    bound: &Bound<'t, S>,
    variant: CrossAttnVariant,
    tap: PayloadTap,
    source: &[usize],
) -> Result<Payload<'t, S>> {
    let cfg = &sys.model;
    let src = Stack::new(cfg, bound, SOURCE);
    let mem = Stack::new(cfg, bound, MEMORY);
    let pos_s: Vec<usize> = (0..source.len()).collect();
    src.validate_positions(&pos_s, None)?;
    // Layer inputs of the source pass; the last layer's own output is unused.
    let mut h = src.embed(source)?;
    let mut captured = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        captured.push(h);
        if layer + 1 < cfg.n_layers {
            let a = src.attention_block(layer, h, &pos_s, None)?;
            h = src.mlp_block(layer, a.residual)?;
        }
    }
    let geometry = variant.geometry(cfg);
    let pos_m: Vec<usize> = (0..sys.m).collect();
    let mut x = bound.get(MEMORY_TOKENS)?;
    let mut out = Vec::with_capacity(cfg.n_layers);
    for (layer, &h_src) in captured.iter().enumerate() {
        let h_mem = mem.attention_block(layer, x, &pos_m, None)?.residual;
        let o = cross_attention(bound, &format!("{MEMORY}.layer.{layer}.xattn"), geometry, h_mem, h_src)?;
        let mixed = h_mem.add(o)?;
        out.push(match tap {
            PayloadTap::PostResidual => mixed,
            PayloadTap::RawOutput => o,
        });
        if layer + 1 < cfg.n_layers {
            x = mem.mlp_block(layer, mixed)?;
        }
    }
    Ok(Payload::PerLayer(out))
}
