//! Decoder stack forward pass over tape variables.

use crate::error::{Error, Result};
use crate::numerics::{AttnSpec, Float, Tape, Tensor, Var};
use crate::transformer::config::ModelConfig;
use crate::transformer::lora::join;
use crate::transformer::params::Bound;

/// Keys and values of one layer, already rotated, `[n, n_kv_heads*head_dim]`.
#[derive(Clone, Copy)]
pub struct LayerKv<'t, S: Float> {
    pub k: Var<'t, S>,
    pub v: Var<'t, S>,
}

/// External per-layer KV context the sequence attends to before itself.
#[derive(Clone)]
pub struct KvPrefix<'t, S: Float> {
    pub layers: Vec<LayerKv<'t, S>>,
    pub positions: Vec<usize>,
}

impl<'t, S: Float> KvPrefix<'t, S> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Register concrete per-layer `(k, v)` tensors as constants.
    pub fn constant(tape: &'t Tape<S>, layers: &[(Tensor<S>, Tensor<S>)], positions: Vec<usize>) -> Self {
        KvPrefix {
            layers: layers
                .iter()
                .map(|(k, v)| LayerKv {
                    k: tape.constant(k.clone()),
                    v: tape.constant(v.clone()),
                })
                .collect(),
            positions,
        }
    }
}

/// Per-layer record of how many key entries every query attended to.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SpanReport {
    pub layers: Vec<LayerSpan>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpan {
    /// Entries contributed by the external prefix.
    pub context: usize,
    /// Total entries attended by each query row.
    pub attended: Vec<usize>,
}

impl SpanReport {
    /// The external-context size if it is the same at every layer.
    pub fn uniform_context(&self) -> Option<usize> {
        let first = self.layers.first()?.context;
        self.layers.iter().all(|l| l.context == first).then_some(first)
    }
}

pub enum Input<'a, 't, S: Float> {
    Tokens(&'a [usize]),
    Embedded(Var<'t, S>),
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub capture_hidden: bool,
    pub capture_kv: bool,
    pub logits: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            capture_hidden: false,
            capture_kv: false,
            logits: true,
        }
    }
}

pub struct ForwardOutput<'t, S: Float> {
    pub logits: Option<Var<'t, S>>,
    /// Residual-stream input of each layer, when captured.
    pub hidden: Vec<Var<'t, S>>,
    /// Residual stream after the last layer, before the final norm.
    pub last_hidden: Var<'t, S>,
    /// This sequence's own keys and values per layer, when captured.
    pub kv: Vec<LayerKv<'t, S>>,
    pub spans: SpanReport,
}

pub struct AttnOutput<'t, S: Float> {
    /// Residual stream after the attention residual add.
    pub residual: Var<'t, S>,
    pub kv: LayerKv<'t, S>,
    pub attended: Vec<usize>,
}

/// One decoder stack bound on a tape, addressed through a path prefix.
pub struct Stack<'a, 't, S: Float> {
    pub cfg: &'a ModelConfig,
    params: &'a Bound<'t, S>,
    prefix: String,
    lora_scale: S,
}

impl<'a, 't, S: Float> Stack<'a, 't, S> {
    pub fn new(cfg: &'a ModelConfig, params: &'a Bound<'t, S>, prefix: &str) -> Self {
        Stack {
            cfg,
            params,
            prefix: prefix.to_string(),
            lora_scale: S::zero(),
        }
    }

    /// Scale applied to any adapters found next to projection weights.
    pub fn with_lora_scale(mut self, scale: f64) -> Self {
        self.lora_scale = S::from_f64_lossy(scale);
        self
    }

    pub fn param(&self, path: &str) -> Result<Var<'t, S>> {
        self.params.get(&join(&self.prefix, path))
    }

    fn eps(&self) -> S {
        S::from_f64_lossy(self.cfg.norm_eps)
    }

    /// `x·W`, plus the low-rank update when the stack carries one for `W`.
    pub fn project(&self, x: Var<'t, S>, path: &str) -> Result<Var<'t, S>> {
        let full = join(&self.prefix, path);
        let w = self.params.get(&full)?;
        let base = x.matmul(w)?;
        match (
            self.params.try_get(&format!("{full}.lora_a")),
            self.params.try_get(&format!("{full}.lora_b")),
        ) {
            (Some(a), Some(b)) => base.add(x.matmul(a)?.matmul(b)?.scale(self.lora_scale)?),
            _ => Ok(base),
        }
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Var<'t, S>> {
        self.param("embed")?.embedding(tokens)
    }

    /// Keys and values a layer derives from residual-stream states.
    pub fn project_kv(&self, layer: usize, hidden: Var<'t, S>, positions: &[usize]) -> Result<LayerKv<'t, S>> {
        let l = format!("layer.{layer}");
        let normed = hidden.rmsnorm(self.param(&format!("{l}.attn_norm"))?, self.eps())?;
        self.project_kv_normed(layer, normed, positions)
    }

    fn project_kv_normed(&self, layer: usize, normed: Var<'t, S>, positions: &[usize]) -> Result<LayerKv<'t, S>> {
        let l = format!("layer.{layer}");
        let k = self
            .project(normed, &format!("{l}.attn.wk"))?
            .rope(positions, self.cfg.head_dim, self.cfg.rope_base)?;
        let v = self.project(normed, &format!("{l}.attn.wv"))?;
        Ok(LayerKv { k, v })
    }

    /// Pre-norm causal self-attention sub-block with optional prefix KV.
    pub fn attention_block(
        &self,
        layer: usize,
        x: Var<'t, S>,
        positions: &[usize],
        prefix: Option<LayerKv<'t, S>>,
    ) -> Result<AttnOutput<'t, S>> {
        let l = format!("layer.{layer}");
        let normed = x.rmsnorm(self.param(&format!("{l}.attn_norm"))?, self.eps())?;
        let q = self
            .project(normed, &format!("{l}.attn.wq"))?
            .rope(positions, self.cfg.head_dim, self.cfg.rope_base)?;
        let own = self.project_kv_normed(layer, normed, positions)?;
        let (keys, values, n_prefix) = match prefix {
            Some(p) => {
                let n = p.k.shape()[0];
                let tape = x.tape();
                (tape.concat(&[p.k, own.k], 0)?, tape.concat(&[p.v, own.v], 0)?, n)
            }
            None => (own.k, own.v, 0),
        };
        let spec = AttnSpec {
            n_heads: self.cfg.n_heads,
            n_kv_heads: self.cfg.n_kv_heads,
            head_dim: self.cfg.head_dim,
            visible: (0..positions.len()).map(|j| n_prefix + j + 1).collect(),
        };
        let attn = q.attention(keys, values, &spec)?;
        let out = self.project(attn, &format!("{l}.attn.wo"))?;
        Ok(AttnOutput {
            residual: x.add(out)?,
            kv: own,
            attended: spec.visible,
        })
    }

    /// Pre-norm gated MLP sub-block including its residual add.
    pub fn mlp_block(&self, layer: usize, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let l = format!("layer.{layer}");
        let normed = x.rmsnorm(self.param(&format!("{l}.mlp_norm"))?, self.eps())?;
        let gate = normed.matmul(self.param(&format!("{l}.mlp.gate"))?)?.silu()?;
        let up = normed.matmul(self.param(&format!("{l}.mlp.up"))?)?;
        let down = gate.mul(up)?.matmul(self.param(&format!("{l}.mlp.down"))?)?;
        x.add(down)
    }

    /// Final norm followed by the tied output projection.
    pub fn logits(&self, h: Var<'t, S>) -> Result<Var<'t, S>> {
        let normed = h.rmsnorm(self.param("final_norm")?, self.eps())?;
        normed.matmul_t(self.param("embed")?)
    }

    pub fn validate_positions(&self, positions: &[usize], prefix: Option<&[usize]>) -> Result<()> {
        let n_prefix = prefix.map_or(0, <[usize]>::len);
        if positions.len() + n_prefix > self.cfg.max_seq {
            return Err(Error::SequenceOverflow {
                len: positions.len() + n_prefix,
                max: self.cfg.max_seq,
            });
        }
        if let Some(&last) = positions.last() {
            if last >= self.cfg.max_seq {
                return Err(Error::SequenceOverflow {
                    len: last + 1,
                    max: self.cfg.max_seq,
                });
            }
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Position("positions must be strictly increasing".into()));
        }
        if let (Some(pp), Some(&first)) = (prefix, positions.first()) {
            if let Some(&bad) = pp.iter().find(|&&p| p >= first) {
                return Err(Error::Position(format!(
                    "prefix position {bad} collides with sequence starting at {first}"
                )));
            }
        }
        Ok(())
    }

    pub fn forward(
        &self,
        input: Input<'_, 't, S>,
        positions: &[usize],
        prefix: Option<&KvPrefix<'t, S>>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<'t, S>> {
        self.validate_positions(positions, prefix.map(|p| p.positions.as_slice()))?;
        let mut x = match input {
            Input::Tokens(t) => {
                if let Some(&bad) = t.iter().find(|&&id| id >= self.cfg.vocab_size) {
                    return Err(Error::Invalid(format!(
                        "token id {bad} outside vocabulary {}",
                        self.cfg.vocab_size
                    )));
                }
                self.embed(t)?
            }
            Input::Embedded(v) => v,
        };
        let shape = x.shape();
        if shape.len() != 2 || shape[0] != positions.len() || shape[1] != self.cfg.d_model {
            return Err(Error::shape(
                "forward",
                format!("input {shape:?} with {} positions", positions.len()),
            ));
        }
        if let Some(p) = prefix {
            if p.layers.len() != self.cfg.n_layers {
                return Err(Error::shape(
                    "forward",
                    format!("prefix has {} layers, stack {}", p.layers.len(), self.cfg.n_layers),
                ));
            }
        }
        let mut hidden = Vec::new();
        let mut kv = Vec::new();
        let mut spans = SpanReport::default();
        for layer in 0..self.cfg.n_layers {
            if opts.capture_hidden {
                hidden.push(x);
            }
            let a = self.attention_block(layer, x, positions, prefix.map(|p| p.layers[layer]))?;
            spans.layers.push(LayerSpan {
                context: prefix.map_or(0, KvPrefix::len),
                attended: a.attended,
            });
            if opts.capture_kv {
                kv.push(a.kv);
            }
            x = self.mlp_block(layer, a.residual)?;
        }
        let logits = if opts.logits { Some(self.logits(x)?) } else { None };
        Ok(ForwardOutput {
            logits,
            hidden,
            last_hidden: x,
            kv,
            spans,
        })
    }
}
