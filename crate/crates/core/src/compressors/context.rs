//! Compressed contexts and how the frozen target consumes them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Float, Tape, Tensor, Var};
use crate::transformer::{Bound, ForwardOptions, Input, KvPrefix, LayerKv, LayerSpan, ModelConfig, ParamStore, SpanReport, Stack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContextKind {
    /// One `[m, d]` state per target layer, read through that layer's K/V.
    PerLayer = 0,
    /// A single `[m, d]` block fed to the target as input embeddings.
    EmbeddingPrefix = 1,
}

impl ContextKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ContextKind::PerLayer),
            1 => Some(ContextKind::EmbeddingPrefix),
            _ => None,
        }
    }
}

/// Compressor output still attached to a tape.
pub enum Payload<'t, S: Float> {
    PerLayer(Vec<Var<'t, S>>),
    Embedding(Var<'t, S>),
}

impl<'t, S: Float> Payload<'t, S> {
    pub fn m(&self) -> usize {
        match self {
            Payload::PerLayer(v) => v.first().map_or(0, |x| x.shape()[0]),
            Payload::Embedding(x) => x.shape()[0],
        }
    }
}

/// Concrete compressed context, the unit that is cached and shipped.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedContext<S: Float> {
    pub kind: ContextKind,
    /// `L` arrays for a per-layer context, one for an embedding prefix.
    pub layers: Vec<Tensor<S>>,
    pub source_t: usize,
    pub config_hash: [u8; 32],
}

impl<S: Float> CompressedContext<S> {
    pub fn m(&self) -> usize {
        self.layers.first().map_or(0, |t| t.shape()[0])
    }

    pub fn d(&self) -> usize {
        self.layers.first().map_or(0, |t| t.last_dim())
    }

    pub fn ratio(&self) -> f64 {
        self.source_t as f64 / self.m() as f64
    }

    /// Attach to a tape as constants.
    pub fn on_tape<'t>(&self, tape: &'t Tape<S>) -> Payload<'t, S> {
        match self.kind {
            ContextKind::PerLayer => Payload::PerLayer(self.layers.iter().map(|t| tape.constant(t.clone())).collect()),
            ContextKind::EmbeddingPrefix => Payload::Embedding(tape.constant(self.layers[0].clone())),
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.source_t == other.source_t
            && self.config_hash == other.config_hash
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.bitwise_eq(b))
    }
}

pub struct TargetOutput<'t, S: Float> {
    /// Logits of the target tokens only, `[T, V]`.
    pub logits: Var<'t, S>,
    pub spans: SpanReport,
    /// Context plus the target tokens as a KV prefix, for continuing the
    /// sequence without re-running it. Present only when requested.
    pub continuation: Option<KvPrefix<'t, S>>,
}

/// Run the target over `tokens` attending to `payload`.
pub fn target_forward<'t, S: Float>(
    target: &Stack<'_, 't, S>,
    payload: &Payload<'t, S>,
    source_t: usize,
    tokens: &[usize],
) -> Result<TargetOutput<'t, S>> {
    target_forward_with(target, payload, source_t, tokens, false)
}

pub fn target_forward_with<'t, S: Float>(
    target: &Stack<'_, 't, S>,
    payload: &Payload<'t, S>,
    source_t: usize,
    tokens: &[usize],
    continuation: bool,
) -> Result<TargetOutput<'t, S>> {
    let cfg = target.cfg;
    let m = payload.m();
    let (prefix_pos, next) = cfg.prefix_positions.assign(m, source_t);
    let positions: Vec<usize> = (next..next + tokens.len()).collect();
    let all_pos: Vec<usize> = prefix_pos.iter().copied().chain(positions.iter().copied()).collect();
    let opts = ForwardOptions {
        capture_kv: continuation,
        ..Default::default()
    };
    match payload {
        Payload::PerLayer(states) => {
            if states.len() != cfg.n_layers {
                return Err(Error::shape(
                    "target_attend",
                    format!("context has {} layers, target {}", states.len(), cfg.n_layers),
                ));
            }
            let layers = states
                .iter()
                .enumerate()
                .map(|(l, &h)| {
                    if h.shape() != [m, cfg.d_model] {
                        return Err(Error::shape("target_attend", format!("layer {l} payload {:?}", h.shape())));
                    }
                    target.project_kv(l, h, &prefix_pos)
                })
                .collect::<Result<Vec<_>>>()?;
            let prefix = KvPrefix {
                layers,
                positions: prefix_pos,
            };
            let out = target.forward(Input::Tokens(tokens), &positions, Some(&prefix), opts)?;
            let continuation = if continuation {
                let layers = prefix
                    .layers
                    .iter()
                    .zip(&out.kv)
                    .map(|(p, own)| {
                        Ok(LayerKv {
                            k: own.k.tape().concat(&[p.k, own.k], 0)?,
                            v: own.v.tape().concat(&[p.v, own.v], 0)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(KvPrefix {
                    layers,
                    positions: all_pos,
                })
            } else {
                None
            };
            Ok(TargetOutput {
                logits: out.logits.expect("requested"),
                spans: out.spans,
                continuation,
            })
        }
        Payload::Embedding(e) => {
            if e.shape() != [m, cfg.d_model] {
                return Err(Error::shape("target_attend", format!("embedding payload {:?}", e.shape())));
            }
            let emb = target.embed(tokens)?;
            let x = e.tape().concat(&[*e, emb], 0)?;
            let out = target.forward(
                Input::Embedded(x),
                &all_pos,
                None,
                ForwardOptions {
                    logits: false,
                    ..opts
                },
            )?;
            let rows = out.last_hidden.slice(0, m..m + tokens.len())?;
            let spans = SpanReport {
                layers: out
                    .spans
                    .layers
                    .into_iter()
                    .map(|l| LayerSpan {
                        context: m,
                        attended: l.attended[m..].to_vec(),
                    })
                    .collect(),
            };
            let continuation = continuation.then(|| KvPrefix {
                layers: out.kv,
                positions: all_pos,
            });
            Ok(TargetOutput {
                logits: target.logits(rows)?,
                spans,
                continuation,
            })
        }
    }
}

/// Frozen-target inference over a concrete context. Refuses contexts built
/// for a different model configuration.
pub fn target_attend<S: Float>(
    cfg: &ModelConfig,
    target: &ParamStore<S>,
    context: &CompressedContext<S>,
    tokens: &[usize],
) -> Result<(Tensor<S>, SpanReport)> {
    if context.config_hash != cfg.hash() {
        return Err(Error::ConfigHashMismatch);
    }
    if context.d() != cfg.d_model {
        return Err(Error::shape("target_attend", format!("context width {} vs d_model {}", context.d(), cfg.d_model)));
    }
    let tape = Tape::new();
    let bound = Bound::frozen(&tape, target);
    let stack = Stack::new(cfg, &bound, "");
    let payload = context.on_tape(&tape);
    let out = target_forward(&stack, &payload, context.source_t, tokens)?;
    Ok((out.logits.value(), out.spans))
}
