//! Single-pass memory-slot compressor: memory embeddings are appended to the
//! source and their final-layer states become the context.

use serde::{Deserialize, Serialize};

use crate::compressors::{Payload, System, COMPRESSOR, MEMORY_TOKENS};
use crate::error::Result;
use crate::numerics::{Float, Var};
use crate::transformer::{Bound, ForwardOptions, Input, Stack};

/// How much of the compressor's attention is trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IcaeCapacity {
    /// Adapters on query and key projections.
    Icae,
    /// Adapters on query, key, value and output projections.
    IcaePlus,
    /// Every attention projection fully trainable.
    IcaePlusPlus,
}

pub(super) fn compress<'t, S: Float>(
    sys: &System<S>,
    bound: &Bound<'t, S>,
    lora_scale: f64,
    source: &[usize],
) -> Result<Payload<'t, S>> {
    let stack = Stack::new(&sys.model, bound, COMPRESSOR).with_lora_scale(lora_scale);
    let t = source.len();
    let m = sys.m;
    let tokens = stack.embed(source)?;
    let slots: Var<'t, S> = bound.get(MEMORY_TOKENS)?;
    let x = tokens.tape().concat(&[tokens, slots], 0)?;
    let positions: Vec<usize> = (0..t + m).collect();
    let out = stack.forward(
        Input::Embedded(x),
        &positions,
        None,
        ForwardOptions {
            logits: false,
            ..Default::default()
        },
    )?;
    Ok(Payload::Embedding(out.last_hidden.slice(0, t..t + m)?))
}
