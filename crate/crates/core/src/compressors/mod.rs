//! Context compressors: the two-stack cross-attention compressor, the
//! single-pass memory-slot family, and the fewer-shots truncation baseline.

mod context;
mod icae;
mod memcom;
mod truncate;


use serde::{Deserialize, Serialize};

pub use context::{target_attend, target_forward, target_forward_with, CompressedContext, ContextKind, Payload, TargetOutput};
pub use icae::IcaeCapacity;
pub use memcom::{build_cross_attention, cross_attention, xattn_param_count, CrossAttnVariant, PayloadTap};
pub use truncate::truncate_baseline;

use crate::error::{Error, Result};
use crate::numerics::{Float, Rng, Tape, Tensor};
use crate::transformer::{lora, Bound, FreezeMask, LoraConfig, LoraTarget, ModelConfig, ParamStore, Stack};

pub const TARGET: &str = "target";
pub const SOURCE: &str = "source";
pub const MEMORY: &str = "memory";
pub const COMPRESSOR: &str = "compressor";
pub const MEMORY_TOKENS: &str = "memory_tokens";

/// Training progress recorded on a system; phases must advance in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhaseStamp {
    Fresh = 0,
    Phase1 = 1,
    Phase2 = 2,
}

impl PhaseStamp {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(PhaseStamp::Fresh),
            1 => Some(PhaseStamp::Phase1),
            2 => Some(PhaseStamp::Phase2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Method {
    MemCom { variant: CrossAttnVariant, tap: PayloadTap },
    Icae { capacity: IcaeCapacity, lora: LoraConfig },
}

impl Method {
    pub fn memcom() -> Self {
        Method::MemCom {
            variant: CrossAttnVariant::OneHead,
            tap: PayloadTap::PostResidual,
        }
    }

    /// Default adapter shape for the memory-slot family.
    pub fn icae(capacity: IcaeCapacity) -> Self {
        let scope: &[LoraTarget] = match capacity {
            IcaeCapacity::Icae => &[LoraTarget::Query, LoraTarget::Key],
            _ => &LoraTarget::ALL,
        };
        Method::Icae {
            capacity,
            lora: LoraConfig::new(8, 16.0, scope).expect("rank 8"),
        }
    }

    pub fn kind(&self) -> ContextKind {
        match self {
            Method::MemCom { .. } => ContextKind::PerLayer,
            Method::Icae { .. } => ContextKind::EmbeddingPrefix,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::MemCom { .. } => "memcom",
            Method::Icae {
                capacity: IcaeCapacity::Icae,
                ..
            } => "icae",
            Method::Icae {
                capacity: IcaeCapacity::IcaePlus,
                ..
            } => "icae_plus",
            Method::Icae {
                capacity: IcaeCapacity::IcaePlusPlus,
                ..
            } => "icae_pp",
        }
    }
}

/// A frozen target plus the trainable compressor feeding it, all in one
/// parameter tree (`target.*`, `source.*`, `memory.*`, `compressor.*`,
/// `memory_tokens`).
#[derive(Debug, Clone)]
pub struct System<S: Float> {
    pub model: ModelConfig,
    pub method: Method,
    pub m: usize,
    pub params: ParamStore<S>,
    pub stamp: PhaseStamp,
}

impl<S: Float> System<S> {
    /// Build a compressor around `target` (an unprefixed stack). Every
    /// compressor stack starts as a value-identical copy of the target.
    pub fn new(model: ModelConfig, method: Method, m: usize, target: &ParamStore<S>, rng: &mut Rng) -> Result<Self> {
        model.validate()?;
        if m == 0 {
            return Err(Error::Config {
                key: "budget.m".into(),
                message: "memory size must be positive".into(),
            });
        }
        let mut params = ParamStore::new();
        params.graft(TARGET, target);
        params.insert(MEMORY_TOKENS, rng.split("memory_tokens").normal_tensor(&[m, model.d_model], 0.02));
        match &method {
            Method::MemCom { variant, .. } => {
                params.graft(SOURCE, target);
                params.graft(MEMORY, target);
                let mut xr = rng.split("xattn");
                for layer in 0..model.n_layers {
                    let host = target.subtree(&format!("layer.{layer}.attn"));
                    let block = build_cross_attention::<S>(&model, *variant, &host, &mut xr)?;
                    params.graft(&format!("{MEMORY}.layer.{layer}.xattn"), &block);
                }
            }
            Method::Icae { capacity, lora: lc } => {
                params.graft(COMPRESSOR, target);
                if *capacity != IcaeCapacity::IcaePlusPlus {
                    lora::attach(&mut params, COMPRESSOR, &model, lc, &mut rng.split("lora"));
                }
            }
        }
        let sys = System {
            model,
            method,
            m,
            params,
            stamp: PhaseStamp::Fresh,
        };
        sys.target_params().get("embed")?;
        Ok(sys)
    }

    pub fn target_params(&self) -> ParamStore<S> {
        self.params.subtree(TARGET)
    }

    pub fn target_hash(&self) -> [u8; 32] {
        self.model.hash()
    }

    pub fn kind(&self) -> ContextKind {
        self.method.kind()
    }

    /// Trainable scope for a training phase. The target is never included.
    pub fn scope(&self, phase: u8) -> Result<FreezeMask> {
        let patterns: Vec<String> = match (&self.method, phase) {
            (Method::MemCom { .. }, 1) => vec![format!("{MEMORY}.layer.*.xattn.*"), MEMORY_TOKENS.into()],
            (Method::MemCom { .. }, 2) => vec![format!("{SOURCE}.*"), format!("{MEMORY}.*"), MEMORY_TOKENS.into()],
            (Method::Icae { capacity, .. }, 1 | 2) => match capacity {
                IcaeCapacity::IcaePlusPlus => ["wq", "wk", "wv", "wo"]
                    .iter()
                    .map(|w| format!("{COMPRESSOR}.layer.*.attn.{w}"))
                    .chain([MEMORY_TOKENS.to_string()])
                    .collect(),
                _ => vec![format!("{COMPRESSOR}.layer.*.attn.*.lora_*"), MEMORY_TOKENS.into()],
            },
            (_, p) => {
                return Err(Error::Config {
                    key: "train.phase".into(),
                    message: format!("no trainable scope for phase {p}"),
                })
            }
        };
        let mask = FreezeMask::new(patterns);
        let resolved = mask.resolve(&self.params)?;
        if let Some(bad) = resolved.iter().find(|p| p.starts_with(&format!("{TARGET}."))) {
            return Err(Error::Invalid(format!("target parameter {bad} in trainable scope")));
        }
        Ok(mask)
    }

    /// Compress `source` on an existing tape.
    pub fn compress_on<'t>(&self, bound: &Bound<'t, S>, source: &[usize]) -> Result<Payload<'t, S>> {
        let t = source.len();
        if t <= self.m {
            return Err(Error::Invalid(format!(
                "source of {t} tokens does not exceed memory size {}",
                self.m
            )));
        }
        match &self.method {
            Method::MemCom { variant, tap } => memcom::compress(self, bound, *variant, *tap, source),
            Method::Icae { lora: lc, capacity } => {
                let scale = if *capacity == IcaeCapacity::IcaePlusPlus { 0.0 } else { lc.scale() };
                icae::compress(self, bound, scale, source)
            }
        }
    }

    /// Compress to concrete tensors (no gradients).
    pub fn compress(&self, source: &[usize]) -> Result<CompressedContext<S>> {
        let tape = Tape::new();
        let bound = Bound::frozen(&tape, &self.params);
        let payload = self.compress_on(&bound, source)?;
        let layers: Vec<Tensor<S>> = match payload {
            Payload::PerLayer(v) => v.into_iter().map(|x| x.value()).collect(),
            Payload::Embedding(x) => vec![x.value()],
        };
        Ok(CompressedContext {
            kind: self.kind(),
            layers,
            source_t: source.len(),
            config_hash: self.target_hash(),
        })
    }

    pub fn target_stack<'a, 't>(&'a self, bound: &'a Bound<'t, S>) -> Stack<'a, 't, S> {
        Stack::new(&self.model, bound, TARGET)
    }

    /// Trainable parameter count for a phase.
    pub fn trainable_count(&self, phase: u8) -> Result<usize> {
        let set = self.scope(phase)?.resolve(&self.params)?;
        Ok(set.iter().map(|p| self.params.get(p).map(Tensor::numel).unwrap_or(0)).sum())
    }
}
