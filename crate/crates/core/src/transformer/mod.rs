//! Decoder-only transformer chassis shared by every stack in the system.

pub mod config;
pub mod lora;
pub mod model;
pub mod params;

#[cfg(test)]
mod tests;

pub use config::{ModelConfig, PrefixPositions};
pub use lora::{lora_forward, LoraConfig, LoraTarget};
pub use model::{AttnOutput, ForwardOptions, ForwardOutput, Input, KvPrefix, LayerKv, LayerSpan, SpanReport, Stack};
pub use params::{glob_match, init_stack, stack_param_count, trainable_parameters, Bound, FreezeMask, ParamStore};
