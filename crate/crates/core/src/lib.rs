//! Many-shot prompt compression into per-layer memory-token representations
//! for a frozen decoder-only transformer, with the single-pass memory-slot
//! baselines, two-phase training, synthetic tasks, and an evaluation harness.

pub mod error;
pub mod numerics;
pub mod transformer;
pub mod tasks;
pub mod compressors;
pub mod training;
pub mod eval;
pub mod cacheio;
pub mod config;

pub use error::{Error, Result};
