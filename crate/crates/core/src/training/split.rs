//! Source/target splitting of corpus sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub total_len: usize,
    /// Inclusive bounds on the number of source tokens.
    pub source_lo: usize,
    pub source_hi: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            total_len: 512,
            source_lo: 352,
            source_hi: 416,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.source_lo == 0 || self.source_lo > self.source_hi || self.source_hi >= self.total_len {
            return Err(Error::Config {
                key: "split".into(),
                message: format!(
                    "need 1 <= source_lo ({}) <= source_hi ({}) < total_len ({})",
                    self.source_lo, self.source_hi, self.total_len
                ),
            });
        }
        Ok(())
    }
}

/// Cut `seq` at a point drawn uniformly from the source range.
pub fn split_sequence<'a>(seq: &'a [usize], spec: &SplitSpec, rng: &mut Rng) -> Result<(&'a [usize], &'a [usize])> {
    spec.validate()?;
    if seq.len() != spec.total_len {
        return Err(Error::Invalid(format!(
            "sequence of {} tokens, split expects {}",
            seq.len(),
            spec.total_len
        )));
    }
    let cut = rng.range_inclusive(spec.source_lo, spec.source_hi);
    Ok(seq.split_at(cut))
}
