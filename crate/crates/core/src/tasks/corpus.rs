//! Pretraining-style token stream with learnable structure.
//!
//! Each sequence is either a recall episode (shots of a freshly drawn
//! prototype task, so later shots of a class repeat an earlier binding) or a
//! run of copy spans, periodic motifs and noise over the free corpus ids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::tasks::{gen_task, sample_shot, TaskConfig, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub total_len: usize,
    /// Probability that a sequence is a recall episode.
    pub episode_prob: f64,
    /// Inclusive range of classes per episode.
    pub episode_classes: (usize, usize),
    /// Inclusive span lengths for copy segments (the span is emitted twice).
    pub copy_len: (usize, usize),
    /// Inclusive motif periods and repetition counts for periodic segments.
    pub period: (usize, usize),
    pub repeats: (usize, usize),
    /// Inclusive lengths for noise segments.
    pub noise_len: (usize, usize),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            total_len: 512,
            episode_prob: 0.75,
            episode_classes: (4, 32),
            copy_len: (4, 16),
            period: (2, 6),
            repeats: (3, 6),
            noise_len: (4, 16),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| {
            Err(Error::Config {
                key: format!("corpus.{k}"),
                message: m.into(),
            })
        };
        if self.total_len == 0 {
            return bad("total_len", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.episode_prob) {
            return bad("episode_prob", "must lie in [0, 1]");
        }
        for (k, (lo, hi)) in [
            ("episode_classes", self.episode_classes),
            ("copy_len", self.copy_len),
            ("period", self.period),
            ("repeats", self.repeats),
            ("noise_len", self.noise_len),
        ] {
            if lo == 0 || lo > hi {
                return bad(k, "range must satisfy 1 <= lo <= hi");
            }
        }
        Ok(())
    }
}

/// Deterministic, random-access stream of corpus sequences.
#[derive(Debug, Clone)]
pub struct CorpusStream {
    pub config: CorpusConfig,
    pub task: TaskConfig,
    pub vocab: Vocab,
    rng: Rng,
}

impl CorpusStream {
    pub fn new(config: CorpusConfig, task: TaskConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(CorpusStream {
            config,
            task,
            vocab,
            rng: Rng::new(seed).split("corpus"),
        })
    }

    /// Sequence number `index`; independent of any other index.
    pub fn sequence(&self, index: u64) -> Vec<usize> {
        let mut r = self.rng.split_index("seq", index);
        if r.bernoulli(self.config.episode_prob) {
            self.episode(&mut r)
        } else {
            self.segments(&mut r)
        }
    }

    fn episode(&self, r: &mut Rng) -> Vec<usize> {
        let (lo, hi) = self.config.episode_classes;
        let classes = r.range_inclusive(lo, hi);
        let tc = TaskConfig {
            classes,
            ..self.task.clone()
        };
        let mut out = Vec::with_capacity(self.config.total_len + tc.shot_len());
        // The configured task shape is validated upstream; fall back to noise
        // tokens if an episode size cannot be placed.
        let Ok(task) = gen_task(&tc, &self.vocab, r) else {
            return self.segments(r);
        };
        while out.len() < self.config.total_len {
            let c = r.below(classes);
            out.extend(sample_shot(&task, c, &self.vocab, r).render(&self.vocab));
        }
        out.truncate(self.config.total_len);
        out
    }

    fn corpus_token(&self, r: &mut Rng) -> usize {
        self.vocab.corpus.start + r.below(self.vocab.corpus.len())
    }

    fn segments(&self, r: &mut Rng) -> Vec<usize> {
        let c = &self.config;
        let mut out = Vec::with_capacity(c.total_len + 64);
        while out.len() < c.total_len {
            match r.below(3) {
                0 => {
                    let n = r.range_inclusive(c.copy_len.0, c.copy_len.1);
                    let span: Vec<usize> = (0..n).map(|_| self.corpus_token(r)).collect();
                    out.extend_from_slice(&span);
                    out.extend_from_slice(&span);
                }
                1 => {
                    let p = r.range_inclusive(c.period.0, c.period.1);
                    let reps = r.range_inclusive(c.repeats.0, c.repeats.1);
                    let motif: Vec<usize> = (0..p).map(|_| self.corpus_token(r)).collect();
                    for _ in 0..reps {
                        out.extend_from_slice(&motif);
                    }
                }
                _ => {
                    let n = r.range_inclusive(c.noise_len.0, c.noise_len.1);
                    out.extend((0..n).map(|_| self.corpus_token(r)));
                }
            }
        }
        out.truncate(c.total_len);
        out
    }

    /// Expected unigram distribution of the stream, from the construction.
    ///
    /// Episode positions follow the fixed shot layout (features, separator,
    /// label ids, delimiter); feature and label draws are exchangeable over
    /// their ranges, and every segment kind has a uniform marginal over the
    /// corpus ids.
    pub fn expected_unigram(&self) -> Vec<f64> {
        let v = &self.vocab;
        let n = self.config.total_len as f64;
        let sl = self.task.shot_len();
        let (mut nf, mut nl, mut ns, mut nd) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..self.config.total_len {
            let k = i % sl;
            if k < self.task.k_in {
                nf += 1.0;
            } else if k == self.task.k_in {
                ns += 1.0;
            } else if k < sl - 1 {
                nl += 1.0;
            } else {
                nd += 1.0;
            }
        }
        let pe = self.config.episode_prob;
        let mut p = vec![0.0; v.size];
        p[v.sep] = pe * ns / n;
        p[v.delim] = pe * nd / n;
        for id in v.features.clone() {
            p[id] = pe * nf / n / v.n_features() as f64;
        }
        for id in v.labels.clone() {
            p[id] = pe * nl / n / v.n_labels() as f64;
        }
        for id in v.corpus.clone() {
            p[id] = (1.0 - pe) / v.corpus.len() as f64;
        }
        p
    }
}

pub fn unigram_counts(tokens: impl IntoIterator<Item = usize>, size: usize) -> Vec<u64> {
    let mut c = vec![0u64; size];
    for t in tokens {
        c[t] += 1;
    }
    c
}

/// Shannon entropy in nats of a (possibly unnormalized) distribution.
pub fn entropy(weights: &[f64]) -> f64 {
    let z: f64 = weights.iter().sum();
    weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / z;
            -p * p.ln()
        })
        .sum()
}
