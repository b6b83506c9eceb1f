//! Synthetic data: a structured pretraining corpus and nearest-prototype
//! classification tasks with class-balanced prompt packing.

mod corpus;
mod records;


use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use corpus::{entropy, unigram_counts, CorpusConfig, CorpusStream};
pub use records::{parse_task_records, TaskRecords};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Token-id layout shared by the corpus and the tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub pad: usize,
    pub sep: usize,
    pub delim: usize,
    pub features: Range<usize>,
    pub labels: Range<usize>,
    pub corpus: Range<usize>,
}

impl Vocab {
    /// Three reserved ids, then `n_features` feature ids, `n_labels` label
    /// ids, and the remainder as free corpus ids.
    pub fn new(size: usize, n_features: usize, n_labels: usize) -> Result<Self> {
        let f0 = 3;
        let l0 = f0 + n_features;
        let c0 = l0 + n_labels;
        if n_features < 2 || n_labels < 1 || c0 >= size {
            return Err(Error::Config {
                key: "model.vocab_size".into(),
                message: format!("{size} ids cannot hold 3 reserved + {n_features} feature + {n_labels} label ids + corpus"),
            });
        }
        Ok(Vocab {
            size,
            pad: 0,
            sep: 1,
            delim: 2,
            features: f0..l0,
            labels: l0..c0,
            corpus: c0..size,
        })
    }

    pub fn for_size(size: usize) -> Result<Self> {
        let quarter = (size / 4).max(2);
        Vocab::new(size, quarter, quarter)
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub classes: usize,
    pub k_in: usize,
    pub k_lab: usize,
    /// Fraction of prototype positions resampled in each shot.
    pub noise: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            classes: 32,
            k_in: 8,
            k_lab: 2,
            noise: 0.125,
        }
    }
}

impl TaskConfig {
    pub fn noisy_positions(&self) -> usize {
        (self.noise * self.k_in as f64 - 1e-9).ceil().max(0.0) as usize
    }

    /// Required pairwise Hamming distance between prototypes.
    pub fn min_distance(&self) -> usize {
        2 * self.noisy_positions() + 1
    }

    pub fn shot_len(&self) -> usize {
        self.k_in + self.k_lab + 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shot {
    pub input: Vec<usize>,
    pub label: Vec<usize>,
    pub class: usize,
}

impl Shot {
    /// `input ++ sep ++ label ++ delim`.
    pub fn render(&self, vocab: &Vocab) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.input);
        v.push(vocab.sep);
        v.extend_from_slice(&self.label);
        v.push(vocab.delim);
        v
    }

    /// `input ++ sep`, the part that precedes a label.
    pub fn render_query(&self, vocab: &Vocab) -> Vec<usize> {
        let mut v = self.input.clone();
        v.push(vocab.sep);
        v
    }

    pub fn len(&self) -> usize {
        self.input.len() + self.label.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationTask {
    pub config: TaskConfig,
    pub prototypes: Vec<Vec<usize>>,
    pub labels: Vec<Vec<usize>>,
}

pub fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

const PROTOTYPE_RETRIES: usize = 10_000;

/// Prototypes are rejection-sampled until every pair is at least
/// `2·⌈noise·k_in⌉ + 1` apart; label names are distinct label-id tuples.
pub fn gen_task(config: &TaskConfig, vocab: &Vocab, rng: &mut Rng) -> Result<ClassificationTask> {
    let unsat = |why: String| Error::Config {
        key: "task".into(),
        message: why,
    };
    if config.classes < 1 || config.k_in == 0 || config.k_lab == 0 || !(0.0..=1.0).contains(&config.noise) {
        return Err(unsat(format!("invalid task shape {config:?}")));
    }
    let min_d = config.min_distance();
    if min_d > config.k_in && config.classes > 1 {
        return Err(unsat(format!("distance {min_d} exceeds input length {}", config.k_in)));
    }
    let label_space = (vocab.n_labels() as f64).powi(config.k_lab as i32);
    if (config.classes as f64) > label_space {
        return Err(unsat("not enough distinct label names".into()));
    }
    let mut prototypes: Vec<Vec<usize>> = Vec::with_capacity(config.classes);
    while prototypes.len() < config.classes {
        let mut found = None;
        for _ in 0..PROTOTYPE_RETRIES {
            let cand: Vec<usize> = (0..config.k_in)
                .map(|_| vocab.features.start + rng.below(vocab.n_features()))
                .collect();
            if prototypes.iter().all(|p| hamming(p, &cand) >= min_d) {
                found = Some(cand);
                break;
            }
        }
        prototypes.push(found.ok_or_else(|| {
            unsat(format!(
                "could not place {} prototypes {min_d} apart within {PROTOTYPE_RETRIES} draws",
                config.classes
            ))
        })?);
    }
    let mut labels: Vec<Vec<usize>> = Vec::with_capacity(config.classes);
    while labels.len() < config.classes {
        let cand: Vec<usize> = (0..config.k_lab)
            .map(|_| vocab.labels.start + rng.below(vocab.n_labels()))
            .collect();
        if !labels.contains(&cand) {
            labels.push(cand);
        }
    }
    Ok(ClassificationTask {
        config: config.clone(),
        prototypes,
        labels,
    })
}

/// A noisy copy of the class prototype with its label name.
pub fn sample_shot(task: &ClassificationTask, class: usize, vocab: &Vocab, rng: &mut Rng) -> Shot {
    let mut input = task.prototypes[class].clone();
    for pos in rng.choose_distinct(task.config.k_in, task.config.noisy_positions()) {
        input[pos] = vocab.features.start + rng.below(vocab.n_features());
    }
    Shot {
        input,
        label: task.labels[class].clone(),
        class,
    }
}

/// Round-robin over classes (order shuffled once), one fresh shot per class
/// per pass, stopping at the first shot that does not fit. Shots whose
/// input equals `avoid` are redrawn. With `random_labels` every shot carries
/// the label name of a uniformly drawn class instead of its own.
pub fn build_prompt_with(
    task: &ClassificationTask,
    vocab: &Vocab,
    budget: usize,
    rng: &mut Rng,
    avoid: Option<&[usize]>,
    random_labels: bool,
) -> Result<(Vec<usize>, Vec<Shot>)> {
    let shot_len = task.config.shot_len();
    if budget < shot_len {
        return Err(Error::Config {
            key: "budget".into(),
            message: format!("budget {budget} below one shot ({shot_len} tokens)"),
        });
    }
    let mut order: Vec<usize> = (0..task.config.classes).collect();
    rng.shuffle(&mut order);
    let mut tokens = Vec::with_capacity(budget);
    let mut shots = Vec::new();
    'fill: loop {
        for &c in &order {
            let mut shot = sample_shot(task, c, vocab, rng);
            if task.config.noisy_positions() > 0 {
                while Some(shot.input.as_slice()) == avoid {
                    shot = sample_shot(task, c, vocab, rng);
                }
            }
            if random_labels {
                shot.label = task.labels[rng.below(task.config.classes)].clone();
            }
            if tokens.len() + shot.len() > budget {
                break 'fill;
            }
            tokens.extend(shot.render(vocab));
            shots.push(shot);
        }
    }
    Ok((tokens, shots))
}

pub fn build_prompt(task: &ClassificationTask, vocab: &Vocab, budget: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<Shot>)> {
    build_prompt_with(task, vocab, budget, rng, None, false)
}

/// One evaluation query and the seed of its own prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub query: Shot,
    pub seed: u64,
}

impl PromptSpec {
    pub fn gold(&self) -> usize {
        self.query.class
    }

    /// The prompt for this query under `budget`, never containing the query.
    pub fn prompt(&self, task: &ClassificationTask, vocab: &Vocab, budget: usize) -> Result<(Vec<usize>, Vec<Shot>)> {
        build_prompt_with(task, vocab, budget, &mut Rng::new(self.seed), Some(&self.query.input), false)
    }

    /// Control prompt whose shot labels carry no information about classes.
    pub fn shuffled_prompt(&self, task: &ClassificationTask, vocab: &Vocab, budget: usize) -> Result<(Vec<usize>, Vec<Shot>)> {
        build_prompt_with(task, vocab, budget, &mut Rng::new(self.seed), Some(&self.query.input), true)
    }
}

/// `n_per_class` fresh queries for every class, class-major.
pub fn make_eval_set(task: &ClassificationTask, vocab: &Vocab, n_per_class: usize, rng: &mut Rng) -> Result<Vec<PromptSpec>> {
    if n_per_class == 0 {
        return Err(Error::Config {
            key: "eval.queries_per_class".into(),
            message: "must be at least 1".into(),
        });
    }
    let mut out = Vec::with_capacity(task.config.classes * n_per_class);
    for c in 0..task.config.classes {
        for i in 0..n_per_class {
            let mut r = rng.split_index(&format!("query.{c}"), i as u64);
            let query = sample_shot(task, c, vocab, &mut r);
            let seed = r.below(usize::MAX) as u64;
            out.push(PromptSpec { query, seed });
        }
    }
    Ok(out)
}
