//! Two-phase training: data splitting, the optimizer loop, freeze-scope
//! bookkeeping, and base-model pretraining on the corpus.

mod optim;
mod split;


use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use optim::{clip_global_norm, lr_at, AdamConfig, OptimizerState};
pub use split::{split_sequence, SplitSpec};

use crate::compressors::{target_forward, PhaseStamp, System, TARGET};
use crate::error::{Error, Result};
use crate::numerics::{finite_diff_probe, Float, Rng, Tape, Tensor, Var};
use crate::tasks::CorpusStream;
use crate::transformer::{Bound, FreezeMask, ForwardOptions, Input, ModelConfig, ParamStore, Stack};

/// Index offset of held-out sequences; training never reaches it.
pub const HELDOUT_BASE: u64 = 1 << 48;

/// Corpus sequences cut into (source, target) pairs, addressable by index.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub corpus: CorpusStream,
    pub split: SplitSpec,
    rng: Rng,
}

pub type Pair = (Vec<usize>, Vec<usize>);

impl TrainData {
    pub fn new(corpus: CorpusStream, split: SplitSpec, seed: u64) -> Result<Self> {
        split.validate()?;
        if corpus.config.total_len != split.total_len {
            return Err(Error::Config {
                key: "split.total_len".into(),
                message: format!(
                    "corpus emits {} tokens per sequence, split expects {}",
                    corpus.config.total_len, split.total_len
                ),
            });
        }
        Ok(TrainData {
            corpus,
            split,
            rng: Rng::new(seed).split("split"),
        })
    }

    pub fn sequence(&self, index: u64) -> Vec<usize> {
        self.corpus.sequence(index)
    }

    pub fn pair(&self, index: u64) -> Pair {
        let seq = self.corpus.sequence(index);
        let (s, t) = split_sequence(&seq, &self.split, &mut self.rng.split_index("cut", index)).expect("validated split");
        (s.to_vec(), t.to_vec())
    }

    pub fn batch_indices(step: u64, batch_size: usize) -> impl Iterator<Item = u64> {
        let b = batch_size as u64;
        (step * b)..(step * b + b)
    }

    pub fn batch(&self, step: u64, batch_size: usize) -> Vec<Pair> {
        Self::batch_indices(step, batch_size).map(|i| self.pair(i)).collect()
    }

    pub fn heldout(&self, i: u64) -> Pair {
        self.pair(HELDOUT_BASE + i)
    }

    /// SHA-256 over the token stream of `steps` batches.
    pub fn stream_hash(&self, steps: u64, batch_size: usize) -> String {
        let mut h = Sha256::new();
        for step in 0..steps {
            for (s, t) in self.batch(step, batch_size) {
                for x in s.iter().chain(&t) {
                    h.update((*x as u32).to_le_bytes());
                }
                h.update([0xff]);
            }
        }
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    /// 0 pretrains the base model; 1 and 2 train a compressor.
    pub phase: u8,
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub clip: Option<f64>,
    /// Patterns replacing the system's default scope for this phase.
    pub scope: Option<Vec<String>>,
    pub adam: AdamConfig,
}

impl PhaseConfig {
    /// Desk-scale defaults: warmup over 5% of the steps, phase 2 at a
    /// hundredth of the phase-1 learning rate.
    pub fn desk(phase: u8, steps: u64) -> Self {
        let peak_lr = match phase {
            2 => 1e-5,
            _ => 1e-3,
        };
        PhaseConfig {
            phase,
            steps,
            batch_size: 4,
            peak_lr,
            warmup_steps: (steps / 20).max(1),
            clip: Some(1.0),
            scope: None,
            adam: AdamConfig::default(),
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        lr_at(step, self.peak_lr, self.warmup_steps)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| {
            Err(Error::Config {
                key: format!("phase{}.{k}", self.phase),
                message: m.into(),
            })
        };
        if self.phase > 2 {
            return bad("phase", "must be 0, 1 or 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr", "must be finite and non-negative");
        }
        if self.adam.weight_decay != 0.0 {
            return bad("weight_decay", "must be 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: u8,
    pub trainable_params: usize,
    pub trainable_tensors: usize,
    pub records: Vec<StepRecord>,
    pub frozen_before: String,
    pub frozen_after: String,
    pub target_before: String,
    pub target_after: String,
}

/// Aborts when the loss stays above `factor` times the running median of
/// the preceding `window` losses for `patience` consecutive steps.
#[derive(Debug, Clone)]
pub struct InstabilityGuard {
    pub factor: f64,
    pub window: usize,
    pub patience: usize,
    history: Vec<f64>,
    streak: usize,
}

impl Default for InstabilityGuard {
    fn default() -> Self {
        InstabilityGuard::new(10.0, 100, 50)
    }
}

impl InstabilityGuard {
    pub fn new(factor: f64, window: usize, patience: usize) -> Self {
        InstabilityGuard {
            factor,
            window,
            patience,
            history: Vec::new(),
            streak: 0,
        }
    }

    pub fn observe(&mut self, step: u64, loss: f64) -> Result<()> {
        let start = self.history.len().saturating_sub(self.window);
        let mut recent = self.history[start..].to_vec();
        if !recent.is_empty() {
            recent.sort_by(f64::total_cmp);
            let median = recent[recent.len() / 2];
            if loss > self.factor * median {
                self.streak += 1;
            } else {
                self.streak = 0;
            }
        }
        self.history.push(loss);
        if self.streak >= self.patience {
            return Err(Error::Unstable {
                step,
                reason: format!(
                    "loss above {}x running median for {} consecutive steps",
                    self.factor, self.patience
                ),
            });
        }
        Ok(())
    }
}

pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub tokens: u64,
}

/// Mean per-item loss and gradients of the trainable set, accumulated over
/// `n_items` separate tapes.
pub fn accumulate<S, F>(params: &ParamStore<S>, trainable: &BTreeSet<String>, n_items: usize, mut item: F) -> Result<(f64, BTreeMap<String, Tensor<S>>, u64)>
where
    S: Float,
    F: for<'t> FnMut(&Bound<'t, S>, usize) -> Result<(Var<'t, S>, usize)>,
{
    let mut grads: BTreeMap<String, Tensor<S>> = BTreeMap::new();
    let mut total = 0.0;
    let mut tokens = 0u64;
    let w = S::from_f64_lossy(1.0 / n_items as f64);
    for i in 0..n_items {
        let tape = Tape::new();
        let bound = Bound::new(&tape, params, trainable);
        let (loss, n) = item(&bound, i)?;
        total += loss.value().item().as_f64();
        tokens += n as u64;
        let mut g = tape.backward(loss)?;
        for (path, var) in bound.iter() {
            if !trainable.contains(path) {
                continue;
            }
            if let Some(gt) = g.take(var) {
                match grads.get_mut(path) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gt.data()) {
                            *a += w * *b;
                        }
                    }
                    None => {
                        let mut gt = gt;
                        for a in gt.data_mut() {
                            *a *= w;
                        }
                        grads.insert(path.to_string(), gt);
                    }
                }
            }
        }
    }
    Ok((total / n_items as f64, grads, tokens))
}

/// Next-token loss of the target over `target` given a compressed `source`.
pub fn system_loss<'t, S: Float>(sys: &System<S>, bound: &Bound<'t, S>, source: &[usize], target: &[usize], pad: usize) -> Result<(Var<'t, S>, usize)> {
    if target.len() < 2 {
        return Err(Error::Invalid("target needs at least two tokens".into()));
    }
    let payload = sys.compress_on(bound, source)?;
    let out = target_forward(&sys.target_stack(bound), &payload, source.len(), &target[..target.len() - 1])?;
    let labels = &target[1..];
    let mask: Vec<bool> = labels.iter().map(|&t| t != pad).collect();
    let n = mask.iter().filter(|&&m| m).count();
    Ok((out.logits.cross_entropy(labels, &mask)?, n))
}

/// Next-token loss of a plain stack over a whole sequence.
pub fn lm_loss<'t, S: Float>(cfg: &ModelConfig, bound: &Bound<'t, S>, prefix: &str, seq: &[usize], pad: usize) -> Result<(Var<'t, S>, usize)> {
    if seq.len() < 2 {
        return Err(Error::Invalid("sequence needs at least two tokens".into()));
    }
    let stack = Stack::new(cfg, bound, prefix);
    let inputs = &seq[..seq.len() - 1];
    let pos: Vec<usize> = (0..inputs.len()).collect();
    let out = stack.forward(Input::Tokens(inputs), &pos, None, ForwardOptions::default())?;
    let labels = &seq[1..];
    let mask: Vec<bool> = labels.iter().map(|&t| t != pad).collect();
    let n = mask.iter().filter(|&&m| m).count();
    Ok((out.logits.expect("requested").cross_entropy(labels, &mask)?, n))
}

/// One optimizer step of a system on a batch of (source, target) pairs.
pub fn train_step<S: Float>(
    sys: &mut System<S>,
    batch: &[Pair],
    trainable: &BTreeSet<String>,
    opt: &mut OptimizerState<S>,
    lr: f64,
    clip: Option<f64>,
    pad: usize,
) -> Result<StepStats> {
    if trainable.is_empty() {
        return Err(Error::EmptyTrainableSet);
    }
    let shell = sys.clone_shell();
    let (loss, mut grads, tokens) = accumulate(&sys.params, trainable, batch.len(), |b, i| {
        system_loss(&shell, b, &batch[i].0, &batch[i].1, pad)
    })?;
    let grad_norm = clip_global_norm(&mut grads, clip);
    opt.update(&mut sys.params, &grads, lr)?;
    Ok(StepStats { loss, grad_norm, tokens })
}

impl<S: Float> System<S> {
    /// The system without its parameter tree.
    pub fn clone_shell(&self) -> System<S> {
        System {
            model: self.model.clone(),
            method: self.method.clone(),
            m: self.m,
            params: ParamStore::new(),
            stamp: self.stamp,
        }
    }
}

fn checksum_outside<S: Float>(params: &ParamStore<S>, trainable: &BTreeSet<String>) -> String {
    hex(&params.checksum(|p| !trainable.contains(p)))
}

fn target_checksum<S: Float>(params: &ParamStore<S>) -> String {
    let pre = format!("{TARGET}.");
    hex(&params.checksum(|p| p.starts_with(&pre)))
}

/// Options controlling a phase run beyond its configuration.
pub struct RunControl<'a> {
    /// Stop after this many total steps (for interruption); defaults to the
    /// configured step count.
    pub stop_at: Option<u64>,
    pub guard: InstabilityGuard,
    pub on_step: Option<&'a mut dyn FnMut(&StepRecord)>,
}

impl Default for RunControl<'_> {
    fn default() -> Self {
        RunControl {
            stop_at: None,
            guard: InstabilityGuard::default(),
            on_step: None,
        }
    }
}

/// Train a compressor system through phase 1 or 2. Pass `resume` to continue
/// from a saved optimizer state (its step counter is the start step).
pub fn run_phase<S: Float>(
    sys: &mut System<S>,
    cfg: &PhaseConfig,
    data: &TrainData,
    resume: Option<OptimizerState<S>>,
    mut control: RunControl<'_>,
) -> Result<(TrainReport, OptimizerState<S>)> {
    cfg.validate()?;
    match (cfg.phase, sys.stamp) {
        (1, PhaseStamp::Fresh | PhaseStamp::Phase1) => sys.stamp = PhaseStamp::Phase1,
        (1, PhaseStamp::Phase2) => return Err(Error::PhaseOrder("phase 1 requested after phase 2".into())),
        (2, PhaseStamp::Fresh) => return Err(Error::PhaseOrder("phase 2 requested before phase 1".into())),
        (2, _) => sys.stamp = PhaseStamp::Phase2,
        (p, _) => {
            return Err(Error::PhaseOrder(format!("phase {p} does not train a compressor")));
        }
    }
    let mask = match &cfg.scope {
        Some(p) => FreezeMask::new(p.clone()),
        None => sys.scope(cfg.phase)?,
    };
    let trainable = mask.resolve(&sys.params)?;
    if trainable.iter().any(|p| p.starts_with(&format!("{TARGET}."))) {
        return Err(Error::Invalid("target parameters are frozen permanently".into()));
    }
    let mut opt = match resume {
        Some(o) => {
            if !o.tracked().eq(trainable.iter().map(String::as_str)) {
                return Err(Error::Invalid("resumed optimizer tracks a different parameter set".into()));
            }
            o
        }
        None => OptimizerState::new(cfg.adam, &sys.params, &trainable)?,
    };
    let frozen_before = checksum_outside(&sys.params, &trainable);
    let target_before = target_checksum(&sys.params);
    let mut records = Vec::new();
    let pad = data.corpus.vocab.pad;
    let stop = control.stop_at.unwrap_or(cfg.steps).min(cfg.steps);
    while opt.step < stop {
        let step = opt.step;
        let lr = cfg.lr(step);
        let batch = data.batch(step, cfg.batch_size);
        let stats = train_step(sys, &batch, &trainable, &mut opt, lr, cfg.clip, pad)?;
        control.guard.observe(step, stats.loss)?;
        let rec = StepRecord {
            step,
            loss: stats.loss,
            lr,
            grad_norm: stats.grad_norm,
            tokens: stats.tokens,
        };
        if let Some(f) = control.on_step.as_mut() {
            f(&rec);
        }
        records.push(rec);
    }
    let frozen_after = checksum_outside(&sys.params, &trainable);
    let target_after = target_checksum(&sys.params);
    if frozen_before != frozen_after || target_before != target_after {
        return Err(Error::Invalid("frozen parameters changed during training".into()));
    }
    let trainable_params = trainable.iter().map(|p| sys.params.get(p).map(Tensor::numel).unwrap_or(0)).sum();
    Ok((
        TrainReport {
            phase: cfg.phase,
            trainable_params,
            trainable_tensors: trainable.len(),
            records,
            frozen_before,
            frozen_after,
            target_before,
            target_after,
        },
        opt,
    ))
}

/// Pretrain a plain (unprefixed) stack on whole corpus sequences.
pub fn pretrain<S: Float>(
    model: &ModelConfig,
    params: &mut ParamStore<S>,
    cfg: &PhaseConfig,
    corpus: &CorpusStream,
    resume: Option<OptimizerState<S>>,
    mut control: RunControl<'_>,
) -> Result<(TrainReport, OptimizerState<S>)> {
    cfg.validate()?;
    let mask = FreezeMask::new(cfg.scope.clone().unwrap_or_else(|| vec!["*".into()]));
    let trainable = mask.resolve(params)?;
    let mut opt = match resume {
        Some(o) => o,
        None => OptimizerState::new(cfg.adam, params, &trainable)?,
    };
    let frozen_before = checksum_outside(params, &trainable);
    let pad = corpus.vocab.pad;
    let stop = control.stop_at.unwrap_or(cfg.steps).min(cfg.steps);
    let mut records = Vec::new();
    while opt.step < stop {
        let step = opt.step;
        let lr = cfg.lr(step);
        let seqs: Vec<Vec<usize>> = TrainData::batch_indices(step, cfg.batch_size).map(|i| corpus.sequence(i)).collect();
        let (loss, mut grads, tokens) = accumulate(params, &trainable, seqs.len(), |b, i| lm_loss(model, b, "", &seqs[i], pad))?;
        let grad_norm = clip_global_norm(&mut grads, cfg.clip);
        opt.update(params, &grads, lr)?;
        control.guard.observe(step, loss)?;
        let rec = StepRecord {
            step,
            loss,
            lr,
            grad_norm,
            tokens,
        };
        if let Some(f) = control.on_step.as_mut() {
            f(&rec);
        }
        records.push(rec);
    }
    let frozen_after = checksum_outside(params, &trainable);
    if frozen_before != frozen_after {
        return Err(Error::Invalid("frozen parameters changed during training".into()));
    }
    Ok((
        TrainReport {
            phase: 0,
            trainable_params: trainable.iter().map(|p| params.get(p).map(Tensor::numel).unwrap_or(0)).sum(),
            trainable_tensors: trainable.len(),
            records,
            frozen_before: frozen_after.clone(),
            frozen_after,
            target_before: String::new(),
            target_after: String::new(),
        },
        opt,
    ))
}

/// Mean held-out target-token NLL over `n` held-out pairs.
pub fn heldout_nll<S: Float>(sys: &System<S>, data: &TrainData, n: u64) -> Result<f64> {
    let pad = data.corpus.vocab.pad;
    let mut total = 0.0;
    for i in 0..n {
        let (s, t) = data.heldout(i);
        let tape = Tape::new();
        let b = Bound::frozen(&tape, &sys.params);
        total += system_loss(sys, &b, &s, &t, pad)?.0.value().item().as_f64();
    }
    Ok(total / n as f64)
}

/// Default finite-difference step for whole-system checks.
pub const GRADCHECK_STEP: f64 = 5e-3;

/// Finite-difference check of the downstream loss against every trainable
/// tensor matched by `patterns`; worst relative error per tensor. With
/// `sample = Some((k, seed))` only `k` random coordinates per tensor are
/// probed.
pub fn gradcheck_system(
    sys: &System<f64>,
    patterns: &[String],
    source: &[usize],
    target: &[usize],
    h: f64,
    sample: Option<(usize, u64)>,
) -> Result<Vec<(String, f64)>> {
    let trainable = FreezeMask::new(patterns.to_vec()).resolve(&sys.params)?;
    let mut out = Vec::new();
    for path in trainable {
        let x0 = sys.params.get(&path)?.clone();
        let coords: Vec<usize> = match sample {
            Some((k, seed)) if k < x0.numel() => {
                let mut rng = Rng::new(seed).split(&path);
                (0..k).map(|_| rng.below(x0.numel())).collect()
            }
            _ => (0..x0.numel()).collect(),
        };
        let mut rest = sys.params.clone();
        rest.remove(&path);
        let probes = finite_diff_probe(
            |tape, x| {
                let mut b = Bound::frozen(tape, &rest);
                b.insert(path.clone(), x);
                Ok(system_loss(sys, &b, source, target, usize::MAX)?.0)
            },
            &x0,
            h,
            &coords,
        )?;
        let worst = probes.iter().map(|p| p.relative_error()).fold(0.0, f64::max);
        out.push((path, worst));
    }
    Ok(out)
}
