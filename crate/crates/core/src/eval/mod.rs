//! Label scoring, accuracy, compression-ratio sweeps and the
//! cross-attention ablation.

mod ablation;
mod sweep;


use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationPlan, AblationRow, AblationTable};
pub use sweep::{run_sweep, Degradation, NamedTask, SweepCell, SweepPlan, SweepResult, CSV_HEADER};

use crate::compressors::{target_forward_with, truncate_baseline, CompressedContext, IcaeCapacity, Method, PhaseStamp, System};
use crate::error::{Error, Result};
use crate::numerics::{Float, Tape, Tensor};
use crate::tasks::{ClassificationTask, PromptSpec, Vocab};
use crate::transformer::{Bound, ForwardOptions, Input, KvPrefix, ModelConfig, ParamStore, SpanReport, Stack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodId {
    BaselineFull,
    BaselineTrunc,
    Icae,
    IcaePlus,
    IcaePp,
    MemcomP1,
    MemcomP2,
}

impl MethodId {
    pub const ALL: [MethodId; 7] = [
        MethodId::BaselineFull,
        MethodId::BaselineTrunc,
        MethodId::Icae,
        MethodId::IcaePlus,
        MethodId::IcaePp,
        MethodId::MemcomP1,
        MethodId::MemcomP2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::BaselineFull => "baseline_full",
            MethodId::BaselineTrunc => "baseline_trunc",
            MethodId::Icae => "icae",
            MethodId::IcaePlus => "icae_plus",
            MethodId::IcaePp => "icae_pp",
            MethodId::MemcomP1 => "memcom_p1",
            MethodId::MemcomP2 => "memcom_p2",
        }
    }

    /// The compressor architecture behind this method, if any.
    pub fn compressor(self) -> Option<Method> {
        match self {
            MethodId::BaselineFull | MethodId::BaselineTrunc => None,
            MethodId::Icae => Some(Method::icae(IcaeCapacity::Icae)),
            MethodId::IcaePlus => Some(Method::icae(IcaeCapacity::IcaePlus)),
            MethodId::IcaePp => Some(Method::icae(IcaeCapacity::IcaePlusPlus)),
            MethodId::MemcomP1 | MethodId::MemcomP2 => Some(Method::memcom()),
        }
    }

    /// Training phase that produces this method's artifact.
    pub fn phase(self) -> Option<u8> {
        match self {
            MethodId::BaselineFull | MethodId::BaselineTrunc => None,
            MethodId::MemcomP2 => Some(2),
            _ => Some(1),
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config {
                key: "method".into(),
                message: format!("unknown method `{s}`"),
            })
    }
}

/// What the target sees before the query.
#[derive(Clone, Copy)]
pub enum Conditioning<'c, S: Float> {
    Raw(&'c [usize]),
    Compressed(&'c CompressedContext<S>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelScores {
    /// Summed label-token log-probability per candidate.
    pub scores: Vec<f64>,
    pub best: usize,
    /// Attention spans of the query tokens.
    pub spans: SpanReport,
}

/// Query processed on top of the conditioning, ready to be continued.
struct Session<'a, 't, S: Float> {
    stack: Stack<'a, 't, S>,
    prefix: KvPrefix<'t, S>,
    next: usize,
    last: Vec<f64>,
    spans: SpanReport,
}

impl<'a, 't, S: Float> Session<'a, 't, S> {
    fn open(cfg: &'a ModelConfig, tape: &'t Tape<S>, bound: &'a Bound<'t, S>, cond: Conditioning<'_, S>, query: &[usize]) -> Result<Self> {
        if query.is_empty() {
            return Err(Error::Invalid("empty query".into()));
        }
        let stack = Stack::new(cfg, bound, "");
        let (logits, prefix, spans) = match cond {
            Conditioning::Raw(prompt) => {
                let tokens: Vec<usize> = prompt.iter().chain(query).copied().collect();
                let pos: Vec<usize> = (0..tokens.len()).collect();
                let out = stack.forward(
                    Input::Tokens(&tokens),
                    &pos,
                    None,
                    ForwardOptions {
                        capture_kv: true,
                        ..Default::default()
                    },
                )?;
                let prefix = KvPrefix {
                    layers: out.kv,
                    positions: pos,
                };
                (out.logits.expect("requested").value(), prefix, out.spans)
            }
            Conditioning::Compressed(ctx) => {
                if ctx.config_hash != cfg.hash() {
                    return Err(Error::ConfigHashMismatch);
                }
                let payload = ctx.on_tape(tape);
                let out = target_forward_with(&stack, &payload, ctx.source_t, query, true)?;
                (out.logits.value(), out.continuation.expect("requested"), out.spans)
            }
        };
        let next = prefix.positions.last().map_or(0, |p| p + 1);
        Ok(Session {
            last: log_softmax(logits.row(logits.rows() - 1)),
            stack,
            prefix,
            next,
            spans,
        })
    }

    /// Log-probabilities after each of `tokens`, `[len, V]`.
    fn extend(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let pos: Vec<usize> = (self.next..self.next + tokens.len()).collect();
        let out = self
            .stack
            .forward(Input::Tokens(tokens), &pos, Some(&self.prefix), ForwardOptions::default())?;
        let logits = out.logits.expect("requested").value();
        Ok((0..logits.rows()).map(|i| log_softmax(logits.row(i))).collect())
    }
}

fn log_softmax<S: Float>(row: &[S]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.as_f64() - lse).collect()
}

/// First index of the maximum; earlier indices win ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Pick the candidate label with the highest teacher-forced log-likelihood
/// after `query`.
pub fn score_labels<S: Float>(
    cfg: &ModelConfig,
    target: &ParamStore<S>,
    cond: Conditioning<'_, S>,
    query: &[usize],
    candidates: &[Vec<usize>],
) -> Result<LabelScores> {
    if candidates.is_empty() || candidates.iter().any(Vec::is_empty) {
        return Err(Error::Invalid("candidate labels must be non-empty".into()));
    }
    let tape = Tape::new();
    let bound = Bound::frozen(&tape, target);
    let session = Session::open(cfg, &tape, &bound, cond, query)?;
    let scores = candidates
        .iter()
        .map(|label| {
            let rows = session.extend(&label[..label.len() - 1])?;
            let mut lp = session.last[label[0]];
            for (row, &tok) in rows.iter().zip(&label[1..]) {
                lp += row[tok];
            }
            Ok(lp)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LabelScores {
        best: argmax(&scores),
        scores,
        spans: session.spans,
    })
}

/// Greedy decoding of `len` tokens; the class whose label matches exactly,
/// if any.
pub fn generate_label<S: Float>(
    cfg: &ModelConfig,
    target: &ParamStore<S>,
    cond: Conditioning<'_, S>,
    query: &[usize],
    labels: &[Vec<usize>],
    len: usize,
) -> Result<(Option<usize>, SpanReport)> {
    let tape = Tape::new();
    let bound = Bound::frozen(&tape, target);
    let session = Session::open(cfg, &tape, &bound, cond, query)?;
    let mut out = vec![argmax(&session.last)];
    while out.len() < len {
        let rows = session.extend(&out)?;
        out.push(argmax(rows.last().expect("non-empty")));
    }
    Ok((labels.iter().position(|l| *l == out), session.spans))
}

/// Trained artifacts an evaluation draws on.
#[derive(Clone, Copy)]
pub struct Artifacts<'a, S: Float> {
    pub model: &'a ModelConfig,
    pub target: &'a ParamStore<S>,
    pub system: Option<&'a System<S>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    pub t: usize,
    pub m: usize,
}

impl Budgets {
    /// `m = t / ratio`, rounded down.
    pub fn from_ratio(t: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || t / ratio == 0 {
            return Err(Error::Config {
                key: "budget.ratio".into(),
                message: format!("ratio {ratio} leaves no memory for t={t}"),
            });
        }
        Ok(Budgets { t, m: t / ratio })
    }

    pub fn ratio(&self) -> f64 {
        self.t as f64 / self.m as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Label-shuffled control prompts.
    pub shuffled_labels: bool,
    /// Greedy generation plus exact match instead of likelihood scoring.
    pub generation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub method: MethodId,
    pub correct: usize,
    pub n_queries: usize,
    pub accuracy: f64,
    pub budgets: Budgets,
    /// Predicted class per query, `None` when generation matched no label.
    pub predictions: Vec<Option<usize>>,
    /// Largest number of context entries any target layer attended to.
    pub max_context: usize,
}

fn check_artifact<'a, S: Float>(method: MethodId, art: &Artifacts<'a, S>, m: usize) -> Result<&'a System<S>> {
    let sys = art
        .system
        .ok_or_else(|| Error::MissingArtifact(format!("{method} needs a trained compressor")))?;
    let want = method.compressor().expect("compressor method");
    // Variants of one architecture (e.g. cross-attention shapes) share a slot.
    if sys.method.name() != want.name() {
        return Err(Error::MissingArtifact(format!(
            "{method} given a {} compressor",
            sys.method.name()
        )));
    }
    if method == MethodId::MemcomP2 && sys.stamp != PhaseStamp::Phase2 {
        return Err(Error::MissingArtifact(format!("{method} needs a phase-2 compressor")));
    }
    if sys.m != m {
        return Err(Error::MissingArtifact(format!("{method} compressor has m={}, budget m={m}", sys.m)));
    }
    if sys.model.hash() != art.model.hash() {
        return Err(Error::ConfigHashMismatch);
    }
    if sys.target_params().checksum(|_| true) != art.target.checksum(|_| true) {
        return Err(Error::MissingArtifact(format!("{method} compressor was built for a different target")));
    }
    Ok(sys)
}

/// Accuracy of `method` on `specs`, verifying the attention budget of every
/// query.
pub fn evaluate<S: Float>(
    method: MethodId,
    art: Artifacts<'_, S>,
    task: &ClassificationTask,
    vocab: &Vocab,
    specs: &[PromptSpec],
    budgets: Budgets,
    opts: EvalOptions,
) -> Result<EvalOutcome> {
    if budgets.m == 0 || budgets.m > budgets.t {
        return Err(Error::Config {
            key: "budget".into(),
            message: format!("need 0 < m ({}) <= t ({})", budgets.m, budgets.t),
        });
    }
    let system = match method.compressor() {
        Some(_) => Some(check_artifact(method, &art, budgets.m)?),
        None => None,
    };
    let mut predictions = Vec::with_capacity(specs.len());
    let mut correct = 0;
    let mut max_context = 0;
    for spec in specs {
        let (prompt, shots) = if opts.shuffled_labels {
            spec.shuffled_prompt(task, vocab, budgets.t)?
        } else {
            spec.prompt(task, vocab, budgets.t)?
        };
        let raw;
        let ctx;
        let (cond, limit) = match (method, system) {
            (MethodId::BaselineFull, _) => (Conditioning::Raw(&prompt), budgets.t),
            (MethodId::BaselineTrunc, _) => {
                raw = truncate_baseline(&shots, vocab, budgets.m)?;
                (Conditioning::Raw(&raw), budgets.m)
            }
            (_, Some(sys)) => {
                ctx = sys.compress(&prompt)?;
                (Conditioning::Compressed(&ctx), budgets.m)
            }
            (_, None) => unreachable!("checked above"),
        };
        let query = spec.query.render_query(vocab);
        let (pred, spans) = if opts.generation {
            generate_label(art.model, art.target, cond, &query, &task.labels, task.config.k_lab)?
        } else {
            let s = score_labels(art.model, art.target, cond, &query, &task.labels)?;
            (Some(s.best), s.spans)
        };
        let context = check_spans(&spans, cond, query.len(), limit)?;
        max_context = max_context.max(context);
        if pred == Some(spec.gold()) {
            correct += 1;
        }
        predictions.push(pred);
    }
    let n = specs.len();
    Ok(EvalOutcome {
        method,
        correct,
        n_queries: n,
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        budgets,
        predictions,
        max_context,
    })
}

/// Context entries per layer; compressed contexts must expose exactly
/// their size and raw prompts at most `limit` tokens.
fn check_spans<S: Float>(spans: &SpanReport, cond: Conditioning<'_, S>, q: usize, limit: usize) -> Result<usize> {
    match cond {
        Conditioning::Compressed(ctx) => {
            let m = ctx.m();
            for (l, layer) in spans.layers.iter().enumerate() {
                let expect: Vec<usize> = (0..q).map(|j| m + j + 1).collect();
                if layer.context != m || layer.attended != expect {
                    return Err(Error::Budget(format!(
                        "layer {l}: context {} attended {:?}, expected {m} and {expect:?}",
                        layer.context, layer.attended
                    )));
                }
            }
            Ok(m)
        }
        Conditioning::Raw(prompt) => {
            if prompt.len() > limit {
                return Err(Error::Budget(format!("raw prompt of {} tokens over budget {limit}", prompt.len())));
            }
            for layer in &spans.layers {
                let own = layer.attended.len();
                if layer.attended.last().copied().unwrap_or(0) != own {
                    return Err(Error::Budget(format!("raw pass attended {:?}", layer.attended)));
                }
            }
            Ok(prompt.len())
        }
    }
}

/// `(1/C) ± k·sqrt(p(1-p)/n)`.
pub fn chance_band(classes: usize, n: usize, sigmas: f64) -> (f64, f64) {
    let p = 1.0 / classes as f64;
    let s = sigmas * (p * (1.0 - p) / n as f64).sqrt();
    (p - s, p + s)
}

/// Summed log-probabilities of one candidate by a fresh forward over the
/// entire sequence; the independent route used to check `score_labels`.
pub fn rerun_candidate_score<S: Float>(
    cfg: &ModelConfig,
    target: &ParamStore<S>,
    cond: Conditioning<'_, S>,
    query: &[usize],
    label: &[usize],
) -> Result<f64> {
    let tail: Vec<usize> = query.iter().chain(&label[..label.len() - 1]).copied().collect();
    let (logits, offset): (Tensor<S>, usize) = match cond {
        Conditioning::Raw(prompt) => {
            let tape = Tape::new();
            let bound = Bound::frozen(&tape, target);
            let tokens: Vec<usize> = prompt.iter().chain(&tail).copied().collect();
            let pos: Vec<usize> = (0..tokens.len()).collect();
            let out = Stack::new(cfg, &bound, "").forward(Input::Tokens(&tokens), &pos, None, ForwardOptions::default())?;
            (out.logits.expect("requested").value(), prompt.len())
        }
        Conditioning::Compressed(ctx) => (crate::compressors::target_attend(cfg, target, ctx, &tail)?.0, 0),
    };
    let first = query.len() - 1;
    Ok(label
        .iter()
        .enumerate()
        .map(|(i, &tok)| log_softmax(logits.row(offset + first + i))[tok])
        .sum())
}
