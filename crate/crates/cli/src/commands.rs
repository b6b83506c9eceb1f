//! Command implementations. Each returns a one-line JSON summary.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use memcom::cacheio::{self, load_checkpoint, load_context, save_checkpoint, save_context, Checkpoint};
use memcom::compressors::{PhaseStamp, System};
use memcom::config::{parse_config, RunConfig};
use memcom::eval::{
    evaluate, run_ablation, run_sweep, score_labels, AblationPlan, Artifacts, Conditioning, SweepCell,
    SweepPlan, SweepResult,
};
use memcom::numerics::Rng;
use memcom::tasks::CorpusStream;
use memcom::training::{
    gradcheck_system, heldout_nll, pretrain, run_phase, OptimizerState, RunControl, TrainData, TrainReport,
};
use memcom::transformer::{init_stack, ModelConfig, ParamStore};
use memcom::Error;

use crate::rundir::{pretty, resolve, RunDir};
use crate::{CliError, Command, RunArgs};

type Out = Result<String, CliError>;

/// Gradient checks fail at or above this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn run(cmd: Command) -> Out {
    match cmd {
        Command::Train {
            run,
            phase,
            resume,
            target,
        } => train(&run, phase, resume.as_deref(), target.as_deref()),
        Command::Compress {
            run,
            checkpoint,
            prompt,
            out,
        } => compress(&run, &checkpoint, &prompt, &out),
        Command::Infer {
            checkpoint,
            cache,
            query,
            labels,
        } => infer(&checkpoint, &cache, &query, &labels),
        Command::Eval { run, target, system } => eval(&run, target.as_deref(), system.as_deref()),
        Command::Sweep { run, target, systems } => sweep(&run, target.as_deref(), &systems),
        Command::Ablate { run, target } => ablate(&run, target.as_deref()),
        Command::Gradcheck { run } => gradcheck(&run),
        Command::InspectCache { path } => inspect(&path),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

/// File, then `--set` overrides, then validation.
pub fn load_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => parse_config(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(args.overrides.iter().map(String::as_str))?;
    cfg.validate()?;
    Ok(cfg)
}

fn open_run(args: &RunArgs, command: &str, cfg: &RunConfig, invocation: Value) -> Result<RunDir, CliError> {
    RunDir::create(resolve(&args.run), args.overwrite, command, &cfg.to_text(), invocation)
}

fn path_str(p: Option<&Path>) -> Value {
    p.map_or(Value::Null, |p| json!(p.display().to_string()))
}

/// Token ids separated by whitespace.
pub fn parse_ids(text: &str, what: &str) -> Result<Vec<usize>, CliError> {
    text.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| CliError::Usage(format!("{what}: `{t}` is not a token id")))
        })
        .collect()
}

fn check_ids(ids: &[usize], model: &ModelConfig, what: &str) -> Result<(), CliError> {
    if let Some(bad) = ids.iter().find(|&&i| i >= model.vocab_size) {
        return Err(CliError::Usage(format!("{what}: token {bad} outside vocabulary of {}", model.vocab_size)));
    }
    Ok(())
}

/// Target stack from a checkpoint, or a seeded random init when none is
/// given. The checkpoint must match the configured model.
fn load_target(path: Option<&Path>, cfg: &RunConfig) -> Result<ParamStore<f32>, CliError> {
    match path {
        Some(p) => {
            let ck: Checkpoint<f32> = load_checkpoint(p)?;
            if ck.meta.model.hash() != cfg.model.hash() {
                return Err(Error::ConfigHashMismatch.into());
            }
            Ok(ck.target())
        }
        None => Ok(init_stack(&cfg.model, &mut Rng::new(cfg.seed).split("target"))),
    }
}

fn load_system(path: &Path) -> Result<System<f32>, CliError> {
    let ck: Checkpoint<f32> = load_checkpoint(path)?;
    Ok(ck.into_system()?.0)
}

fn train_data(cfg: &RunConfig) -> Result<TrainData, CliError> {
    let corpus = CorpusStream::new(cfg.corpus.clone(), cfg.task.clone(), cfg.vocab()?, cfg.seed)?;
    Ok(TrainData::new(corpus, cfg.split(), cfg.seed)?)
}

/// Step boundaries at which checkpoints are written.
fn chunk_ends(start: u64, steps: u64, every: u64) -> Vec<u64> {
    if every == 0 {
        return vec![steps];
    }
    let mut ends: Vec<u64> = (1..).map(|k| k * every).skip_while(|&e| e <= start).take_while(|&e| e < steps).collect();
    ends.push(steps);
    ends
}

fn log_report(run: &mut RunDir, report: &TrainReport) -> Result<(), CliError> {
    for r in &report.records {
        run.record(
            "train-step",
            json!({ "phase": report.phase, "step": r.step, "loss": r.loss, "lr": r.lr, "grad_norm": r.grad_norm, "tokens": r.tokens }),
        )?;
    }
    Ok(())
}

fn merge(into: &mut Option<TrainReport>, part: TrainReport) {
    match into {
        Some(r) => {
            r.records.extend(part.records);
            r.frozen_after = part.frozen_after;
            r.target_after = part.target_after;
        }
        None => *into = Some(part),
    }
}

fn train(args: &RunArgs, phase: u8, resume: Option<&Path>, target: Option<&Path>) -> Out {
    let cfg = load_config(args)?;
    let pc = cfg.phase(phase)?;
    let invocation = json!({ "phase": phase, "resume": path_str(resume), "target": path_str(target) });
    // Refuse before touching the run directory.
    let start = prepare_train(&cfg, phase, resume, target)?;
    let mut run = open_run(args, "train", &cfg, invocation)?;
    let ck_name = if phase == 0 { "target.mcc".to_string() } else { format!("phase{phase}.mcc") };
    let ck_path = run.checkpoint(&ck_name);
    let mut report: Option<TrainReport> = None;
    let summary = match start {
        Start::Stack(mut params, mut opt) => {
            let data = train_data(&cfg)?;
            let from = opt.as_ref().map_or(0, |o| o.step);
            for end in chunk_ends(from, pc.steps, cfg.checkpoint_every) {
                let control = RunControl {
                    stop_at: Some(end),
                    ..Default::default()
                };
                let (part, o) = pretrain(&cfg.model, &mut params, &pc, &data.corpus, opt.take(), control)?;
                log_report(&mut run, &part)?;
                merge(&mut report, part);
                save_checkpoint(&Checkpoint::of_stack(&cfg.model, &params, Some(o.clone())), &ck_path)?;
                opt = Some(o);
            }
            json!({ "phase": 0, "params": params.numel() })
        }
        Start::System(mut sys, mut opt) => {
            let data = train_data(&cfg)?;
            let from = opt.as_ref().map_or(0, |o| o.step);
            for end in chunk_ends(from, pc.steps, cfg.checkpoint_every) {
                let control = RunControl {
                    stop_at: Some(end),
                    ..Default::default()
                };
                let (part, o) = run_phase(&mut sys, &pc, &data, opt.take(), control)?;
                log_report(&mut run, &part)?;
                merge(&mut report, part);
                save_checkpoint(&Checkpoint::of_system(&sys, phase, Some(o.clone())), &ck_path)?;
                opt = Some(o);
            }
            let nll = if cfg.eval.heldout > 0 {
                Some(heldout_nll(&sys, &data, cfg.eval.heldout)?)
            } else {
                None
            };
            json!({
                "phase": phase,
                "method": cfg.method.0.name(),
                "m": sys.m,
                "trainable_params": sys.trainable_count(phase)?,
                "heldout_nll": nll,
            })
        }
    };
    let mut summary = summary;
    if let Some(r) = &report {
        run.write(&format!("phase{phase}.report.json"), pretty(&serde_json::to_value(r).expect("plain data")).as_bytes())?;
        summary["steps"] = json!(r.records.len());
        summary["final_loss"] = json!(r.records.last().map(|x| x.loss));
        summary["frozen_checksum"] = json!(r.frozen_after);
    }
    // Paths in metrics are run-relative so replays compare byte for byte.
    summary["checkpoint"] = json!(format!("checkpoints/{ck_name}"));
    run.record("train-summary", summary.clone())?;
    summary["run_dir"] = json!(run.path.display().to_string());
    Ok(summary.to_string())
}

enum Start {
    Stack(ParamStore<f32>, Option<OptimizerState<f32>>),
    System(System<f32>, Option<OptimizerState<f32>>),
}

/// Starting state for a training command, enforcing phase order.
fn prepare_train(cfg: &RunConfig, phase: u8, resume: Option<&Path>, target: Option<&Path>) -> Result<Start, CliError> {
    let resumed: Option<Checkpoint<f32>> = resume.map(load_checkpoint).transpose()?;
    if let Some(ck) = &resumed {
        if ck.meta.model.hash() != cfg.model.hash() {
            return Err(Error::ConfigHashMismatch.into());
        }
    }
    if phase == 0 {
        return match resumed {
            Some(ck) if ck.meta.method.is_none() => Ok(Start::Stack(ck.params, ck.optimizer)),
            Some(_) => Err(CliError::Usage("phase 0 resumes only from a pretraining checkpoint".into())),
            None => Ok(Start::Stack(load_target(target, cfg)?, None)),
        };
    }
    let budgets = cfg.budgets()?;
    let method = cfg.compressor(cfg.method.0)?.ok_or_else(|| Error::Config {
        key: "method".into(),
        message: format!("{} has nothing to train", cfg.method.0),
    })?;
    let Some(ck) = resumed else {
        if phase == 2 {
            return Err(Error::PhaseOrder("phase 2 needs --resume with a phase-1 checkpoint".into()).into());
        }
        let target = load_target(target, cfg)?;
        let sys = System::new(cfg.model.clone(), method, budgets.m, &target, &mut Rng::new(cfg.seed).split("compressor"))?;
        return Ok(Start::System(sys, None));
    };
    if target.is_some() {
        return Err(CliError::Usage("--target conflicts with --resume; the checkpoint carries its target".into()));
    }
    let ck_phase = ck.meta.phase;
    let (sys, opt) = ck.into_system()?;
    if sys.method.name() != method.name() || sys.m != budgets.m {
        return Err(CliError::Usage(format!(
            "checkpoint holds {} with m={}, config asks for {} with m={}",
            sys.method.name(),
            sys.m,
            method.name(),
            budgets.m
        )));
    }
    match (phase, ck_phase, sys.stamp) {
        (1, 1, PhaseStamp::Phase1) | (2, 2, PhaseStamp::Phase2) => Ok(Start::System(sys, opt)),
        (2, 1, PhaseStamp::Phase1) => Ok(Start::System(sys, None)),
        (p, c, s) => Err(Error::PhaseOrder(format!("phase {p} cannot continue a phase-{c} checkpoint stamped {s:?}")).into()),
    }
}

fn compress(args: &RunArgs, checkpoint: &Path, prompt: &Path, out: &str) -> Out {
    let cfg = load_config(args)?;
    let sys = load_system(checkpoint)?;
    let tokens = parse_ids(&read_text(prompt)?, "prompt")?;
    check_ids(&tokens, &sys.model, "prompt")?;
    let ctx = sys.compress(&tokens)?;
    let invocation = json!({ "checkpoint": checkpoint.display().to_string(), "prompt": prompt.display().to_string(), "out": out });
    let mut run = open_run(args, "compress", &cfg, invocation)?;
    let path = run.cache(out);
    save_context(&ctx, &path)?;
    let header = cacheio::inspect_context(&fs::read(&path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?)?;
    let mut summary = json!({
        "cache": format!("caches/{out}"),
        "method": sys.method.name(),
        "t": tokens.len(),
        "m": ctx.m(),
        "ratio": ctx.ratio(),
        "size_ratio_vs_full_kv": cacheio::cache_size_ratio(&ctx, &sys.model, tokens.len())?,
        "header": header,
    });
    run.record("compress", summary.clone())?;
    summary["run_dir"] = json!(run.path.display().to_string());
    Ok(summary.to_string())
}

/// Candidate labels, one per non-empty line.
pub fn parse_labels(text: &str) -> Result<Vec<Vec<usize>>, CliError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_ids(l, "labels"))
        .collect()
}

fn infer(checkpoint: &Path, cache: &Path, query: &Path, labels: &Path) -> Out {
    let ck: Checkpoint<f32> = load_checkpoint(checkpoint)?;
    let target = ck.target();
    let model = ck.meta.model;
    let ctx = load_context::<f32>(cache)?;
    let query = parse_ids(&read_text(query)?, "query")?;
    let labels = parse_labels(&read_text(labels)?)?;
    check_ids(&query, &model, "query")?;
    for l in &labels {
        check_ids(l, &model, "labels")?;
    }
    let s = score_labels(&model, &target, Conditioning::Compressed(&ctx), &query, &labels)?;
    let spans: Vec<usize> = s.spans.layers.iter().map(|l| l.context).collect();
    Ok(json!({ "predicted": s.best, "scores": s.scores, "context_per_layer": spans, "m": ctx.m() }).to_string())
}

fn cell_of(out: &memcom::eval::EvalOutcome, task: &str, seed: u64) -> SweepCell {
    SweepCell {
        method: out.method,
        ratio: out.budgets.ratio(),
        task: task.to_string(),
        seed,
        t: out.budgets.t,
        m: out.budgets.m,
        accuracy: Some(out.accuracy),
        correct: out.correct,
        n_queries: out.n_queries,
        absent: None,
    }
}

fn eval(args: &RunArgs, target: Option<&Path>, system: Option<&Path>) -> Out {
    let cfg = load_config(args)?;
    let method = cfg.method.0;
    let target_params = load_target(target, &cfg)?;
    let sys = system.map(load_system).transpose()?;
    let vocab = cfg.vocab()?;
    let named = cfg.named_task();
    let task = named.build(&vocab)?;
    let specs = named.eval_set(&task, &vocab, cfg.eval.queries_per_class, cfg.seed)?;
    let art = Artifacts {
        model: &cfg.model,
        target: &target_params,
        system: sys.as_ref(),
    };
    let out = evaluate(method, art, &task, &vocab, &specs, cfg.budgets()?, cfg.eval_options())?;
    let invocation = json!({ "target": path_str(target), "system": path_str(system) });
    let mut run = open_run(args, "eval", &cfg, invocation)?;
    let result = SweepResult {
        cells: vec![cell_of(&out, &named.name, cfg.seed)],
        metadata: Default::default(),
    };
    run.write("results.csv", result.to_csv().as_bytes())?;
    run.write("eval.json", pretty(&serde_json::to_value(&out).expect("plain data")).as_bytes())?;
    let summary = json!({
        "method": method.name(),
        "task": named.name,
        "seed": cfg.seed,
        "t": out.budgets.t,
        "m": out.budgets.m,
        "ratio": out.budgets.ratio(),
        "accuracy": out.accuracy,
        "correct": out.correct,
        "n_queries": out.n_queries,
        "max_context": out.max_context,
    });
    run.record("eval-cell", summary.clone())?;
    Ok(summary.to_string())
}

fn sweep(args: &RunArgs, target: Option<&Path>, systems: &[PathBuf]) -> Out {
    let cfg = load_config(args)?;
    let target_params = load_target(target, &cfg)?;
    let pool = systems.iter().map(|p| load_system(p)).collect::<Result<Vec<_>, _>>()?;
    let invocation = json!({
        "target": path_str(target),
        "systems": systems.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    let mut run = open_run(args, "sweep", &cfg, invocation)?;
    let plan = SweepPlan {
        methods: cfg.sweep_methods(),
        ratios: cfg.sweep.ratios.clone(),
        t: cfg.budget_t,
        tasks: vec![cfg.named_task()],
        seeds: cfg.sweep.seeds.clone(),
        queries_per_class: cfg.eval.queries_per_class,
        options: cfg.eval_options(),
    };
    let result = run_sweep(&plan, &cfg.vocab()?, &cfg.model, &target_params, |method, budgets, _seed| {
        let want = method.compressor().expect("compressor method").name();
        let stamp = match method.phase() {
            Some(2) => PhaseStamp::Phase2,
            _ => PhaseStamp::Phase1,
        };
        Ok(pool
            .iter()
            .find(|s| s.method.name() == want && s.m == budgets.m && s.stamp == stamp)
            .cloned())
    })?;
    for c in &result.cells {
        run.record("eval-cell", serde_json::to_value(c).expect("plain data"))?;
    }
    run.write("results.csv", result.to_csv().as_bytes())?;
    run.write("results.ndjson", result.to_ndjson().as_bytes())?;
    run.write("plot.json", pretty(&result.plot_data()).as_bytes())?;
    let degradation = serde_json::to_value(result.degradation()).expect("plain data");
    run.write("degradation.json", pretty(&degradation).as_bytes())?;
    let absent = result.cells.iter().filter(|c| c.accuracy.is_none()).count();
    let summary = json!({ "cells": result.cells.len(), "absent": absent, "degradation": degradation });
    run.record("sweep-summary", summary.clone())?;
    Ok(json!({ "cells": result.cells.len(), "absent": absent, "run_dir": run.path.display().to_string() }).to_string())
}

fn ablate(args: &RunArgs, target: Option<&Path>) -> Out {
    let cfg = load_config(args)?;
    let target_params = load_target(target, &cfg)?;
    let mut run = open_run(args, "ablate", &cfg, json!({ "target": path_str(target) }))?;
    let plan = AblationPlan {
        variants: cfg.ablate_variants().into_iter().map(|v| (v, cfg.seed)).collect(),
        t: cfg.budget_t,
        ratio: cfg.ablate.ratio,
        phase1: cfg.phase(1)?,
        tasks: vec![cfg.named_task()],
        eval_seed: cfg.seed,
        queries_per_class: cfg.eval.queries_per_class,
    };
    let table = run_ablation(&plan, &cfg.model, &target_params, &train_data(&cfg)?, &cfg.vocab()?)?;
    for row in &table.rows {
        run.record("ablation-row", serde_json::to_value(row).expect("plain data"))?;
    }
    run.write("ablation.md", table.to_markdown().as_bytes())?;
    run.write("ablation.json", pretty(&serde_json::to_value(&table).expect("plain data")).as_bytes())?;
    Ok(json!({ "variants": table.rows.len(), "run_dir": run.path.display().to_string() }).to_string())
}

/// Fresh f64 system for the configured method, with seeded source and
/// target token sequences.
pub fn gradcheck_setup(cfg: &RunConfig) -> Result<(System<f64>, Vec<usize>, Vec<usize>), CliError> {
    let g = &cfg.gradcheck;
    let method = cfg.compressor(cfg.method.0)?.ok_or_else(|| Error::Config {
        key: "method".into(),
        message: format!("{} has no gradients to check", cfg.method.0),
    })?;
    let rng = Rng::new(cfg.seed);
    let target = init_stack::<f64>(&cfg.model, &mut rng.split("target"));
    let sys = System::new(cfg.model.clone(), method, g.m, &target, &mut rng.split("compressor"))?;
    let mut tok = rng.split("gradcheck.tokens");
    let v = cfg.model.vocab_size;
    let source = (0..g.source_len).map(|_| tok.below(v)).collect();
    let tgt = (0..g.target_len).map(|_| tok.below(v)).collect();
    Ok((sys, source, tgt))
}

fn gradcheck(args: &RunArgs) -> Out {
    let cfg = load_config(args)?;
    let (sys, source, target) = gradcheck_setup(&cfg)?;
    let mut run = open_run(args, "gradcheck", &cfg, json!({}))?;
    // Union of both phases' scopes covers every trainable tensor.
    let mut patterns: Vec<String> = Vec::new();
    for phase in [1, 2] {
        for p in sys.scope(phase)?.patterns() {
            if !patterns.contains(p) {
                patterns.push(p.clone());
            }
        }
    }
    let g = &cfg.gradcheck;
    let sample = (g.samples > 0).then_some((g.samples, cfg.seed));
    let errs = gradcheck_system(&sys, &patterns, &source, &target, g.step, sample)?;
    for (path, e) in &errs {
        run.record("gradcheck", json!({ "param": path, "relative_error": e }))?;
    }
    let worst = errs.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let failing: Vec<&str> = errs
        .iter()
        .filter(|(_, e)| !(*e < GRADCHECK_TOLERANCE))
        .map(|(p, _)| p.as_str())
        .collect();
    let report = json!({
        "method": cfg.method.0.name(),
        "tensors": errs.len(),
        "worst": worst,
        "tolerance": GRADCHECK_TOLERANCE,
        "failing": failing,
        "errors": errs.iter().map(|(p, e)| json!({ "param": p, "relative_error": e })).collect::<Vec<_>>(),
    });
    run.write("gradcheck.json", pretty(&report).as_bytes())?;
    if !failing.is_empty() {
        return Err(CliError::Gradcheck(format!("{} tensors at or above {GRADCHECK_TOLERANCE}: {}", failing.len(), failing.join(", "))));
    }
    Ok(json!({ "tensors": errs.len(), "worst": worst }).to_string())
}

fn inspect(path: &Path) -> Out {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let header = cacheio::inspect_context(&bytes)?;
    Ok(serde_json::to_string(&header).expect("plain data"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_the_remaining_steps() {
        assert_eq!(chunk_ends(0, 10, 0), vec![10]);
        assert_eq!(chunk_ends(0, 10, 4), vec![4, 8, 10]);
        assert_eq!(chunk_ends(4, 10, 4), vec![8, 10]);
        assert_eq!(chunk_ends(0, 8, 4), vec![4, 8]);
    }

    #[test]
    fn id_and_label_files() {
        assert_eq!(parse_ids(" 1 2\n3 ", "q").unwrap(), vec![1, 2, 3]);
        assert!(parse_ids("1 x", "q").is_err());
        assert_eq!(parse_labels("4 5\n\n6 7\n").unwrap(), vec![vec![4, 5], vec![6, 7]]);
    }
}
