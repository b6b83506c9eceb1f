//! Acceptance criteria 1-12, one PASS/FAIL line each.
//!
//! Criteria 6-9 train desk-scale models for hours and only run when
//! `MEMCOM_ACCEPTANCE_HEAVY` lists them (`6,8,9` or `all`); otherwise they
//! print SKIP. Their trained artifacts are cached under the cargo target
//! tmpdir so interrupted runs resume.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use memcom::cacheio::{
    cache_size_ratio, decode_checkpoint, decode_context, encode_checkpoint, encode_context, load_checkpoint,
    load_context, save_checkpoint, save_context, Checkpoint,
};
use memcom::compressors::{IcaeCapacity, Method, System};
use memcom::eval::{
    evaluate, run_sweep, score_labels, Artifacts, Budgets, Conditioning, EvalOptions, MethodId, NamedTask, SweepPlan,
};
use memcom::numerics::{Float, Rng, Tape, Tensor};
use memcom::tasks::{CorpusConfig, CorpusStream, TaskConfig, Vocab};
use memcom::training::{
    gradcheck_system, heldout_nll, pretrain, run_phase, PhaseConfig, RunControl, SplitSpec, TrainData, GRADCHECK_STEP,
};
use memcom::transformer::{init_stack, Bound, ForwardOptions, Input, KvPrefix, ModelConfig, ParamStore, Stack};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- fixtures

fn tiny_vocab() -> Vocab {
    Vocab::new(64, 16, 16).unwrap()
}

fn tiny_task(classes: usize) -> TaskConfig {
    TaskConfig {
        classes,
        k_in: 4,
        k_lab: 1,
        noise: 0.25,
    }
}

fn tiny_data(seed: u64) -> TrainData {
    let corpus = CorpusConfig {
        total_len: 48,
        episode_classes: (2, 4),
        ..Default::default()
    };
    let split = SplitSpec {
        total_len: 48,
        source_lo: 24,
        source_hi: 32,
    };
    TrainData::new(CorpusStream::new(corpus, tiny_task(4), tiny_vocab(), seed).unwrap(), split, seed).unwrap()
}

fn small_phase(phase: u8, steps: u64) -> PhaseConfig {
    PhaseConfig {
        batch_size: 2,
        ..PhaseConfig::desk(phase, steps)
    }
}

/// SHA-256 over (path, little-endian bytes) of the selected tensors,
/// computed here rather than through the library's checksum.
fn digest<S: Float>(params: &ParamStore<S>, keep: impl Fn(&str) -> bool) -> String {
    let mut h = Sha256::new();
    let mut n = 0;
    for (path, t) in params.iter().filter(|(p, _)| keep(p)) {
        h.update(path.as_bytes());
        h.update([0]);
        h.update(t.to_le_bytes());
        n += 1;
    }
    assert!(n > 0, "digest over no tensors");
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn bits<S: Float>(t: &Tensor<S>) -> Vec<u64> {
    t.data().iter().map(|x| x.as_f64().to_bits()).collect()
}

// ---------------------------------------------------------------- 1

fn gradient_soundness() -> Outcome {
    let cfg = ModelConfig::tiny();
    ensure(cfg.d_model == 32 && cfg.n_layers == 2, "tiny config drifted from d=32, L=2")?;
    let target = init_stack::<f64>(&cfg, &mut Rng::new(11));
    let mut tok = Rng::new(12);
    let source: Vec<usize> = (0..16).map(|_| tok.below(cfg.vocab_size)).collect();
    let continuation: Vec<usize> = (0..8).map(|_| tok.below(cfg.vocab_size)).collect();
    let mut worst: (String, f64) = (String::new(), 0.0);
    let mut tensors = 0;
    let mut classes = BTreeSet::new();
    for method in [Method::memcom(), Method::icae(IcaeCapacity::IcaePlus), Method::icae(IcaeCapacity::IcaePlusPlus)] {
        let sys = System::new(cfg.clone(), method, 4, &target, &mut Rng::new(13)).map_err(e)?;
        let mut patterns: Vec<String> = Vec::new();
        for phase in [1, 2] {
            for p in sys.scope(phase).map_err(e)?.patterns() {
                if !patterns.contains(p) {
                    patterns.push(p.clone());
                }
            }
        }
        // Up to 256 coordinates per tensor; smaller tensors are covered fully.
        let errs = gradcheck_system(&sys, &patterns, &source, &continuation, GRADCHECK_STEP, Some((256, 14))).map_err(e)?;
        for (path, err) in errs {
            let class = path
                .split('.')
                .filter(|s| s.parse::<usize>().is_err())
                .collect::<Vec<_>>()
                .join(".");
            classes.insert(format!("{}:{class}", sys.method.name()));
            tensors += 1;
            if err >= worst.1 {
                worst = (format!("{}:{path}", sys.method.name()), err);
            }
        }
    }
    for needed in ["xattn.wq", "xattn.wk", "xattn.wv", "xattn.wo", "memory_tokens", "source.layer", "memory.layer", "lora_a", "lora_b"] {
        ensure(classes.iter().any(|c| c.contains(needed)), format!("no tensor of class {needed} checked"))?;
    }
    let detail = format!("{tensors} tensors in {} classes, worst {:.2e} at {}", classes.len(), worst.1, worst.0);
    ensure(worst.1 < 1e-4, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 2

fn freeze_soundness() -> Outcome {
    let cfg = ModelConfig::tiny();
    let target = init_stack::<f32>(&cfg, &mut Rng::new(21));
    let data = tiny_data(22);
    let mut sys = System::new(cfg, Method::memcom(), 4, &target, &mut Rng::new(23)).map_err(e)?;
    let is_target = |p: &str| p.starts_with("target.");
    let is_base = |p: &str| (p.starts_with("source.") || p.starts_with("memory.")) && !p.contains(".xattn.");
    let is_xattn = |p: &str| p.contains(".xattn.") || p == "memory_tokens";
    let (t0, b0, x0) = (digest(&sys.params, is_target), digest(&sys.params, is_base), digest(&sys.params, is_xattn));
    run_phase(&mut sys, &small_phase(1, 100), &data, None, RunControl::default()).map_err(e)?;
    let (t1, b1, x1) = (digest(&sys.params, is_target), digest(&sys.params, is_base), digest(&sys.params, is_xattn));
    ensure(t0 == t1, "target changed in phase 1")?;
    ensure(b0 == b1, "source/memory base stacks changed in phase 1")?;
    ensure(x0 != x1, "phase 1 did not train the cross-attention")?;
    run_phase(&mut sys, &small_phase(2, 100), &data, None, RunControl::default()).map_err(e)?;
    let (t2, b2) = (digest(&sys.params, is_target), digest(&sys.params, is_base));
    ensure(t0 == t2, "target changed in phase 2")?;
    ensure(b1 != b2, "phase 2 did not train the base stacks")?;
    Ok(format!("target sha256 {}.. unchanged over 100+100 steps", &t0[..16]))
}

// ---------------------------------------------------------------- 3

fn prefix_equivalence() -> Outcome {
    let mut rng = Rng::new(31);
    for case in 0..50 {
        let kv_heads = [1, 2, 4][rng.below(3)];
        let cfg = ModelConfig {
            n_layers: 1 + rng.below(3),
            n_kv_heads: kv_heads,
            ..ModelConfig::tiny()
        };
        let params = init_stack::<f64>(&cfg, &mut rng.split(&format!("case{case}")));
        let ns = 1 + rng.below(16);
        let nt = 1 + rng.below(16);
        let all: Vec<usize> = (0..ns + nt).map(|_| rng.below(cfg.vocab_size)).collect();
        let tape = Tape::new();
        let bound = Bound::frozen(&tape, &params);
        let stack = Stack::new(&cfg, &bound, "");
        let pos: Vec<usize> = (0..ns + nt).collect();
        let full = stack
            .forward(Input::Tokens(&all), &pos, None, ForwardOptions::default())
            .map_err(e)?
            .logits
            .expect("logits")
            .value();
        let first = stack
            .forward(
                Input::Tokens(&all[..ns]),
                &pos[..ns],
                None,
                ForwardOptions {
                    capture_kv: true,
                    logits: false,
                    ..Default::default()
                },
            )
            .map_err(e)?;
        let prefix = KvPrefix {
            layers: first.kv,
            positions: pos[..ns].to_vec(),
        };
        let tail = stack
            .forward(Input::Tokens(&all[ns..]), &pos[ns..], Some(&prefix), ForwardOptions::default())
            .map_err(e)?
            .logits
            .expect("logits")
            .value();
        for r in 0..nt {
            let a: Vec<u64> = full.row(ns + r).iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = tail.row(r).iter().map(|x| x.to_bits()).collect();
            ensure(a == b, format!("case {case}: row {r} differs (L={}, kv={kv_heads}, s={ns}, t={nt})", cfg.n_layers))?;
        }
    }
    Ok("50 cases bitwise equal in f64".into())
}

// ---------------------------------------------------------------- 4

fn span_invariant() -> Outcome {
    let cfg = ModelConfig::tiny();
    let vocab = tiny_vocab();
    let target = init_stack::<f32>(&cfg, &mut Rng::new(41));
    let named = NamedTask {
        name: "spans".into(),
        config: tiny_task(4),
        seed: 42,
    };
    let task = named.build(&vocab).map_err(e)?;
    let specs = named.eval_set(&task, &vocab, 2, 43).map_err(e)?;
    let t = 96;
    let mut checked = 0;
    for ratio in [3, 6, 8] {
        let budgets = Budgets::from_ratio(t, ratio).map_err(e)?;
        for method in [MethodId::MemcomP1, MethodId::IcaePp] {
            let sys = System::new(cfg.clone(), method.compressor().unwrap(), budgets.m, &target, &mut Rng::new(44)).map_err(e)?;
            let art = Artifacts {
                model: &cfg,
                target: &target,
                system: Some(&sys),
            };
            let out = evaluate(method, art, &task, &vocab, &specs, budgets, EvalOptions::default()).map_err(e)?;
            ensure(out.max_context == budgets.m, format!("{method} at {ratio}x: context {}", out.max_context))?;
            // Independent look at the raw counters of one query.
            let (prompt, _) = specs[0].prompt(&task, &vocab, t).map_err(e)?;
            let ctx = sys.compress(&prompt).map_err(e)?;
            let query = specs[0].query.render_query(&vocab);
            let s = score_labels(&cfg, &target, Conditioning::Compressed(&ctx), &query, &task.labels).map_err(e)?;
            ensure(s.spans.layers.len() == cfg.n_layers, "missing layer counters")?;
            for layer in &s.spans.layers {
                let want: Vec<usize> = (1..=query.len()).map(|j| budgets.m + j).collect();
                ensure(
                    layer.context == budgets.m && layer.attended == want,
                    format!("{method} at {ratio}x: {layer:?}"),
                )?;
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} (method, m) pairs report exactly m per layer for m in {{32, 16, 12}}"))
}

// ---------------------------------------------------------------- 5

fn lora_ladder() -> Outcome {
    let cfg = ModelConfig::default();
    let (l, d, r, m) = (cfg.n_layers, cfg.d_model, 8, 48);
    let target = init_stack::<f32>(&cfg, &mut Rng::new(51));
    let count = |cap| {
        System::new(cfg.clone(), Method::icae(cap), m, &target, &mut Rng::new(52))
            .and_then(|s| s.trainable_count(1))
            .map_err(e)
    };
    let got = [count(IcaeCapacity::Icae)?, count(IcaeCapacity::IcaePlus)?, count(IcaeCapacity::IcaePlusPlus)?];
    let want = [2 * l * 2 * d * r + m * d, 4 * l * 2 * d * r + m * d, l * 4 * d * d + m * d];
    ensure(got == want, format!("counts {got:?}, closed form {want:?}"))?;
    ensure(got[0] < got[1] && got[1] < got[2], format!("not increasing: {got:?}"))?;
    Ok(format!("ICAE {} < ICAE+ {} < ICAE++ {}", got[0], got[1], got[2]))
}

// ---------------------------------------------------------------- 10

fn chance_floor() -> Outcome {
    let cfg = ModelConfig::tiny();
    let vocab = tiny_vocab();
    let classes = 8;
    // A briefly pretrained target so the shuffled control is not trivially random.
    let mut target = init_stack::<f32>(&cfg, &mut Rng::new(101));
    let corpus = CorpusStream::new(
        CorpusConfig {
            total_len: 96,
            episode_classes: (2, 8),
            ..Default::default()
        },
        tiny_task(classes),
        vocab.clone(),
        102,
    )
    .map_err(e)?;
    pretrain(&cfg, &mut target, &small_phase(0, 200), &corpus, None, RunControl::default()).map_err(e)?;
    let named = NamedTask {
        name: "chance".into(),
        config: tiny_task(classes),
        seed: 103,
    };
    let task = named.build(&vocab).map_err(e)?;
    let specs = named.eval_set(&task, &vocab, 25, 104).map_err(e)?;
    let n = specs.len();
    let budgets = Budgets::from_ratio(96, 8).map_err(e)?;
    let p = 1.0 / classes as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let (lo, hi) = (p - 3.0 * sigma, p + 3.0 * sigma);
    let mut notes = Vec::new();
    let mut check = |label: &str, acc: f64| {
        notes.push(format!("{label} {acc:.3}"));
        ensure((lo..=hi).contains(&acc), format!("{label} accuracy {acc:.3} outside [{lo:.3}, {hi:.3}]"))
    };
    for method in [MethodId::MemcomP1, MethodId::Icae, MethodId::IcaePlus, MethodId::IcaePp] {
        let sys = System::new(cfg.clone(), method.compressor().unwrap(), budgets.m, &target, &mut Rng::new(105)).map_err(e)?;
        let art = Artifacts {
            model: &cfg,
            target: &target,
            system: Some(&sys),
        };
        let out = evaluate(method, art, &task, &vocab, &specs, budgets, EvalOptions::default()).map_err(e)?;
        check(method.name(), out.accuracy)?;
    }
    let art = Artifacts {
        model: &cfg,
        target: &target,
        system: None,
    };
    let shuffled = EvalOptions {
        shuffled_labels: true,
        ..Default::default()
    };
    for method in [MethodId::BaselineFull, MethodId::BaselineTrunc] {
        let out = evaluate(method, art, &task, &vocab, &specs, budgets, shuffled).map_err(e)?;
        check(&format!("{}(shuffled)", method.name()), out.accuracy)?;
    }
    Ok(format!("n={n}, band [{lo:.3}, {hi:.3}]: {}", notes.join(", ")))
}

// ---------------------------------------------------------------- 11

fn serialization() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let cfg = ModelConfig {
        n_kv_heads: 2,
        ..ModelConfig::tiny()
    };
    let target = init_stack::<f32>(&cfg, &mut Rng::new(111));
    let data = tiny_data(112);
    let source: Vec<usize> = (0..40).map(|i| 3 + i % 50).collect();
    let mut sizes = Vec::new();
    for method in [Method::memcom(), Method::icae(IcaeCapacity::IcaePlus)] {
        let sys = System::new(cfg.clone(), method, 5, &target, &mut Rng::new(113)).map_err(e)?;
        let ctx = sys.compress(&source).map_err(e)?;
        let path = dir.path().join(format!("{}.mcc", sys.method.name()));
        save_context(&ctx, &path).map_err(e)?;
        let back = load_context::<f32>(&path).map_err(e)?;
        ensure(back.bitwise_eq(&ctx), "context round-trip not bitwise")?;
        ensure(encode_context(&back).map_err(e)? == fs::read(&path).map_err(e)?, "context re-encode differs")?;
        let full_bytes = 4.0 * (2 * cfg.n_layers * source.len() * cfg.n_kv_heads * cfg.head_dim) as f64;
        let predicted = cache_size_ratio(&ctx, &cfg, source.len()).map_err(e)? * full_bytes;
        let measured = fs::metadata(&path).map_err(e)?.len() as f64;
        ensure((measured - predicted).abs() <= 64.0, format!("file {measured} vs formula {predicted}"))?;
        sizes.push(format!("{} {measured}B vs {predicted}B", sys.method.name()));

        let ck = Checkpoint::of_system(&sys, 1, None);
        let bytes = encode_checkpoint(&ck).map_err(e)?;
        let back: Checkpoint<f32> = decode_checkpoint(&bytes).map_err(e)?;
        ensure(back.params.bitwise_eq(&ck.params) && encode_checkpoint(&back).map_err(e)? == bytes, "checkpoint round-trip")?;
        let _ = decode_context::<f32>(&encode_context(&ctx).map_err(e)?).map_err(e)?;
    }

    let fresh = || System::new(cfg.clone(), Method::memcom(), 4, &target, &mut Rng::new(114));
    let mut straight = fresh().map_err(e)?;
    let (whole, _) = run_phase(&mut straight, &small_phase(1, 10), &data, None, RunControl::default()).map_err(e)?;
    let mut first = fresh().map_err(e)?;
    let stop = RunControl {
        stop_at: Some(5),
        ..Default::default()
    };
    let (head, opt) = run_phase(&mut first, &small_phase(1, 10), &data, None, stop).map_err(e)?;
    let path = dir.path().join("resume.mcc");
    save_checkpoint(&Checkpoint::of_system(&first, 1, Some(opt)), &path).map_err(e)?;
    let (mut resumed, opt) = load_checkpoint::<f32>(&path).map_err(e)?.into_system().map_err(e)?;
    let (tail, _) = run_phase(&mut resumed, &small_phase(1, 10), &data, opt, RunControl::default()).map_err(e)?;
    let joined: Vec<_> = head.records.into_iter().chain(tail.records).collect();
    ensure(joined == whole.records, "interrupted loss curve differs")?;
    ensure(resumed.params.bitwise_eq(&straight.params), "interrupted parameters differ")?;
    for (p, t) in straight.params.iter() {
        ensure(bits(t) == bits(resumed.params.get(p).map_err(e)?), format!("{p} differs"))?;
    }
    Ok(format!("round-trips bitwise, 5+5 == 10 steps, sizes {}", sizes.join("; ")))
}

// ---------------------------------------------------------------- 12

const TINY_CONFIG: &str = "\
model.n_layers = 2
model.d_model = 32
model.n_heads = 4
model.head_dim = 8
model.n_kv_heads = 4
model.ffn_dim = 64
model.vocab_size = 64
model.max_seq = 256
task.classes = 4
task.k_in = 4
task.k_lab = 1
budget.t = 48
budget.ratio = 4
corpus.total_len = 48
corpus.episode_classes = 2,4
split.source_lo = 24
split.source_hi = 32
phase0.steps = 4
phase0.batch_size = 2
phase1.steps = 4
phase1.batch_size = 2
phase2.steps = 3
phase2.batch_size = 2
train.checkpoint_every = 2
eval.queries_per_class = 2
eval.heldout = 2
sweep.ratios = 3,4
sweep.seeds = 1,2
ablate.ratio = 4
gradcheck.samples = 2
";

/// Metrics text with the value of every `"ts"` field removed.
fn strip_timestamps(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find("\"ts\":") {
        out.push_str(&rest[..i + 5]);
        rest = &rest[i + 5..];
        let end = rest.find([',', '}']).unwrap_or(rest.len());
        rest = &rest[end..];
    }
    out.push_str(rest);
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY_CONFIG).map_err(e)?;
    let prompt = dir.path().join("prompt.txt");
    fs::write(&prompt, (0..48).map(|i| (3 + i % 50).to_string()).collect::<Vec<_>>().join(" ")).map_err(e)?;
    let p = |s: &Path| s.display().to_string();
    let run_dir = |name: &str, copy: usize| dir.path().join(format!("{name}.{copy}"));
    // Inputs of later commands always come from copy 0.
    let ck = |name: &str, file: &str| p(&run_dir(name, 0).join("checkpoints").join(file));
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("pretrain", vec!["train".into(), "--phase".into(), "0".into()]),
        ("phase1", vec!["train".into(), "--phase".into(), "1".into(), "--target".into(), ck("pretrain", "target.mcc")]),
        ("phase2", vec!["train".into(), "--phase".into(), "2".into(), "--resume".into(), ck("phase1", "phase1.mcc")]),
        ("compress", vec!["compress".into(), "--checkpoint".into(), ck("phase1", "phase1.mcc"), "--prompt".into(), p(&prompt)]),
        ("eval", vec!["eval".into(), "--target".into(), ck("pretrain", "target.mcc"), "--system".into(), ck("phase1", "phase1.mcc")]),
        (
            "sweep",
            vec![
                "sweep".into(),
                "--target".into(),
                ck("pretrain", "target.mcc"),
                "--system".into(),
                ck("phase1", "phase1.mcc"),
                "--system".into(),
                ck("phase2", "phase2.mcc"),
            ],
        ),
        ("ablate", vec!["ablate".into(), "--set".into(), "phase1.steps=2".into()]),
        ("gradcheck", vec!["gradcheck".into()]),
    ];
    let mut lines = 0;
    for (name, args) in &commands {
        let mut texts = Vec::new();
        for copy in 0..2 {
            let mut argv = vec!["memcom".to_string()];
            argv.extend(args.iter().cloned());
            argv.extend(["--config".into(), p(&cfg), "--run".into(), p(&run_dir(name, copy))]);
            let code = memcom_cli::main_with(argv);
            ensure(code == 0, format!("{name} exited {code}"))?;
            let text = fs::read_to_string(run_dir(name, copy).join("metrics.ndjson")).map_err(e)?;
            ensure(text.lines().all(|l| l.contains("\"ts\":")), format!("{name}: record without ts"))?;
            texts.push(text);
        }
        ensure(
            strip_timestamps(&texts[0]) == strip_timestamps(&texts[1]),
            format!("{name}: metrics differ beyond timestamps"),
        )?;
        for f in ["config.resolved", "invocation.json"] {
            ensure(
                fs::read(run_dir(name, 0).join(f)).map_err(e)? == fs::read(run_dir(name, 1).join(f)).map_err(e)?,
                format!("{name}: {f} differs"),
            )?;
        }
        lines += texts[0].lines().count();
    }
    for (name, file) in [("pretrain", "target.mcc"), ("phase1", "phase1.mcc"), ("phase2", "phase2.mcc")] {
        let a = fs::read(run_dir(name, 0).join("checkpoints").join(file)).map_err(e)?;
        let b = fs::read(run_dir(name, 1).join("checkpoints").join(file)).map_err(e)?;
        ensure(a == b, format!("{name}: checkpoint bytes differ"))?;
    }
    Ok(format!("{} commands, {lines} metrics lines identical modulo ts", commands.len()))
}

// ---------------------------------------------------------------- heavy: desk scale

const DESK_SEED: u64 = 1;
/// Pretraining steps for the desk target (about 1.5 h on one core).
const PRETRAIN_STEPS: u64 = 8_000;
const TREND_STEPS: u64 = 50_000;
const ORDERING_STEPS: u64 = 2_000;
const P2_BASE_STEPS: u64 = 1_000;
const P2_EXTRA_STEPS: u64 = 1_000;
const DESK_T: usize = 384;
const CHUNK: u64 = 500;

fn artifacts() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk");
    fs::create_dir_all(&dir).expect("artifact dir");
    dir
}

fn progress(msg: String) {
    eprintln!("    [{}] {msg}", chrono_free_now());
}

fn chrono_free_now() -> String {
    let s = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    format!("{:02}:{:02}:{:02}", (s / 3600) % 24, (s / 60) % 60, s % 60)
}

fn desk_data(seed: u64) -> TrainData {
    let vocab = Vocab::for_size(ModelConfig::default().vocab_size).unwrap();
    let corpus = CorpusStream::new(CorpusConfig::default(), TaskConfig::default(), vocab, seed).unwrap();
    TrainData::new(corpus, SplitSpec::default(), seed).unwrap()
}

fn desk_task() -> NamedTask {
    NamedTask {
        name: "proto32".into(),
        config: TaskConfig::default(),
        seed: 1_000,
    }
}

/// Pretrained desk target, cached and resumable in chunks.
fn desk_target() -> Result<ParamStore<f32>, String> {
    let cfg = ModelConfig::default();
    let path = artifacts().join(format!("target-s{DESK_SEED}.mcc"));
    let pc = PhaseConfig::desk(0, PRETRAIN_STEPS);
    let (mut params, mut opt) = match load_checkpoint::<f32>(&path) {
        Ok(ck) => (ck.params, ck.optimizer),
        Err(_) => (init_stack(&cfg, &mut Rng::new(DESK_SEED).split("target")), None),
    };
    let data = desk_data(DESK_SEED);
    while opt.as_ref().map_or(0, |o| o.step) < PRETRAIN_STEPS {
        let start = opt.as_ref().map_or(0, |o| o.step);
        let stop = (start / CHUNK + 1) * CHUNK;
        let control = RunControl {
            stop_at: Some(stop),
            ..Default::default()
        };
        let (r, o) = pretrain(&cfg, &mut params, &pc, &data.corpus, opt.take(), control).map_err(e)?;
        let mean = r.records.iter().map(|x| x.loss).sum::<f64>() / r.records.len().max(1) as f64;
        progress(format!("pretrain step {} loss {mean:.4}", o.step));
        save_checkpoint(&Checkpoint::of_stack(&cfg, &params, Some(o.clone())), &path).map_err(e)?;
        opt = Some(o);
    }
    Ok(params)
}

/// Train (or resume) a compressor to `cfg.steps`, cached under `name`.
fn train_cached(name: &str, fresh: impl FnOnce() -> Result<System<f32>, String>, pc: &PhaseConfig, data: &TrainData, until: u64) -> Result<System<f32>, String> {
    let path = artifacts().join(format!("{name}.mcc"));
    let (mut sys, mut opt) = match load_checkpoint::<f32>(&path) {
        Ok(ck) => ck.into_system().map_err(e)?,
        Err(_) => (fresh()?, None),
    };
    while opt.as_ref().map_or(0, |o| o.step) < until {
        let start = opt.as_ref().map_or(0, |o| o.step);
        let stop = ((start / CHUNK + 1) * CHUNK).min(until);
        let control = RunControl {
            stop_at: Some(stop),
            ..Default::default()
        };
        let (r, o) = run_phase(&mut sys, pc, data, opt.take(), control).map_err(e)?;
        let mean = r.records.iter().map(|x| x.loss).sum::<f64>() / r.records.len().max(1) as f64;
        progress(format!("{name} step {} loss {mean:.4}", o.step));
        save_checkpoint(&Checkpoint::of_system(&sys, pc.phase, Some(o.clone())), &path).map_err(e)?;
        opt = Some(o);
    }
    Ok(sys)
}

fn learnability() -> Outcome {
    let cfg = ModelConfig::default();
    let target = desk_target()?;
    let vocab = Vocab::for_size(cfg.vocab_size).map_err(e)?;
    let named = desk_task();
    let task = named.build(&vocab).map_err(e)?;
    let specs = named.eval_set(&task, &vocab, 8, 1).map_err(e)?;
    let art = Artifacts {
        model: &cfg,
        target: &target,
        system: None,
    };
    let budgets = Budgets::from_ratio(DESK_T, 8).map_err(e)?;
    let out = evaluate(MethodId::BaselineFull, art, &task, &vocab, &specs, budgets, EvalOptions::default()).map_err(e)?;
    let gate = 5.0 / task.config.classes as f64;
    let detail = format!(
        "baseline_full accuracy {:.4} ({}/{}) after {PRETRAIN_STEPS} pretraining steps, gate {gate:.4}",
        out.accuracy, out.correct, out.n_queries
    );
    ensure(out.accuracy >= gate, detail.clone())?;
    Ok(detail)
}

fn memcom_fresh(target: &ParamStore<f32>, m: usize, seed: u64) -> Result<System<f32>, String> {
    System::new(ModelConfig::default(), Method::memcom(), m, target, &mut Rng::new(seed).split("compressor")).map_err(e)
}

fn trend() -> Outcome {
    let cfg = ModelConfig::default();
    let target = desk_target()?;
    let vocab = Vocab::for_size(cfg.vocab_size).map_err(e)?;
    let mut acc = std::collections::BTreeMap::<(MethodId, usize), Vec<f64>>::new();
    for seed in 1..=3u64 {
        let data = desk_data(seed);
        let pc = PhaseConfig::desk(1, TREND_STEPS);
        let mut trained = Vec::new();
        for ratio in [3, 8] {
            let m = DESK_T / ratio;
            let sys = train_cached(&format!("trend-memcom-r{ratio}-s{seed}"), || memcom_fresh(&target, m, seed), &pc, &data, TREND_STEPS)?;
            trained.push(sys);
        }
        let plan = SweepPlan {
            methods: vec![MethodId::BaselineTrunc, MethodId::MemcomP1],
            ratios: vec![3, 8],
            t: DESK_T,
            tasks: vec![desk_task()],
            seeds: vec![seed],
            queries_per_class: 8,
            options: EvalOptions::default(),
        };
        let res = run_sweep(&plan, &vocab, &cfg, &target, |_, b, _| Ok(trained.iter().find(|s| s.m == b.m).cloned())).map_err(e)?;
        for c in res.cells {
            acc.entry((c.method, c.ratio.round() as usize)).or_default().push(c.accuracy.unwrap_or(f64::NAN));
        }
    }
    let mean = |m, r| {
        let v = &acc[&(m, r)];
        100.0 * v.iter().sum::<f64>() / v.len() as f64
    };
    let (t3, t8) = (mean(MethodId::BaselineTrunc, 3), mean(MethodId::BaselineTrunc, 8));
    let (m3, m8) = (mean(MethodId::MemcomP1, 3), mean(MethodId::MemcomP1, 8));
    let detail = format!("trunc 3x {t3:.1} 8x {t8:.1}; memcom_p1 3x {m3:.1} 8x {m8:.1}");
    ensure(t3 - t8 >= 10.0, format!("(a) fails: {detail}"))?;
    ensure(m8 - t8 >= 5.0, format!("(b) fails: {detail}"))?;
    ensure(m3 - m8 < t3 - t8, format!("(c) fails: {detail}"))?;
    Ok(detail)
}

fn ordering() -> Outcome {
    let cfg = ModelConfig::default();
    let target = desk_target()?;
    let data = desk_data(DESK_SEED);
    let m = DESK_T / 8;
    let pc = PhaseConfig::desk(1, ORDERING_STEPS);
    let vocab = Vocab::for_size(cfg.vocab_size).map_err(e)?;
    let named = desk_task();
    let task = named.build(&vocab).map_err(e)?;
    let specs = named.eval_set(&task, &vocab, 4, 1).map_err(e)?;
    let mut nll = Vec::new();
    let mut notes = Vec::new();
    for method in [MethodId::Icae, MethodId::IcaePlus, MethodId::IcaePp, MethodId::MemcomP1] {
        let fresh = || {
            System::new(cfg.clone(), method.compressor().unwrap(), m, &target, &mut Rng::new(DESK_SEED).split("compressor")).map_err(e)
        };
        let sys = train_cached(&format!("order-{}", method.name()), fresh, &pc, &data, ORDERING_STEPS)?;
        let loss = heldout_nll(&sys, &data, 64).map_err(e)?;
        let art = Artifacts {
            model: &cfg,
            target: &target,
            system: Some(&sys),
        };
        let out = evaluate(method, art, &task, &vocab, &specs, Budgets { t: DESK_T, m }, EvalOptions::default()).map_err(e)?;
        notes.push(format!("{} nll {loss:.4} acc {:.3}", method.name(), out.accuracy));
        nll.push(loss);
    }
    let detail = notes.join("; ");
    let (icae, icae_pp, memcom) = (nll[0], nll[2], nll[3]);
    ensure(icae >= icae_pp && icae_pp >= memcom, format!("NLL order violated: {detail}"))?;
    Ok(detail)
}

fn phase2_non_regression() -> Outcome {
    let target = desk_target()?;
    let m = DESK_T / 8;
    let mut p1 = Vec::new();
    let mut p2 = Vec::new();
    for seed in 1..=3u64 {
        let data = desk_data(seed);
        // The continued phase-1 run shares the base run's schedule.
        let long = PhaseConfig::desk(1, P2_BASE_STEPS + P2_EXTRA_STEPS);
        let base = train_cached(&format!("p2-base-s{seed}"), || memcom_fresh(&target, m, seed), &long, &data, P2_BASE_STEPS)?;
        let base_path = artifacts().join(format!("p2-base-s{seed}.mcc"));
        let cont_path = artifacts().join(format!("p2-cont1-s{seed}.mcc"));
        if !cont_path.exists() {
            fs::copy(&base_path, &cont_path).map_err(e)?;
        }
        let cont = train_cached(&format!("p2-cont1-s{seed}"), || Err("missing base".into()), &long, &data, P2_BASE_STEPS + P2_EXTRA_STEPS)?;
        let base_sys = base.clone();
        let phase2 = train_cached(&format!("p2-phase2-s{seed}"), move || Ok(base_sys), &PhaseConfig::desk(2, P2_EXTRA_STEPS), &data, P2_EXTRA_STEPS)?;
        p1.push(heldout_nll(&cont, &data, 64).map_err(e)?);
        p2.push(heldout_nll(&phase2, &data, 64).map_err(e)?);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let detail = format!("per-seed P1 {p1:.4?} P2 {p2:.4?}");
    let (a, b) = (median(&mut p1.clone()), median(&mut p2.clone()));
    let detail = format!("median P1 {a:.4} P2 {b:.4} ({detail})");
    ensure(b <= a, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- driver

fn heavy_selection() -> BTreeSet<u8> {
    let raw = std::env::var("MEMCOM_ACCEPTANCE_HEAVY").unwrap_or_default();
    if raw.trim() == "all" {
        return (6..=9).collect();
    }
    raw.split(',').filter_map(|s| s.trim().parse().ok()).collect()
}

fn main() {
    // Respect the test harness listing protocol.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: Vec<(u8, &str, bool, fn() -> Outcome)> = vec![
        (1, "gradient soundness", false, gradient_soundness),
        (2, "freeze soundness", false, freeze_soundness),
        (3, "prefix equivalence", false, prefix_equivalence),
        (4, "span invariant", false, span_invariant),
        (5, "LoRA capacity ladder", false, lora_ladder),
        (6, "learnability gate", true, learnability),
        (7, "trend reproduction", true, trend),
        (8, "ordering reproduction", true, ordering),
        (9, "phase-2 non-regression", true, phase2_non_regression),
        (10, "chance-floor calibration", false, chance_floor),
        (11, "serialization", false, serialization),
        (12, "determinism", false, determinism),
    ];
    let heavy = heavy_selection();
    let only: Option<BTreeSet<u8>> = std::env::var("MEMCOM_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (n, name, is_heavy, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        if is_heavy && !heavy.contains(&n) {
            println!("criterion {n:>2} {name}: SKIP (desk-scale training; set MEMCOM_ACCEPTANCE_HEAVY={n})");
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({secs:.1}s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({secs:.1}s) {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
