use proptest::prelude::*;

use super::*;
use crate::compressors::{target_attend, IcaeCapacity, Method};
use crate::numerics::Rng;
use crate::tasks::{CorpusConfig, CorpusStream, TaskConfig, Vocab};
use crate::training::{run_phase, PhaseConfig, RunControl, SplitSpec, TrainData};
use crate::transformer::init_stack;

fn context(kind: ContextKind, layers: usize, m: usize, d: usize, seed: u64) -> CompressedContext<f32> {
    let mut rng = Rng::new(seed);
    CompressedContext {
        kind,
        layers: (0..layers).map(|_| rng.normal_tensor(&[m, d], 1.0)).collect(),
        source_t: 3 * m,
        config_hash: [7; 32],
    }
}

#[test]
fn context_roundtrip_is_bitwise_for_both_kinds() {
    let dir = tempfile::tempdir().unwrap();
    for (kind, layers) in [(ContextKind::PerLayer, 3), (ContextKind::EmbeddingPrefix, 1)] {
        let ctx = context(kind, layers, 5, 16, 1);
        let p = dir.path().join("a.mcc");
        save_context(&ctx, &p).unwrap();
        let back: CompressedContext<f32> = load_context(&p).unwrap();
        assert!(back.bitwise_eq(&ctx));
        let q = dir.path().join("b.mcc");
        save_context(&back, &q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }
    let wide: CompressedContext<f64> = CompressedContext {
        kind: ContextKind::PerLayer,
        layers: vec![Rng::new(2).normal_tensor(&[2, 3], 1.0)],
        source_t: 9,
        config_hash: [1; 32],
    };
    let back: CompressedContext<f64> = decode_context(&encode_context(&wide).unwrap()).unwrap();
    assert!(back.bitwise_eq(&wide));
    assert!(matches!(decode_context::<f32>(&encode_context(&wide).unwrap()), Err(Error::Unsupported(_))));
}

#[test]
fn payload_size_arithmetic() {
    let ctx = context(ContextKind::PerLayer, 4, 8, 128, 3);
    let bytes = encode_context(&ctx).unwrap();
    assert_eq!(bytes.len() - CONTEXT_HEADER_LEN - CRC_LEN, 16384);
    let h = inspect_context(&bytes).unwrap();
    assert_eq!((h.layers, h.m, h.d, h.payload_bytes, h.source_t), (4, 8, 128, 16384, 24));
    assert_eq!(h.kind, ContextKind::PerLayer);
    assert_eq!(h.config_hash, "07".repeat(32));
}

#[test]
fn corruption_is_always_a_hard_error() {
    let bytes = encode_context(&context(ContextKind::PerLayer, 2, 3, 4, 4)).unwrap();
    for cut in [0, 1, 10, 58, bytes.len() - 1] {
        assert!(matches!(decode_context::<f32>(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
    }
    for i in [0, 5, 9, 30, 70, bytes.len() - 2] {
        let mut bad = bytes.clone();
        bad[i] ^= 0x10;
        assert!(decode_context::<f32>(&bad).is_err(), "flip {i}");
    }
    let mut v2 = bytes[..bytes.len() - 4].to_vec();
    v2[4] = 2;
    assert!(matches!(decode_context::<f32>(&seal(v2)), Err(Error::UnsupportedVersion(2))));
    assert!(matches!(decode_checkpoint::<f32>(&bytes), Err(Error::Corrupt(_))));
}

#[test]
fn cache_ratio_formulas_and_file_size() {
    let model = ModelConfig::tiny();
    let d = model.d_model;
    let full_row = 2 * model.n_kv_heads * model.head_dim;
    let t = 64;
    let same = context(ContextKind::PerLayer, model.n_layers, t, d, 5);
    assert_eq!(cache_size_ratio(&same, &model, t).unwrap(), d as f64 / full_row as f64);

    let matched = ModelConfig {
        n_kv_heads: 2,
        ..model.clone()
    };
    assert_eq!(2 * matched.n_kv_heads * matched.head_dim, d);
    let eighth = context(ContextKind::PerLayer, matched.n_layers, t / 8, d, 6);
    assert_eq!(cache_size_ratio(&eighth, &matched, t).unwrap(), 0.125);
    assert!(cache_size_ratio(&eighth, &matched, 0).is_err());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.mcc");
    save_context(&eighth, &p).unwrap();
    let size = fs::metadata(&p).unwrap().len() as f64;
    let floats = cache_size_ratio(&eighth, &matched, t).unwrap() * (2 * matched.n_layers * t * matched.n_kv_heads * matched.head_dim) as f64;
    assert!((size - 4.0 * floats).abs() <= 64.0);
}

#[test]
fn saved_context_refuses_other_config() {
    let cfg = ModelConfig::tiny();
    let target = init_stack::<f32>(&cfg, &mut Rng::new(7));
    let sys = System::new(cfg.clone(), Method::memcom(), 4, &target, &mut Rng::new(8)).unwrap();
    let ctx = sys.compress(&(0..12).collect::<Vec<_>>()).unwrap();
    let back: CompressedContext<f32> = decode_context(&encode_context(&ctx).unwrap()).unwrap();
    let (a, _) = target_attend(&cfg, &target, &back, &[1, 2, 3]).unwrap();
    let (b, _) = target_attend(&cfg, &target, &ctx, &[1, 2, 3]).unwrap();
    assert!(a.bitwise_eq(&b));
    let other = ModelConfig {
        rope_base: 500.0,
        ..cfg
    };
    assert!(matches!(target_attend(&other, &target, &back, &[1]), Err(Error::ConfigHashMismatch)));
}

fn data() -> TrainData {
    let v = Vocab::new(64, 16, 16).unwrap();
    let task = TaskConfig {
        classes: 4,
        k_in: 4,
        k_lab: 1,
        noise: 0.25,
    };
    let corpus = CorpusConfig {
        total_len: 40,
        episode_classes: (2, 4),
        ..Default::default()
    };
    let split = SplitSpec {
        total_len: 40,
        source_lo: 20,
        source_hi: 28,
    };
    TrainData::new(CorpusStream::new(corpus, task, v, 9).unwrap(), split, 9).unwrap()
}

fn phase(p: u8, steps: u64) -> PhaseConfig {
    PhaseConfig {
        batch_size: 2,
        ..PhaseConfig::desk(p, steps)
    }
}

#[test]
fn checkpoint_resume_equals_uninterrupted() {
    let cfg = ModelConfig::tiny();
    let target = init_stack::<f32>(&cfg, &mut Rng::new(10));
    let data = data();
    let fresh = || System::new(cfg.clone(), Method::icae(IcaeCapacity::IcaePlus), 4, &target, &mut Rng::new(11)).unwrap();

    let mut full = fresh();
    let (rf, _) = run_phase(&mut full, &phase(1, 10), &data, None, RunControl::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.mcc");
    let mut part = fresh();
    let stop = RunControl {
        stop_at: Some(5),
        ..Default::default()
    };
    let (ra, opt) = run_phase(&mut part, &phase(1, 10), &data, None, stop).unwrap();
    save_checkpoint(&Checkpoint::of_system(&part, 1, Some(opt)), &path).unwrap();
    let target_bytes = part.target_params().checksum(|_| true);

    let loaded: Checkpoint<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(encode_checkpoint(&loaded).unwrap(), fs::read(&path).unwrap());
    let (mut resumed, opt) = loaded.into_system().unwrap();
    assert_eq!(resumed.target_params().checksum(|_| true), target_bytes);
    let (rb, _) = run_phase(&mut resumed, &phase(1, 10), &data, opt, RunControl::default()).unwrap();

    let joined: Vec<_> = ra.records.into_iter().chain(rb.records).collect();
    assert_eq!(joined.len(), 10);
    assert_eq!(joined, rf.records);
    assert!(resumed.params.bitwise_eq(&full.params));
    assert_eq!(resumed.target_params().checksum(|_| true), target_bytes);
}

#[test]
fn checkpoint_of_stack_and_corruption() {
    let cfg = ModelConfig::tiny();
    let p = init_stack::<f32>(&cfg, &mut Rng::new(12));
    let ck = Checkpoint::of_stack(&cfg, &p, None);
    let bytes = encode_checkpoint(&ck).unwrap();
    let back: Checkpoint<f32> = decode_checkpoint(&bytes).unwrap();
    assert!(back.params.bitwise_eq(&p));
    assert!(back.target().bitwise_eq(&p));
    assert!(back.clone().into_system().is_err());
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 1;
    assert!(matches!(decode_checkpoint::<f32>(&bad), Err(Error::Corrupt(_))));
    assert!(matches!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
    assert!(matches!(decode_context::<f32>(&bytes), Err(Error::Corrupt(_))));
}

#[test]
fn atomic_write_leaves_no_temp_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.bin");
    write_atomic(&p, b"one").unwrap();
    write_atomic(&p, b"two").unwrap();
    assert_eq!(fs::read(&p).unwrap(), b"two");
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    assert!(write_atomic(&dir.path().join("missing/x.bin"), b"z").is_err());
}

proptest! {
    #[test]
    fn prop_context_roundtrip(layers in 1usize..4, m in 1usize..6, d in 1usize..9, seed in 0u64..1000, embed in any::<bool>()) {
        let (kind, layers) = if embed { (ContextKind::EmbeddingPrefix, 1) } else { (ContextKind::PerLayer, layers) };
        let ctx = context(kind, layers, m, d, seed);
        let bytes = encode_context(&ctx).unwrap();
        prop_assert_eq!(bytes.len(), CONTEXT_HEADER_LEN + 4 * layers * m * d + CRC_LEN);
        let back: CompressedContext<f32> = decode_context(&bytes).unwrap();
        prop_assert!(back.bitwise_eq(&ctx));
        prop_assert_eq!(encode_context(&back).unwrap(), bytes);
    }

    #[test]
    fn prop_decoders_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode_context::<f32>(&bytes);
        let _ = decode_checkpoint::<f32>(&bytes);
        let _ = inspect_context(&bytes);
    }

    #[test]
    fn prop_sealed_garbage_never_panics(body in proptest::collection::vec(any::<u8>(), 0..120), kind in 0u8..4) {
        // Valid CRC and prefix, arbitrary body: exercises the field parsers.
        let mut raw = prelude(kind);
        raw.extend(body);
        let bytes = seal(raw);
        let _ = decode_context::<f32>(&bytes);
        let _ = decode_checkpoint::<f32>(&bytes);
        let _ = inspect_context(&bytes);
    }
}
