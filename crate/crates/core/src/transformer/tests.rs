use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::numerics::{Rng, Tape, Tensor};

fn setup(seed: u64) -> (ModelConfig, ParamStore<f64>) {
    let cfg = ModelConfig::tiny();
    let p = init_stack(&cfg, &mut Rng::new(seed));
    (cfg, p)
}

fn logits(cfg: &ModelConfig, p: &ParamStore<f64>, tokens: &[usize]) -> Tensor<f64> {
    let tape = Tape::new();
    let b = Bound::frozen(&tape, p);
    let s = Stack::new(cfg, &b, "");
    let pos: Vec<usize> = (0..tokens.len()).collect();
    s.forward(Input::Tokens(tokens), &pos, None, ForwardOptions::default())
        .unwrap()
        .logits
        .unwrap()
        .value()
}

fn tokens(rng: &mut Rng, n: usize, v: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(v)).collect()
}

#[test]
fn single_token_logit_shape() {
    let (cfg, p) = setup(1);
    assert_eq!(logits(&cfg, &p, &[5]).shape(), &[1, cfg.vocab_size]);
}

#[test]
fn future_tokens_do_not_change_past_logits() {
    let (cfg, p) = setup(2);
    let mut rng = Rng::new(20);
    let a = tokens(&mut rng, 12, cfg.vocab_size);
    for j in 0..11 {
        let mut b = a.clone();
        for t in b.iter_mut().skip(j + 1) {
            *t = (*t + 7) % cfg.vocab_size;
        }
        let (la, lb) = (logits(&cfg, &p, &a), logits(&cfg, &p, &b));
        for r in 0..=j {
            assert!(la.row(r).iter().zip(lb.row(r)).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

/// Full-sequence forward versus suffix forward over the prefix's KV.
fn prefix_equivalence_case(seed: u64) {
    let (cfg, p) = setup(seed);
    let mut rng = Rng::new(seed ^ 0xabc);
    let ns = 1 + rng.below(12);
    let nt = 1 + rng.below(12);
    let all = tokens(&mut rng, ns + nt, cfg.vocab_size);
    let full = logits(&cfg, &p, &all);

    let tape = Tape::new();
    let b = Bound::frozen(&tape, &p);
    let s = Stack::new(&cfg, &b, "");
    let pos_s: Vec<usize> = (0..ns).collect();
    let pos_t: Vec<usize> = (ns..ns + nt).collect();
    let first = s
        .forward(
            Input::Tokens(&all[..ns]),
            &pos_s,
            None,
            ForwardOptions {
                capture_kv: true,
                ..Default::default()
            },
        )
        .unwrap();
    let prefix = KvPrefix {
        layers: first.kv.clone(),
        positions: pos_s,
    };
    let second = s
        .forward(Input::Tokens(&all[ns..]), &pos_t, Some(&prefix), ForwardOptions::default())
        .unwrap();
    let got = second.logits.unwrap().value();
    for r in 0..nt {
        assert!(
            got.row(r)
                .iter()
                .zip(full.row(ns + r))
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            "seed {seed} row {r}"
        );
    }
    for layer in &second.spans.layers {
        assert_eq!(layer.context, ns);
        assert_eq!(layer.attended, (0..nt).map(|j| ns + j + 1).collect::<Vec<_>>());
    }
}

#[test]
fn kv_prefix_matches_full_sequence_bitwise() {
    for seed in 0..10 {
        prefix_equivalence_case(seed);
    }
}

#[test]
fn span_counter_with_prefix() {
    let (cfg, p) = setup(3);
    let tape = Tape::new();
    let b = Bound::frozen(&tape, &p);
    let s = Stack::new(&cfg, &b, "");
    let m = 8;
    let mut rng = Rng::new(30);
    let hid = tape.constant(rng.normal_tensor(&[m, cfg.d_model], 1.0));
    let pos_m: Vec<usize> = (0..m).collect();
    let layers = (0..cfg.n_layers)
        .map(|l| s.project_kv(l, hid, &pos_m).unwrap())
        .collect();
    let prefix = KvPrefix {
        layers,
        positions: pos_m,
    };
    let out = s
        .forward(Input::Tokens(&[4]), &[m], Some(&prefix), ForwardOptions::default())
        .unwrap();
    assert_eq!(out.spans.uniform_context(), Some(m));
    assert!(out.spans.layers.iter().all(|l| l.attended == vec![m + 1]));
}

#[test]
fn position_errors() {
    let (cfg, p) = setup(4);
    let tape = Tape::new();
    let b = Bound::frozen(&tape, &p);
    let s = Stack::new(&cfg, &b, "");
    let o = ForwardOptions::default();
    assert!(matches!(
        s.forward(Input::Tokens(&[1, 2]), &[3, 3], None, o),
        Err(Error::Position(_))
    ));
    assert!(matches!(
        s.forward(Input::Tokens(&[1]), &[cfg.max_seq], None, o),
        Err(Error::SequenceOverflow { .. })
    ));
    let long = vec![1; cfg.max_seq + 1];
    let pos: Vec<usize> = (0..long.len()).collect();
    assert!(matches!(
        s.forward(Input::Tokens(&long), &pos, None, o),
        Err(Error::SequenceOverflow { .. })
    ));
    let hid = tape.constant(Tensor::zeros([2, cfg.d_model]));
    let layers = (0..cfg.n_layers).map(|l| s.project_kv(l, hid, &[0, 1]).unwrap()).collect();
    let prefix = KvPrefix {
        layers,
        positions: vec![0, 1],
    };
    assert!(matches!(
        s.forward(Input::Tokens(&[1]), &[1], Some(&prefix), o),
        Err(Error::Position(_))
    ));
}

/// Per-query, per-head loop over the block's own projections.
#[test]
fn attention_block_matches_loop_oracle() {
    for (seed, n_kv) in [(5u64, 4usize), (6, 2), (7, 1)] {
        let cfg = ModelConfig {
            n_kv_heads: n_kv,
            ..ModelConfig::tiny()
        };
        let p: ParamStore<f64> = init_stack(&cfg, &mut Rng::new(seed));
        let mut rng = Rng::new(seed + 100);
        let n = 7;
        let x = rng.normal_tensor::<f64>(&[n, cfg.d_model], 1.0);
        let pos: Vec<usize> = (0..n).map(|i| 2 * i + 1).collect();

        let tape = Tape::new();
        let b = Bound::frozen(&tape, &p);
        let s = Stack::new(&cfg, &b, "");
        let got = s.attention_block(0, tape.constant(x.clone()), &pos, None).unwrap().residual.value();

        // Oracle in plain loops.
        let d = cfg.d_model;
        let hd = cfg.head_dim;
        let gain = p.get("layer.0.attn_norm").unwrap();
        let mut xn = x.clone();
        for r in 0..n {
            let ms: f64 = x.row(r).iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + cfg.norm_eps).sqrt();
            for c in 0..d {
                xn.data_mut()[r * d + c] = x.row(r)[c] * inv * gain.data()[c];
            }
        }
        let proj = |w: &str| xn.matmul(p.get(w).unwrap()).unwrap();
        let rot = |mut t: Tensor<f64>| {
            let w = t.last_dim();
            for (r, &ps) in pos.iter().enumerate() {
                for h in 0..w / hd {
                    for i in 0..hd / 2 {
                        let th = ps as f64 / cfg.rope_base.powf(2.0 * i as f64 / hd as f64);
                        let base = r * w + h * hd + 2 * i;
                        let (a, c) = (t.data()[base], t.data()[base + 1]);
                        t.data_mut()[base] = a * th.cos() - c * th.sin();
                        t.data_mut()[base + 1] = a * th.sin() + c * th.cos();
                    }
                }
            }
            t
        };
        let q = rot(proj("layer.0.attn.wq"));
        let k = rot(proj("layer.0.attn.wk"));
        let v = proj("layer.0.attn.wv");
        let kw = cfg.kv_dim();
        let mut heads = Tensor::<f64>::zeros([n, d]);
        for h in 0..cfg.n_heads {
            let kh = h / (cfg.n_heads / n_kv);
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        (0..hd)
                            .map(|c| q.data()[i * d + h * hd + c] * k.data()[j * kw + kh * hd + c])
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - mx).exp() / z;
                    for c in 0..hd {
                        heads.data_mut()[i * d + h * hd + c] += w * v.data()[j * kw + kh * hd + c];
                    }
                }
            }
        }
        let out = heads.matmul(p.get("layer.0.attn.wo").unwrap()).unwrap();
        let mut want = x.clone();
        for (w, o) in want.data_mut().iter_mut().zip(out.data()) {
            *w += o;
        }
        assert!(got.max_abs_diff(&want) < 1e-5, "kv heads {n_kv}");
    }
}

#[test]
fn clone_gives_identical_logits() {
    let (cfg, p) = setup(8);
    let q = p.clone();
    let toks = [1, 5, 9, 2, 44, 63];
    assert!(logits(&cfg, &p, &toks).bitwise_eq(&logits(&cfg, &q, &toks)));
}

#[test]
fn lora_stack_with_zero_b_matches_base() {
    let (cfg, base) = setup(9);
    let toks = [3, 1, 4, 1, 5, 9];
    let want = logits(&cfg, &base, &toks);
    for scope in [
        vec![LoraTarget::Query],
        vec![LoraTarget::Query, LoraTarget::Key],
        vec![LoraTarget::Value, LoraTarget::Post],
        LoraTarget::ALL.to_vec(),
    ] {
        let lc = LoraConfig::new(4, 8.0, &scope).unwrap();
        let mut p = base.clone();
        lora::attach(&mut p, "", &cfg, &lc, &mut Rng::new(1));
        let tape = Tape::new();
        let b = Bound::frozen(&tape, &p);
        let s = Stack::new(&cfg, &b, "").with_lora_scale(lc.scale());
        let pos: Vec<usize> = (0..toks.len()).collect();
        let got = s
            .forward(Input::Tokens(&toks), &pos, None, ForwardOptions::default())
            .unwrap()
            .logits
            .unwrap()
            .value();
        assert!(got.bitwise_eq(&want), "{scope:?}");
    }
}

#[test]
fn hidden_capture_is_layer_input() {
    let (cfg, p) = setup(10);
    let tape = Tape::new();
    let b = Bound::frozen(&tape, &p);
    let s = Stack::new(&cfg, &b, "");
    let toks = [1, 2, 3];
    let out = s
        .forward(
            Input::Tokens(&toks),
            &[0, 1, 2],
            None,
            ForwardOptions {
                capture_hidden: true,
                ..Default::default()
            },
        )
        .unwrap();
    assert_eq!(out.hidden.len(), cfg.n_layers);
    assert!(out.hidden[0].value().bitwise_eq(&s.embed(&toks).unwrap().value()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn prop_prefix_equivalence(seed in 100u64..10_000) {
        prefix_equivalence_case(seed);
    }
}
