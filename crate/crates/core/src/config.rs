//! Run configuration as flat `key = value` text with dotted keys.

use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::compressors::{CrossAttnVariant, IcaeCapacity, Method, PayloadTap};
use crate::error::{Error, Result};
use crate::eval::{Budgets, EvalOptions, MethodId, NamedTask};
use crate::tasks::{CorpusConfig, TaskConfig, Vocab};
use crate::training::{AdamConfig, PhaseConfig, SplitSpec};
use crate::transformer::{LoraConfig, LoraTarget, ModelConfig, PrefixPositions};

/// A value that can be read from and written to one config line.
trait Field {
    fn parse_into(&mut self, s: &str) -> std::result::Result<(), String>;
    fn render(&self) -> String;
}

fn parse_num<T: FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    s.parse().map_err(|e| format!("`{s}`: {e}"))
}

macro_rules! plain_field {
    ($($t:ty),*) => {$(
        impl Field for $t {
            fn parse_into(&mut self, s: &str) -> std::result::Result<(), String> {
                *self = parse_num(s)?;
                Ok(())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_field!(usize, u64, bool, String);

impl Field for f64 {
    fn parse_into(&mut self, s: &str) -> std::result::Result<(), String> {
        let v: f64 = parse_num(s)?;
        if !v.is_finite() {
            return Err(format!("`{s}` is not finite"));
        }
        *self = v;
        Ok(())
    }

    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl Field for Option<f64> {
    fn parse_into(&mut self, s: &str) -> std::result::Result<(), String> {
        if s == "none" {
            *self = None;
        } else {
            let mut v = 0.0;
            v.parse_into(s)?;
            *self = Some(v);
        }
        Ok(())
    }

    fn render(&self) -> String {
        self.map_or_else(|| "none".into(), |v| v.render())
    }
}

impl Field for (usize, usize) {
    fn parse_into(&mut self, s: &str) -> std::result::Result<(), String> {
        let (a, b) = s.split_once(',').ok_or_else(|| format!("`{s}`: expected `lo,hi`"))?;
        *self = (parse_num(a.trim())?, parse_num(b.trim())?);
        Ok(())
    }

    fn render(&self) -> String {
        format!("{},{}", self.0, self.1)
    }
}

/// Comma-separated lists of any single-token field.
impl<T: Field + Default> Field for Vec<T> {
    fn parse_into(&mut self, s: &str) -> std::result::Result<(), String> {
        *self = s
            .split(',')
            .map(|x| {
                let mut v = T::default();
                v.parse_into(x.trim())?;
                Ok(v)
            })
            .collect::<std::result::Result<_, String>>()?;
        Ok(())
    }

    fn render(&self) -> String {
        self.iter().map(Field::render).collect::<Vec<_>>().join(",")
    }
}

/// Enums written by name.
macro_rules! named_field {
    ($t:ty, $default:expr, [$($v:expr => $n:literal),* $(,)?]) => {
        impl Field for $t {
            fn parse_into(&mut self, s: &str) -> std::result::Result<(), String> {
                *self = match s {
                    $($n => $v,)*
                    _ => return Err(format!("`{s}` is not one of {}", [$($n),*].join(", "))),
                };
                Ok(())
            }
            fn render(&self) -> String {
                match self {
                    $(x if *x == $v => $n.into(),)*
                    _ => unreachable!("all variants listed"),
                }
            }
        }
    };
}

impl Default for Wrapped<MethodId> {
    fn default() -> Self {
        Wrapped(MethodId::MemcomP1)
    }
}

impl Default for Wrapped<CrossAttnVariant> {
    fn default() -> Self {
        Wrapped(CrossAttnVariant::OneHead)
    }
}

/// Local newtype so enums from other modules get list parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Wrapped<T>(pub T);

named_field!(Wrapped<MethodId>, MethodId::MemcomP1, [
    Wrapped(MethodId::BaselineFull) => "baseline_full",
    Wrapped(MethodId::BaselineTrunc) => "baseline_trunc",
    Wrapped(MethodId::Icae) => "icae",
    Wrapped(MethodId::IcaePlus) => "icae_plus",
    Wrapped(MethodId::IcaePp) => "icae_pp",
    Wrapped(MethodId::MemcomP1) => "memcom_p1",
    Wrapped(MethodId::MemcomP2) => "memcom_p2",
]);

named_field!(Wrapped<CrossAttnVariant>, CrossAttnVariant::OneHead, [
    Wrapped(CrossAttnVariant::OneHead) => "one_head",
    Wrapped(CrossAttnVariant::Mha) => "mha",
    Wrapped(CrossAttnVariant::Mqa) => "mqa",
    Wrapped(CrossAttnVariant::MqaSelfInit) => "mqa_self_init",
]);

named_field!(PayloadTap, PayloadTap::PostResidual, [
    PayloadTap::PostResidual => "post_residual",
    PayloadTap::RawOutput => "raw_output",
]);

named_field!(PrefixPositions, PrefixPositions::Contiguous, [
    PrefixPositions::Contiguous => "contiguous",
    PrefixPositions::Stretched => "stretched",
]);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub queries_per_class: usize,
    pub generation: bool,
    pub shuffled_labels: bool,
    /// Held-out (source, target) pairs for NLL.
    pub heldout: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    pub methods: Vec<Wrapped<MethodId>>,
    pub ratios: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateSection {
    pub variants: Vec<Wrapped<CrossAttnVariant>>,
    pub ratio: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSection {
    pub step: f64,
    /// Coordinates probed per tensor; 0 probes all of them.
    pub samples: usize,
    pub source_len: usize,
    pub target_len: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub method: Wrapped<MethodId>,
    pub variant: Wrapped<CrossAttnVariant>,
    pub tap: PayloadTap,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub task_name: String,
    pub task: TaskConfig,
    pub task_seed: u64,
    pub budget_t: usize,
    pub budget_ratio: usize,
    pub corpus: CorpusConfig,
    pub split: SplitSpec,
    pub adam: AdamConfig,
    pub phases: [PhaseConfig; 3],
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub ablate: AblateSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            method: Wrapped(MethodId::MemcomP1),
            variant: Wrapped(CrossAttnVariant::OneHead),
            tap: PayloadTap::PostResidual,
            lora_rank: 8,
            lora_alpha: 16.0,
            task_name: "proto32".into(),
            task: TaskConfig::default(),
            task_seed: 1,
            budget_t: 384,
            budget_ratio: 8,
            corpus: CorpusConfig::default(),
            split: SplitSpec::default(),
            adam: AdamConfig::default(),
            phases: [
                PhaseConfig::desk(0, 20_000),
                PhaseConfig::desk(1, 50_000),
                PhaseConfig::desk(2, 10_000),
            ],
            checkpoint_every: 0,
            eval: EvalSection {
                queries_per_class: 8,
                generation: false,
                shuffled_labels: false,
                heldout: 64,
            },
            sweep: SweepSection {
                methods: MethodId::ALL.iter().map(|&m| Wrapped(m)).collect(),
                ratios: vec![3, 6, 8],
                seeds: vec![1, 2, 3],
            },
            ablate: AblateSection {
                variants: CrossAttnVariant::ALL.iter().map(|&v| Wrapped(v)).collect(),
                ratio: 8,
            },
            gradcheck: GradcheckSection {
                step: crate::training::GRADCHECK_STEP,
                samples: 0,
                source_len: 16,
                target_len: 8,
                m: 4,
            },
        }
    }
}

impl RunConfig {
    /// Every key with its field, in dump order.
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut dyn Field) -> Result<()>) -> Result<()> {
        f("seed", &mut self.seed)?;
        let m = &mut self.model;
        f("model.n_layers", &mut m.n_layers)?;
        f("model.d_model", &mut m.d_model)?;
        f("model.n_heads", &mut m.n_heads)?;
        f("model.head_dim", &mut m.head_dim)?;
        f("model.n_kv_heads", &mut m.n_kv_heads)?;
        f("model.ffn_dim", &mut m.ffn_dim)?;
        f("model.vocab_size", &mut m.vocab_size)?;
        f("model.max_seq", &mut m.max_seq)?;
        f("model.rope_base", &mut m.rope_base)?;
        f("model.norm_eps", &mut m.norm_eps)?;
        f("model.prefix_positions", &mut m.prefix_positions)?;
        f("method", &mut self.method)?;
        f("memcom.variant", &mut self.variant)?;
        f("memcom.tap", &mut self.tap)?;
        f("icae.lora_rank", &mut self.lora_rank)?;
        f("icae.lora_alpha", &mut self.lora_alpha)?;
        f("task.name", &mut self.task_name)?;
        f("task.classes", &mut self.task.classes)?;
        f("task.k_in", &mut self.task.k_in)?;
        f("task.k_lab", &mut self.task.k_lab)?;
        f("task.noise", &mut self.task.noise)?;
        f("task.seed", &mut self.task_seed)?;
        f("budget.t", &mut self.budget_t)?;
        f("budget.ratio", &mut self.budget_ratio)?;
        let c = &mut self.corpus;
        f("corpus.total_len", &mut c.total_len)?;
        f("corpus.episode_prob", &mut c.episode_prob)?;
        f("corpus.episode_classes", &mut c.episode_classes)?;
        f("corpus.copy_len", &mut c.copy_len)?;
        f("corpus.period", &mut c.period)?;
        f("corpus.repeats", &mut c.repeats)?;
        f("corpus.noise_len", &mut c.noise_len)?;
        f("split.source_lo", &mut self.split.source_lo)?;
        f("split.source_hi", &mut self.split.source_hi)?;
        f("adam.beta1", &mut self.adam.beta1)?;
        f("adam.beta2", &mut self.adam.beta2)?;
        f("adam.eps", &mut self.adam.eps)?;
        f("adam.weight_decay", &mut self.adam.weight_decay)?;
        for (i, p) in self.phases.iter_mut().enumerate() {
            f(&format!("phase{i}.steps"), &mut p.steps)?;
            f(&format!("phase{i}.batch_size"), &mut p.batch_size)?;
            f(&format!("phase{i}.lr"), &mut p.peak_lr)?;
            f(&format!("phase{i}.warmup"), &mut p.warmup_steps)?;
            f(&format!("phase{i}.clip"), &mut p.clip)?;
        }
        f("train.checkpoint_every", &mut self.checkpoint_every)?;
        f("eval.queries_per_class", &mut self.eval.queries_per_class)?;
        f("eval.generation", &mut self.eval.generation)?;
        f("eval.shuffled_labels", &mut self.eval.shuffled_labels)?;
        f("eval.heldout", &mut self.eval.heldout)?;
        f("sweep.methods", &mut self.sweep.methods)?;
        f("sweep.ratios", &mut self.sweep.ratios)?;
        f("sweep.seeds", &mut self.sweep.seeds)?;
        f("ablate.variants", &mut self.ablate.variants)?;
        f("ablate.ratio", &mut self.ablate.ratio)?;
        f("gradcheck.step", &mut self.gradcheck.step)?;
        f("gradcheck.samples", &mut self.gradcheck.samples)?;
        f("gradcheck.source_len", &mut self.gradcheck.source_len)?;
        f("gradcheck.target_len", &mut self.gradcheck.target_len)?;
        f("gradcheck.m", &mut self.gradcheck.m)?;
        Ok(())
    }

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut found = false;
        self.visit(&mut |k, field| {
            if k == key {
                found = true;
                field.parse_into(value).map_err(|message| Error::Config {
                    key: key.into(),
                    message,
                })?;
            }
            Ok(())
        })?;
        if !found {
            return Err(Error::Config {
                key: key.into(),
                message: "unknown key".into(),
            });
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut copy = self.clone();
        let mut out = Vec::new();
        copy.visit(&mut |k, field| {
            out.push((k.to_string(), field.render()));
            Ok(())
        })
        .expect("rendering cannot fail");
        out
    }

    /// The resolved configuration, parseable back to an equal value.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Apply `key=value` overrides on top of this configuration.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
                key: o.into(),
                message: "override must look like key=value".into(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Cross-field checks; field-level diagnostics name the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.into(),
                message,
            })
        };
        self.model.validate()?;
        self.corpus.validate()?;
        self.split().validate()?;
        let vocab = self.vocab()?;
        if self.task.classes == 0 || self.task.classes > vocab.n_labels() {
            return bad("task.classes", format!("must be in 1..={}", vocab.n_labels()));
        }
        if !(0.0..=1.0).contains(&self.task.noise) {
            return bad("task.noise", "must be in [0, 1]".into());
        }
        if self.task.k_in == 0 || self.task.k_lab == 0 {
            return bad("task.k_in", "input and label lengths must be positive".into());
        }
        let b = self.budgets()?;
        let tail = self.task.shot_len();
        if b.t + tail > self.model.max_seq {
            return bad("budget.t", format!("t + query ({}) exceeds model.max_seq {}", b.t + tail, self.model.max_seq));
        }
        if b.m < tail {
            return bad("budget.ratio", format!("m = {} cannot hold one {tail}-token shot", b.m));
        }
        if self.corpus.total_len > self.model.max_seq {
            return bad("corpus.total_len", "exceeds model.max_seq".into());
        }
        if self.lora_rank == 0 {
            return bad("icae.lora_rank", "must be positive".into());
        }
        for (i, p) in self.phases().iter().enumerate() {
            p.validate().map_err(|e| match e {
                Error::Config { key, message } => Error::Config {
                    key: key.replace("phase", &format!("phase{i}.")).replacen(&format!("phase{i}.{i}."), &format!("phase{i}."), 1),
                    message,
                },
                e => e,
            })?;
        }
        if self.sweep.methods.is_empty() || self.sweep.ratios.is_empty() || self.sweep.seeds.is_empty() {
            return bad("sweep", "methods, ratios and seeds must be non-empty".into());
        }
        if self.eval.queries_per_class == 0 {
            return bad("eval.queries_per_class", "must be at least 1".into());
        }
        if self.gradcheck.m == 0 || self.gradcheck.source_len <= self.gradcheck.m || self.gradcheck.target_len < 2 {
            return bad("gradcheck", "need source_len > m > 0 and target_len >= 2".into());
        }
        if !(self.gradcheck.step > 0.0) {
            return bad("gradcheck.step", "must be positive".into());
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::for_size(self.model.vocab_size)
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            total_len: self.corpus.total_len,
            ..self.split
        }
    }

    pub fn budgets(&self) -> Result<Budgets> {
        Budgets::from_ratio(self.budget_t, self.budget_ratio)
    }

    /// Phase configs with the shared optimizer settings applied.
    pub fn phases(&self) -> [PhaseConfig; 3] {
        let mut out = self.phases.clone();
        for (i, p) in out.iter_mut().enumerate() {
            p.phase = i as u8;
            p.adam = self.adam;
        }
        out
    }

    pub fn phase(&self, phase: u8) -> Result<PhaseConfig> {
        self.phases()
            .get(phase as usize)
            .cloned()
            .ok_or_else(|| Error::Config {
                key: "phase".into(),
                message: format!("phase {phase} is not 0, 1 or 2"),
            })
    }

    /// Compressor architecture for `method`, honouring the variant, tap and
    /// adapter settings.
    pub fn compressor(&self, method: MethodId) -> Result<Option<Method>> {
        Ok(match method {
            MethodId::BaselineFull | MethodId::BaselineTrunc => None,
            MethodId::MemcomP1 | MethodId::MemcomP2 => Some(Method::MemCom {
                variant: self.variant.0,
                tap: self.tap,
            }),
            MethodId::Icae | MethodId::IcaePlus | MethodId::IcaePp => {
                let capacity = match method {
                    MethodId::Icae => IcaeCapacity::Icae,
                    MethodId::IcaePlus => IcaeCapacity::IcaePlus,
                    _ => IcaeCapacity::IcaePlusPlus,
                };
                let scope: &[LoraTarget] = match capacity {
                    IcaeCapacity::Icae => &[LoraTarget::Query, LoraTarget::Key],
                    _ => &LoraTarget::ALL,
                };
                Some(Method::Icae {
                    capacity,
                    lora: LoraConfig::new(self.lora_rank, self.lora_alpha, scope)?,
                })
            }
        })
    }

    pub fn named_task(&self) -> NamedTask {
        NamedTask {
            name: self.task_name.clone(),
            config: self.task.clone(),
            seed: self.task_seed,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            shuffled_labels: self.eval.shuffled_labels,
            generation: self.eval.generation,
        }
    }

    pub fn sweep_methods(&self) -> Vec<MethodId> {
        self.sweep.methods.iter().map(|w| w.0).collect()
    }

    pub fn ablate_variants(&self) -> Vec<CrossAttnVariant> {
        self.ablate.variants.iter().map(|w| w.0).collect()
    }
}

/// Parse config text on top of the defaults. Blank lines and `#` comments
/// are ignored; a key may appear once.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = std::collections::BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            key: format!("line {}", i + 1),
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let k = k.trim();
        if !seen.insert(k.to_string()) {
            return Err(Error::Config {
                key: k.into(),
                message: format!("duplicate key on line {}", i + 1),
            });
        }
        cfg.set(k, v.trim())?;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_text();
        let back = parse_config(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
        assert_eq!(c.budgets().unwrap(), Budgets { t: 384, m: 48 });
    }

    #[test]
    fn overrides_and_comments() {
        let c = parse_config("# desk run\nmodel.n_layers = 2   # shallow\n\nmethod = icae_pp\nsweep.ratios = 3, 6\nphase1.clip = none\n").unwrap();
        assert_eq!(c.model.n_layers, 2);
        assert_eq!(c.method.0, MethodId::IcaePp);
        assert_eq!(c.sweep.ratios, vec![3, 6]);
        assert_eq!(c.phases()[1].clip, None);
        let mut d = c.clone();
        d.apply_overrides(["phase1.lr=0.01", "memcom.variant = mqa"]).unwrap();
        assert_eq!(d.phases()[1].peak_lr, 0.01);
        assert_eq!(d.variant.0, CrossAttnVariant::Mqa);
    }

    #[test]
    fn diagnostics_name_the_key() {
        let key = |text: &str| match parse_config(text).and_then(|c| c.validate()) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(key("model.d_modl = 3"), "model.d_modl");
        assert_eq!(key("model.d_model = x"), "model.d_model");
        assert_eq!(key("seed = 1\nseed = 2"), "seed");
        assert_eq!(key("just words"), "line 1");
        assert_eq!(key("method = gpt"), "method");
        assert_eq!(key("task.classes = 500"), "task.classes");
        assert_eq!(key("budget.t = 2000"), "budget.t");
        assert_eq!(key("task.noise = nan"), "task.noise");
        assert_eq!(key("phase2.batch_size = 0"), "phase2.batch_size");
    }

    proptest! {
        #[test]
        fn prop_parser_never_panics(s in "\\PC{0,300}") {
            let _ = parse_config(&s);
        }

        #[test]
        fn prop_numeric_roundtrip(lr in 1e-9f64..1.0, steps in 0u64..1_000_000, layers in 1usize..9) {
            let mut c = RunConfig::default();
            c.phases[1].peak_lr = lr;
            c.phases[1].steps = steps;
            c.model.n_layers = layers;
            prop_assert_eq!(parse_config(&c.to_text()).unwrap(), c);
        }
    }
}
