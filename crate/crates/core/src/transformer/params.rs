//! Named parameter trees, freeze masks, and binding onto a tape.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Float, Rng, Tape, Tensor, Var};
use crate::transformer::config::ModelConfig;

pub const INIT_STD: f64 = 0.02;

/// Every parameter of one or more stacks, keyed by hierarchical path
/// (`target.layer.2.attn.wq`). Iteration order is lexicographic.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S: Float> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Float> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }
}

impl<S: Float> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<S>) {
        self.tensors.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<S>> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<S>> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor<S>> {
        self.tensors.remove(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Parameters under `prefix.` with the prefix stripped.
    pub fn subtree(&self, prefix: &str) -> ParamStore<S> {
        let p = format!("{prefix}.");
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Insert every parameter of `other` under `prefix.`.
    pub fn graft(&mut self, prefix: &str, other: &ParamStore<S>) {
        for (k, v) in &other.tensors {
            self.tensors.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    pub fn cast<T: Float>(&self) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// SHA-256 over path names, shapes and little-endian bytes of every
    /// parameter accepted by `filter`.
    pub fn checksum(&self, filter: impl Fn(&str) -> bool) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            if !filter(k) {
                continue;
            }
            h.update(k.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bitwise_eq(vb))
    }
}

/// Glob match where `*` spans any run of characters (including dots).
pub fn glob_match(pattern: &str, path: &str) -> bool {
    let (p, s) = (pattern.as_bytes(), path.as_bytes());
    let (mut pi, mut si) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while si < s.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, si));
            pi += 1;
        } else if pi < p.len() && p[pi] == s[si] {
            pi += 1;
            si += 1;
        } else if let Some((sp, ss)) = star {
            pi = sp + 1;
            si = ss + 1;
            star = Some((sp, ss + 1));
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == b'*' {
        pi += 1;
    }
    pi == p.len()
}

/// Patterns selecting the trainable parameters; everything else is frozen.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FreezeMask {
    patterns: Vec<String>,
}

impl FreezeMask {
    pub fn new<I, P>(patterns: I) -> Self
    where
        I: IntoIterator<Item = P>,
        P: Into<String>,
    {
        FreezeMask {
            patterns: patterns.into_iter().map(Into::into).collect(),
        }
    }

    /// All parameters frozen.
    pub fn frozen() -> Self {
        FreezeMask::default()
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }

    pub fn matches(&self, path: &str) -> bool {
        self.patterns.iter().any(|p| glob_match(p, path))
    }

    /// Resolve against a parameter tree. Every pattern must match at least
    /// one parameter and the resolved set must be non-empty.
    pub fn resolve<S: Float>(&self, params: &ParamStore<S>) -> Result<BTreeSet<String>> {
        let mut out = BTreeSet::new();
        for p in &self.patterns {
            let before = out.len();
            let mut hit = false;
            for path in params.paths() {
                if glob_match(p, path) {
                    hit = true;
                    out.insert(path.to_string());
                }
            }
            if !hit {
                return Err(Error::UnmatchedPattern(p.clone()));
            }
            let _ = before;
        }
        if out.is_empty() {
            return Err(Error::EmptyTrainableSet);
        }
        Ok(out)
    }
}

/// The trainable subset of `params` under `mask`, in path order.
pub fn trainable_parameters<'a, S: Float>(
    params: &'a ParamStore<S>,
    mask: &FreezeMask,
) -> Result<Vec<(&'a str, &'a Tensor<S>)>> {
    let set = mask.resolve(params)?;
    Ok(params.iter().filter(|(k, _)| set.contains(*k)).collect())
}

/// Parameters registered on a tape.
pub struct Bound<'t, S: Float> {
    vars: BTreeMap<String, Var<'t, S>>,
}

impl<'t, S: Float> Bound<'t, S> {
    /// Register every parameter; those in `trainable` become gradient leaves.
    pub fn new(tape: &'t Tape<S>, params: &ParamStore<S>, trainable: &BTreeSet<String>) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| {
                let var = tape.leaf_labeled(v.clone(), trainable.contains(k), Some(k.to_string()));
                (k.to_string(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Register every parameter as a constant.
    pub fn frozen(tape: &'t Tape<S>, params: &ParamStore<S>) -> Self {
        Self::new(tape, params, &BTreeSet::new())
    }

    pub fn get(&self, path: &str) -> Result<Var<'t, S>> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    /// Override or add a variable under `path`.
    pub fn insert(&mut self, path: impl Into<String>, var: Var<'t, S>) {
        self.vars.insert(path.into(), var);
    }

    pub fn try_get(&self, path: &str) -> Option<Var<'t, S>> {
        self.vars.get(path).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, S>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Fresh parameters of one decoder stack (paths without a stack prefix).
pub fn init_stack<S: Float>(cfg: &ModelConfig, rng: &mut Rng) -> ParamStore<S> {
    let (d, q, kv, f) = (cfg.d_model, cfg.n_heads * cfg.head_dim, cfg.kv_dim(), cfg.ffn_dim);
    let mut p = ParamStore::new();
    p.insert("embed", rng.normal_tensor(&[cfg.vocab_size, d], INIT_STD));
    for i in 0..cfg.n_layers {
        let l = format!("layer.{i}");
        p.insert(format!("{l}.attn_norm"), Tensor::ones([d]));
        p.insert(format!("{l}.attn.wq"), rng.normal_tensor(&[d, q], INIT_STD));
        p.insert(format!("{l}.attn.wk"), rng.normal_tensor(&[d, kv], INIT_STD));
        p.insert(format!("{l}.attn.wv"), rng.normal_tensor(&[d, kv], INIT_STD));
        p.insert(format!("{l}.attn.wo"), rng.normal_tensor(&[q, d], INIT_STD));
        p.insert(format!("{l}.mlp_norm"), Tensor::ones([d]));
        p.insert(format!("{l}.mlp.gate"), rng.normal_tensor(&[d, f], INIT_STD));
        p.insert(format!("{l}.mlp.up"), rng.normal_tensor(&[d, f], INIT_STD));
        p.insert(format!("{l}.mlp.down"), rng.normal_tensor(&[f, d], INIT_STD));
    }
    p.insert("final_norm", Tensor::ones([d]));
    p
}

/// Closed-form parameter count of one stack.
pub fn stack_param_count(cfg: &ModelConfig) -> usize {
    let (d, q, kv, f) = (cfg.d_model, cfg.n_heads * cfg.head_dim, cfg.kv_dim(), cfg.ffn_dim);
    let layer = d + d * q + 2 * d * kv + q * d + d + 3 * d * f;
    cfg.vocab_size * d + cfg.n_layers * layer + d
}
