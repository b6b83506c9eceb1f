//! Adam with decoupled moments, zero weight decay, and the warmup schedule.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};
use crate::transformer::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moments for the trainable parameters only.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S: Float> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<S>>,
    pub second: BTreeMap<String, Tensor<S>>,
}

impl<S: Float> OptimizerState<S> {
    pub fn new(config: AdamConfig, params: &ParamStore<S>, trainable: &BTreeSet<String>) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for p in trainable {
            let shape = params.get(p)?.shape().to_vec();
            first.insert(p.clone(), Tensor::zeros(shape.clone()));
            second.insert(p.clone(), Tensor::zeros(shape));
        }
        Ok(OptimizerState {
            config,
            step: 0,
            first,
            second,
        })
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.first.keys().map(String::as_str)
    }

    /// One update of every tracked parameter with its gradient (missing
    /// gradients count as zero).
    pub fn update(&mut self, params: &mut ParamStore<S>, grads: &BTreeMap<String, Tensor<S>>, lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::from_f64_lossy(c.beta1), S::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let step = S::from_f64_lossy(lr / bc1);
        let inv_bc2 = S::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = S::from_f64_lossy(c.eps);
        let wd = S::from_f64_lossy(lr * c.weight_decay);
        for (path, m) in self.first.iter_mut() {
            let v = self.second.get_mut(path).expect("moments are paired");
            let p = params.get_mut(path)?;
            let zero;
            let g = match grads.get(path) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(p.shape().to_vec());
                    &zero
                }
            };
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", format!("{path}: grad {:?} param {:?}", g.shape(), p.shape())));
            }
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + one_b1 * gi;
                vd[i] = b2 * vd[i] + one_b2 * gi * gi;
                if wd != S::zero() {
                    pd[i] -= wd * pd[i];
                }
                pd[i] -= step * md[i] / (vd[i].sqrt() * inv_bc2 + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak` over `warmup` steps, then constant.
pub fn lr_at(step: u64, peak: f64, warmup: u64) -> f64 {
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<S: Float>(grads: &mut BTreeMap<String, Tensor<S>>, max_norm: Option<f64>) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if let Some(max) = max_norm {
        if norm > max && norm > 0.0 {
            let s = S::from_f64_lossy(max / norm);
            for g in grads.values_mut() {
                for x in g.data_mut() {
                    *x *= s;
                }
            }
        }
    }
    norm
}
