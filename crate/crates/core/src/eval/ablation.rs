//! Cross-attention variants trained under one phase-1 budget.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{evaluate, Artifacts, Budgets, EvalOptions, MethodId, NamedTask};
use crate::compressors::{CrossAttnVariant, Method, PayloadTap, System};
use crate::error::{Error, Result};
use crate::numerics::{Float, Rng};
use crate::tasks::Vocab;
use crate::training::{hex, run_phase, PhaseConfig, RunControl, TrainData};
use crate::transformer::{ModelConfig, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    /// Each variant with the seed its compressor is initialized from.
    pub variants: Vec<(CrossAttnVariant, u64)>,
    pub t: usize,
    pub ratio: usize,
    pub phase1: PhaseConfig,
    pub tasks: Vec<NamedTask>,
    pub eval_seed: u64,
    pub queries_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: CrossAttnVariant,
    pub xattn_params: usize,
    pub trainable_params: usize,
    pub final_loss: f64,
    /// One accuracy per task, in plan order.
    pub accuracy: Vec<f64>,
    pub stream_hash: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub tasks: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// Digest of everything that must agree between variants.
fn run_hash(model: &ModelConfig, plan: &AblationPlan, budgets: Budgets, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(model.hash());
    h.update(serde_json::to_vec(&plan.phase1).expect("plain data"));
    h.update(serde_json::to_vec(&plan.tasks).expect("plain data"));
    h.update(serde_json::to_vec(&budgets).expect("plain data"));
    h.update(seed.to_le_bytes());
    h.update(plan.eval_seed.to_le_bytes());
    hex(&h.finalize())
}

pub fn run_ablation<S: Float>(
    plan: &AblationPlan,
    model: &ModelConfig,
    target: &ParamStore<S>,
    data: &TrainData,
    vocab: &Vocab,
) -> Result<AblationTable> {
    let Some(&(_, seed)) = plan.variants.first() else {
        return Err(Error::Config {
            key: "ablate.variants".into(),
            message: "no variants".into(),
        });
    };
    if let Some((v, s)) = plan.variants.iter().find(|(_, s)| *s != seed) {
        return Err(Error::Config {
            key: "ablate.seed".into(),
            message: format!("variant {} uses seed {s}, others {seed}", v.name()),
        });
    }
    if plan.phase1.phase != 1 {
        return Err(Error::Config {
            key: "ablate.phase".into(),
            message: "variants are compared after phase 1".into(),
        });
    }
    let budgets = Budgets::from_ratio(plan.t, plan.ratio)?;
    let tasks = plan
        .tasks
        .iter()
        .map(|n| {
            let task = n.build(vocab)?;
            let specs = n.eval_set(&task, vocab, plan.queries_per_class, plan.eval_seed)?;
            Ok((task, specs))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for &(variant, seed) in &plan.variants {
        let method = Method::MemCom {
            variant,
            tap: PayloadTap::PostResidual,
        };
        let mut sys = System::new(model.clone(), method, budgets.m, target, &mut Rng::new(seed))?;
        let xattn_params = sys
            .params
            .iter()
            .filter(|(k, _)| k.contains(".xattn."))
            .map(|(_, v)| v.numel())
            .sum();
        let (report, _) = run_phase(&mut sys, &plan.phase1, data, None, RunControl::default())?;
        let art = Artifacts {
            model,
            target,
            system: Some(&sys),
        };
        let accuracy = tasks
            .iter()
            .map(|(task, specs)| evaluate_variant(art, task, vocab, specs, budgets))
            .collect::<Result<Vec<f64>>>()?;
        let row = AblationRow {
            variant,
            xattn_params,
            trainable_params: report.trainable_params,
            final_loss: report.records.last().map_or(f64::NAN, |r| r.loss),
            accuracy,
            stream_hash: data.stream_hash(plan.phase1.steps, plan.phase1.batch_size),
            config_hash: run_hash(model, plan, budgets, seed),
        };
        if let Some(first) = rows.first() {
            if first.config_hash != row.config_hash || first.stream_hash != row.stream_hash {
                return Err(Error::Config {
                    key: "ablate".into(),
                    message: format!("variant {} drifted from {}", variant.name(), first.variant.name()),
                });
            }
        }
        rows.push(row);
    }
    Ok(AblationTable {
        tasks: plan.tasks.iter().map(|t| t.name.clone()).collect(),
        rows,
    })
}

fn evaluate_variant<S: Float>(
    art: Artifacts<'_, S>,
    task: &crate::tasks::ClassificationTask,
    vocab: &Vocab,
    specs: &[crate::tasks::PromptSpec],
    budgets: Budgets,
) -> Result<f64> {
    Ok(evaluate(MethodId::MemcomP1, art, task, vocab, specs, budgets, EvalOptions::default())?.accuracy)
}

impl AblationTable {
    /// Markdown table, rows = variants, columns = tasks.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| variant | xattn params |");
        for t in &self.tasks {
            let _ = write!(out, " {t} |");
        }
        out.push_str("\n|---|---|");
        out.push_str(&"---|".repeat(self.tasks.len()));
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "| {} | {} |", r.variant.name(), r.xattn_params);
            for a in &r.accuracy {
                let _ = write!(out, " {:.2} |", 100.0 * a);
            }
            out.push('\n');
        }
        out
    }
}
