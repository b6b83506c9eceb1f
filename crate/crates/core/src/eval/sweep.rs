//! Cross-product of methods, compression ratios, tasks and seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate, Artifacts, Budgets, EvalOptions, MethodId};
use crate::compressors::System;
use crate::error::{Error, Result};
use crate::numerics::{Float, Rng};
use crate::tasks::{gen_task, make_eval_set, ClassificationTask, PromptSpec, TaskConfig, Vocab};
use crate::transformer::{ModelConfig, ParamStore};

pub const CSV_HEADER: &str = "method,ratio,task,seed,t,m,accuracy,n_queries";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTask {
    pub name: String,
    pub config: TaskConfig,
    /// Seed of the task definition (prototypes and label names).
    pub seed: u64,
}

impl NamedTask {
    pub fn build(&self, vocab: &Vocab) -> Result<ClassificationTask> {
        gen_task(&self.config, vocab, &mut Rng::new(self.seed))
    }

    /// Evaluation queries for one cell seed.
    pub fn eval_set(&self, task: &ClassificationTask, vocab: &Vocab, per_class: usize, seed: u64) -> Result<Vec<PromptSpec>> {
        make_eval_set(task, vocab, per_class, &mut Rng::new(seed).split(&format!("eval.{}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub methods: Vec<MethodId>,
    pub ratios: Vec<usize>,
    pub t: usize,
    pub tasks: Vec<NamedTask>,
    pub seeds: Vec<u64>,
    pub queries_per_class: usize,
    pub options: EvalOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: MethodId,
    pub ratio: f64,
    pub task: String,
    pub seed: u64,
    pub t: usize,
    pub m: usize,
    /// `None` when the method's artifacts were unavailable.
    pub accuracy: Option<f64>,
    pub correct: usize,
    pub n_queries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub absent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub method: MethodId,
    pub ratio: f64,
    pub task: String,
    /// Seed-averaged accuracy of the method.
    pub accuracy: f64,
    /// Seed-averaged accuracy of the uncompressed baseline.
    pub full: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub metadata: BTreeMap<String, String>,
}

type CellKey = (String, usize, MethodId, u64);

/// Evaluate every (task, ratio, method, seed) cell. `provide` returns the
/// trained compressor for a compressor method at the given budgets and
/// seed, or `None` when it does not exist; such cells are marked absent and
/// the sweep continues.
pub fn run_sweep<S, F>(plan: &SweepPlan, vocab: &Vocab, model: &ModelConfig, target: &ParamStore<S>, mut provide: F) -> Result<SweepResult>
where
    S: Float,
    F: FnMut(MethodId, Budgets, u64) -> Result<Option<System<S>>>,
{
    if plan.methods.is_empty() || plan.ratios.is_empty() || plan.tasks.is_empty() || plan.seeds.is_empty() {
        return Err(Error::Config {
            key: "sweep".into(),
            message: "methods, ratios, tasks and seeds must all be non-empty".into(),
        });
    }
    let mut cells: BTreeMap<CellKey, SweepCell> = BTreeMap::new();
    for named in &plan.tasks {
        let task = named.build(vocab)?;
        for &seed in &plan.seeds {
            let specs = named.eval_set(&task, vocab, plan.queries_per_class, seed)?;
            let mut full_cache: Option<super::EvalOutcome> = None;
            for &ratio in &plan.ratios {
                let budgets = Budgets::from_ratio(plan.t, ratio)?;
                for &method in &plan.methods {
                    let system = match method.compressor() {
                        Some(_) => provide(method, budgets, seed)?,
                        None => None,
                    };
                    let art = Artifacts {
                        model,
                        target,
                        system: system.as_ref(),
                    };
                    let outcome = if method == MethodId::BaselineFull {
                        // Independent of the ratio; evaluated once per seed.
                        match &full_cache {
                            Some(o) => Ok(o.clone()),
                            None => {
                                let o = evaluate(method, art, &task, vocab, &specs, budgets, plan.options)?;
                                full_cache = Some(o.clone());
                                Ok(o)
                            }
                        }
                    } else if method.compressor().is_some() && system.is_none() {
                        Err(format!("no trained {method} at m={}", budgets.m))
                    } else {
                        match evaluate(method, art, &task, vocab, &specs, budgets, plan.options) {
                            Ok(o) => Ok(o),
                            Err(e @ (Error::MissingArtifact(_) | Error::ConfigHashMismatch)) => Err(e.to_string()),
                            Err(e) => return Err(e),
                        }
                    };
                    let cell = match outcome {
                        Ok(o) => SweepCell {
                            method,
                            ratio: budgets.ratio(),
                            task: named.name.clone(),
                            seed,
                            t: budgets.t,
                            m: budgets.m,
                            accuracy: Some(o.accuracy),
                            correct: o.correct,
                            n_queries: o.n_queries,
                            absent: None,
                        },
                        Err(reason) => SweepCell {
                            method,
                            ratio: budgets.ratio(),
                            task: named.name.clone(),
                            seed,
                            t: budgets.t,
                            m: budgets.m,
                            accuracy: None,
                            correct: 0,
                            n_queries: specs.len(),
                            absent: Some(reason),
                        },
                    };
                    cells.insert((named.name.clone(), ratio, method, seed), cell);
                }
            }
        }
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("model_config_hash".into(), crate::training::hex(&model.hash()));
    metadata.insert("target_checksum".into(), crate::training::hex(&target.checksum(|_| true)));
    metadata.insert("t".into(), plan.t.to_string());
    metadata.insert("queries_per_class".into(), plan.queries_per_class.to_string());
    metadata.insert("scoring".into(), if plan.options.generation { "generation" } else { "likelihood" }.into());
    Ok(SweepResult {
        cells: cells.into_values().collect(),
        metadata,
    })
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            let acc = c.accuracy.map_or_else(|| "NA".to_string(), |a| a.to_string());
            let _ = writeln!(out, "{},{:?},{},{},{},{},{},{}", c.method, c.ratio, c.task, c.seed, c.t, c.m, acc, c.n_queries);
        }
        out
    }

    /// One JSON record per cell.
    pub fn to_ndjson(&self) -> String {
        self.cells
            .iter()
            .map(|c| serde_json::to_string(c).expect("plain data") + "\n")
            .collect()
    }

    fn mean_accuracy(&self, method: MethodId, ratio: f64, task: &str) -> Option<f64> {
        let accs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.method == method && c.ratio == ratio && c.task == task)
            .filter_map(|c| c.accuracy)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    fn axes(&self) -> (Vec<MethodId>, Vec<f64>, Vec<String>) {
        let mut methods: Vec<MethodId> = self.cells.iter().map(|c| c.method).collect();
        methods.sort();
        methods.dedup();
        let mut ratios: Vec<f64> = self.cells.iter().map(|c| c.ratio).collect();
        ratios.sort_by(f64::total_cmp);
        ratios.dedup();
        let mut tasks: Vec<String> = self.cells.iter().map(|c| c.task.clone()).collect();
        tasks.sort();
        tasks.dedup();
        (methods, ratios, tasks)
    }

    /// Seed-averaged accuracy minus that of the uncompressed baseline.
    pub fn degradation(&self) -> Vec<Degradation> {
        let (methods, ratios, tasks) = self.axes();
        let mut out = Vec::new();
        for task in &tasks {
            for &ratio in &ratios {
                let full = self.mean_accuracy(MethodId::BaselineFull, ratio, task);
                for &method in &methods {
                    if let Some(accuracy) = self.mean_accuracy(method, ratio, task) {
                        out.push(Degradation {
                            method,
                            ratio,
                            task: task.clone(),
                            accuracy,
                            full,
                            delta: full.map(|f| accuracy - f),
                        });
                    }
                }
            }
        }
        out
    }

    /// Per-task curves: x = ratio, one y series per method (`null` where
    /// absent).
    pub fn plot_data(&self) -> serde_json::Value {
        let (methods, ratios, tasks) = self.axes();
        let per_task: serde_json::Map<String, serde_json::Value> = tasks
            .iter()
            .map(|task| {
                let series: serde_json::Map<String, serde_json::Value> = methods
                    .iter()
                    .map(|&m| {
                        let ys: Vec<Option<f64>> = ratios.iter().map(|&r| self.mean_accuracy(m, r, task)).collect();
                        (m.name().to_string(), serde_json::json!(ys))
                    })
                    .collect();
                (task.clone(), serde_json::json!({ "x": ratios, "series": series }))
            })
            .collect();
        serde_json::Value::Object(per_task)
    }
}
