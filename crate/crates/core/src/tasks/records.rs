//! Versioned text records for tasks and evaluation sets.
//!
//! ```text
//! memcom-task-records 1
//! config classes=2 k_in=3 k_lab=1 noise=0.25
//! prototype 0 5 9 7 : 140
//! prototype 1 4 4 8 : 141
//! query 1 4 6 8 : 141 seed=17
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tasks::{ClassificationTask, PromptSpec, Shot, TaskConfig};

pub const RECORD_VERSION: u32 = 1;
const MAGIC: &str = "memcom-task-records";

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecords {
    pub task: ClassificationTask,
    pub queries: Vec<PromptSpec>,
}

fn ids(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

impl TaskRecords {
    pub fn to_text(&self) -> String {
        let c = &self.task.config;
        let mut s = format!("{MAGIC} {RECORD_VERSION}\n");
        let _ = writeln!(
            s,
            "config classes={} k_in={} k_lab={} noise={}",
            c.classes, c.k_in, c.k_lab, c.noise
        );
        for (i, (p, l)) in self.task.prototypes.iter().zip(&self.task.labels).enumerate() {
            let _ = writeln!(s, "prototype {i} {} : {}", ids(p), ids(l));
        }
        for q in &self.queries {
            let _ = writeln!(
                s,
                "query {} {} : {} seed={}",
                q.query.class,
                ids(&q.query.input),
                ids(&q.query.label),
                q.seed
            );
        }
        s
    }
}

fn corrupt(line: usize, what: impl std::fmt::Display) -> Error {
    Error::Corrupt(format!("task records line {line}: {what}"))
}

fn parse_ids(line: usize, field: &str) -> Result<Vec<usize>> {
    field
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| corrupt(line, format!("bad id {t:?}"))))
        .collect()
}

/// Parse and validate records produced by [`TaskRecords::to_text`].
pub fn parse_task_records(text: &str) -> Result<TaskRecords> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let (n, head) = lines.next().ok_or_else(|| corrupt(0, "empty input"))?;
    let version = head
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| corrupt(n, "missing header"))?
        .parse::<u32>()
        .map_err(|_| corrupt(n, "bad version"))?;
    if version != RECORD_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (n, cfg_line) = lines.next().ok_or_else(|| corrupt(n, "missing config"))?;
    let mut config = TaskConfig::default();
    let body = cfg_line.strip_prefix("config ").ok_or_else(|| corrupt(n, "missing config"))?;
    let mut seen = 0;
    for kv in body.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| corrupt(n, format!("bad field {kv:?}")))?;
        let bad = || corrupt(n, format!("bad value for {k}"));
        match k {
            "classes" => config.classes = v.parse().map_err(|_| bad())?,
            "k_in" => config.k_in = v.parse().map_err(|_| bad())?,
            "k_lab" => config.k_lab = v.parse().map_err(|_| bad())?,
            "noise" => config.noise = v.parse().map_err(|_| bad())?,
            _ => return Err(corrupt(n, format!("unknown field {k:?}"))),
        }
        seen += 1;
    }
    if seen != 4 || !(0.0..=1.0).contains(&config.noise) {
        return Err(corrupt(n, "config needs classes, k_in, k_lab and noise in [0, 1]"));
    }
    let mut prototypes = Vec::new();
    let mut labels = Vec::new();
    let mut queries = Vec::new();
    for (n, line) in lines {
        let (kind, rest) = line.split_once(' ').ok_or_else(|| corrupt(n, "truncated record"))?;
        let (class, rest) = rest.split_once(' ').ok_or_else(|| corrupt(n, "truncated record"))?;
        let class: usize = class.parse().map_err(|_| corrupt(n, "bad class id"))?;
        if class >= config.classes {
            return Err(corrupt(n, format!("class {class} out of range")));
        }
        let (input, rest) = rest.split_once(':').ok_or_else(|| corrupt(n, "missing ':'"))?;
        let input = parse_ids(n, input)?;
        let (label, seed) = match kind {
            "prototype" => (parse_ids(n, rest)?, None),
            "query" => {
                let (l, s) = rest.rsplit_once("seed=").ok_or_else(|| corrupt(n, "missing seed"))?;
                let seed: u64 = s.trim().parse().map_err(|_| corrupt(n, "bad seed"))?;
                (parse_ids(n, l)?, Some(seed))
            }
            _ => return Err(corrupt(n, format!("unknown record kind {kind:?}"))),
        };
        if input.len() != config.k_in || label.len() != config.k_lab {
            return Err(corrupt(n, "record length disagrees with config"));
        }
        match seed {
            None => {
                if class != prototypes.len() {
                    return Err(corrupt(n, "prototypes out of order"));
                }
                prototypes.push(input);
                labels.push(label);
            }
            Some(seed) => queries.push(PromptSpec {
                query: Shot { input, label, class },
                seed,
            }),
        }
    }
    if prototypes.len() != config.classes {
        return Err(corrupt(0, format!("{} prototypes for {} classes", prototypes.len(), config.classes)));
    }
    Ok(TaskRecords {
        task: ClassificationTask {
            config,
            prototypes,
            labels,
        },
        queries,
    })
}
