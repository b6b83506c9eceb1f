//! Fewer-shots baseline: keep only the shots that fit the memory budget.

use crate::error::{Error, Result};
use crate::tasks::{Shot, Vocab};

/// Pack `shots` round-robin over classes (classes in order of first
/// appearance, each class's shots in their original order) until the next
/// shot would overflow `budget`.
pub fn truncate_baseline(shots: &[Shot], vocab: &Vocab, budget: usize) -> Result<Vec<usize>> {
    let shortest = shots.iter().map(Shot::len).min().unwrap_or(0);
    if shots.is_empty() || budget < shortest {
        return Err(Error::Config {
            key: "budget.m".into(),
            message: format!("budget {budget} cannot hold a single shot"),
        });
    }
    let mut classes: Vec<usize> = Vec::new();
    for s in shots {
        if !classes.contains(&s.class) {
            classes.push(s.class);
        }
    }
    let queues: Vec<Vec<&Shot>> = classes
        .iter()
        .map(|&c| shots.iter().filter(|s| s.class == c).collect())
        .collect();
    let mut out = Vec::with_capacity(budget);
    let mut round = 0;
    'fill: loop {
        let mut any = false;
        for q in &queues {
            if let Some(s) = q.get(round) {
                any = true;
                if out.len() + s.len() > budget {
                    break 'fill;
                }
                out.extend(s.render(vocab));
            }
        }
        if !any {
            break;
        }
        round += 1;
    }
    Ok(out)
}
