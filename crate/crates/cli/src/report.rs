use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use tilepart::ir::print_module;
use tilepart::rewrite::{Blocked, Conflict};
use tilepart::schedule::{Partitioner, ScheduleOutcome};
use tilepart::spmd::CollectiveCounts;

#[derive(Serialize)]
pub struct Row {
    pub step: usize,
    pub tactic: String,
    #[serde(rename = "AG")]
    pub ag: usize,
    #[serde(rename = "AR")]
    pub ar: usize,
    #[serde(rename = "RS")]
    pub rs: usize,
    #[serde(rename = "A2A")]
    pub a2a: usize,
    pub conflicts: usize,
}

fn row(step: usize, tactic: &str, c: &CollectiveCounts, conflicts: usize) -> Row {
    Row {
        step,
        tactic: tactic.to_string(),
        ag: c.all_gather,
        ar: c.all_reduce,
        rs: c.reduce_scatter,
        a2a: c.all_to_all,
        conflicts,
    }
}

/// Counts before any tactic, then after each one.
pub fn rows(initial: &Partitioner, p: &Partitioner) -> Vec<Row> {
    let (c0, _, _) = initial.cost();
    let mut out = vec![row(0, "(unpartitioned)", &c0, 0)];
    for r in &p.reports {
        out.push(row(r.index + 1, &r.label, &r.collectives, r.conflicts.len()));
    }
    out
}

pub fn table(rows: &[Row]) -> String {
    let w = rows.iter().map(|r| r.tactic.len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = writeln!(s, "{:>4}  {:<w$}  {:>5} {:>5} {:>5} {:>5}  {:>9}", "step", "tactic", "AG", "AR", "RS", "A2A", "conflicts");
    for r in rows {
        let _ = writeln!(
            s,
            "{:>4}  {:<w$}  {:>5} {:>5} {:>5} {:>5}  {:>9}",
            r.step, r.tactic, r.ag, r.ar, r.rs, r.a2a, r.conflicts
        );
    }
    s
}

pub fn print_problems(conflicts: &[Conflict], blocked: &[Blocked]) {
    if !conflicts.is_empty() {
        outln!("\n{} conflict(s) remain:", conflicts.len());
        for c in conflicts {
            outln!("  {c}");
        }
    }
    if !blocked.is_empty() {
        outln!("\n{} blocked tiling(s):", blocked.len());
        for b in blocked {
            outln!("  {} on \"{}\": {}", b.op, b.axis, b.explanation);
        }
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

/// Per tactic `tactic-NN.ir` (loop form), `tactic-NN.spmd.ir` and
/// `tactic-NN.json`, then the final device program and its sharding.
pub fn dump(dir: &Path, out: &ScheduleOutcome) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for r in out.reports() {
        let stem = format!("tactic-{:02}", r.index + 1);
        write(dir, &format!("{stem}.ir"), &r.ir)?;
        write(dir, &format!("{stem}.spmd.ir"), &r.spmd)?;
        write(dir, &format!("{stem}.json"), &(serde_json::to_string_pretty(r)? + "\n"))?;
    }
    write(dir, "final.spmd.ir", &print_module(&out.device.module))?;
    write(dir, "sharding.json", &(serde_json::to_string_pretty(&out.device.spec)? + "\n"))?;
    let (counts, cost, _) = out.partitioner.cost();
    let summary = json!({ "collectives": counts, "cost": cost, "actions": out.partitioner.action_log() });
    write(dir, "summary.json", &(serde_json::to_string_pretty(&summary)? + "\n"))
}
