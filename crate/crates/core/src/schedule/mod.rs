//! Tactics and schedules. A tactic expands into compiler actions (tile,
//! atomic, propagate); a schedule is a list of tactics applied in order, with
//! a report snapshot after each one.
//!
//! Schedule files are JSON lists:
//!
//! ```json
//! [
//!   {"kind": "manual", "name": "BP", "axis": "B", "shardings": {"x": 0}},
//!   {"kind": "manual", "axis": "B", "shardings": {"w*": "REPLICATED", "m_*": "FIRST_DIVISIBLE_DIM"}},
//!   {"kind": "auto", "axes": ["M"], "budget": 64}
//! ]
//! ```

mod auto;

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use wildmatch::WildMatch;

pub use auto::{auto_partition, AutoResult, SearchMode};

use crate::ir::{verify_module, Diagnostic, Mesh, Module, OpKind};
use crate::nest::{NestError, NestProgram};
use crate::rewrite::{Blocked, CompilerAction, Conflict, PropagateReport, RewriteError};
use crate::sim::{estimate, model_flops, CostEstimate, DeviceSpec};
use crate::spmd::{count_collectives, to_device_program, CollectiveCounts, DeviceProgram, FuseOptions};
use crate::tmr::NestOp;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sharding {
    Dim(usize),
    Replicated,
    FirstDivisibleDim,
}

impl Serialize for Sharding {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Sharding::Dim(d) => s.serialize_u64(*d as u64),
            Sharding::Replicated => s.serialize_str("REPLICATED"),
            Sharding::FirstDivisibleDim => s.serialize_str("FIRST_DIVISIBLE_DIM"),
        }
    }
}

impl<'de> Deserialize<'de> for Sharding {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Dim(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Dim(n) => Ok(Sharding::Dim(n)),
            Raw::Name(s) if s == "REPLICATED" => Ok(Sharding::Replicated),
            Raw::Name(s) if s == "FIRST_DIVISIBLE_DIM" => Ok(Sharding::FirstDivisibleDim),
            Raw::Name(s) => Err(serde::de::Error::custom(format!(
                "expected a dim index, \"REPLICATED\" or \"FIRST_DIVISIBLE_DIM\", got \"{s}\""
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManualPartition {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub axis: String,
    /// Selector to sharding, applied in declaration order. Selectors are
    /// argument or tag names and may contain `*` and `?`.
    pub shardings: IndexMap<String, Sharding>,
}

fn default_penalty() -> f64 {
    1.0
}

fn default_exploration() -> f64 {
    1.4
}

fn default_rollout() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutomaticPartition {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub axes: Vec<String>,
    /// Maximum number of candidate evaluations.
    pub budget: usize,
    #[serde(default)]
    pub seed: u64,
    /// Seconds of objective per byte above device memory.
    #[serde(default = "default_penalty")]
    pub memory_penalty: f64,
    #[serde(default = "default_exploration")]
    pub exploration: f64,
    #[serde(default = "default_rollout")]
    pub rollout_depth: usize,
    #[serde(default)]
    pub mode: SearchMode,
}

impl AutomaticPartition {
    pub fn new(axes: &[&str], budget: usize) -> Self {
        Self {
            name: None,
            axes: axes.iter().map(|s| s.to_string()).collect(),
            budget,
            seed: 0,
            memory_penalty: default_penalty(),
            exploration: default_exploration(),
            rollout_depth: default_rollout(),
            mode: SearchMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Tactic {
    Manual(ManualPartition),
    Auto(AutomaticPartition),
}

impl Tactic {
    pub fn manual(name: &str, axis: &str, shardings: &[(&str, Sharding)]) -> Self {
        Tactic::Manual(ManualPartition {
            name: Some(name.to_string()),
            axis: axis.to_string(),
            shardings: shardings.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        })
    }

    pub fn label(&self) -> String {
        match self {
            Tactic::Manual(m) => m.name.clone().unwrap_or_else(|| format!("manual({})", m.axis)),
            Tactic::Auto(a) => a.name.clone().unwrap_or_else(|| format!("auto({})", a.axes.join(","))),
        }
    }
}

pub fn parse_schedule(text: &str) -> Result<Vec<Tactic>, serde_json::Error> {
    serde_json::from_str(text)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TacticError {
    #[error("selector `{0}` matches no argument or tagged value")]
    Selector(String),
    #[error("unknown mesh axis `{0}`")]
    UnknownAxis(String),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("module does not verify:\n{}", fmt_diags(.0))]
    Verify(Vec<Diagnostic>),
    #[error("no mesh given")]
    NoMesh,
    #[error(transparent)]
    Nest(#[from] NestError),
    #[error("tactic `{label}`: {source}")]
    Tactic { label: String, source: TacticError },
}

fn fmt_diags(d: &[Diagnostic]) -> String {
    d.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

/// What one tactic did and what the program costs afterwards.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TacticReport {
    pub index: usize,
    pub label: String,
    pub actions: Vec<CompilerAction>,
    pub conflicts: Vec<Conflict>,
    pub blocked: Vec<Blocked>,
    pub collectives: CollectiveCounts,
    pub cost: CostEstimate,
    /// Loop-form IR after the tactic, with loops fused for reading.
    pub ir: String,
    /// Device-local IR after the tactic.
    pub spmd: String,
}

/// A shardable value and the axes each of its dims can still take.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Shardable {
    pub name: String,
    pub kind: &'static str,
    pub shape: Vec<usize>,
    pub dims: Vec<ShardableDim>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShardableDim {
    pub dim: usize,
    pub size: usize,
    pub legal_axes: Vec<String>,
}

/// Names that tactics may select: arguments, then tags, in program order.
pub fn selectable_names(p: &NestProgram) -> Vec<(String, &'static str)> {
    let mut out: Vec<(String, &'static str)> = p
        .func
        .params()
        .iter()
        .filter_map(|&v| p.func.name(v).map(|n| (n.to_string(), "arg")))
        .collect();
    for n in &p.nests {
        if let NestOp::Tensor(OpKind::Tag { name }) = &n.op {
            if !out.iter().any(|(o, _)| o == name) {
                out.push((name.clone(), "tag"));
            }
        }
    }
    out
}

fn select(p: &NestProgram, selector: &str) -> Result<Vec<String>, TacticError> {
    let names = selectable_names(p);
    let hits: Vec<String> = if names.iter().any(|(n, _)| n == selector) {
        vec![selector.to_string()]
    } else {
        let pat = WildMatch::new(selector);
        names.into_iter().map(|(n, _)| n).filter(|n| pat.matches(n)).collect()
    };
    if hits.is_empty() {
        Err(TacticError::Selector(selector.to_string()))
    } else {
        Ok(hits)
    }
}

/// Applies one action. Returns the propagation report for `Propagate`.
pub fn apply_action(p: &mut NestProgram, a: &CompilerAction) -> Result<Option<PropagateReport>, RewriteError> {
    let find = |p: &NestProgram, v: &str| p.resolve(v).ok_or_else(|| RewriteError::UnknownValue(v.to_string()));
    match a {
        CompilerAction::Tile { value, dim, axis } => {
            let v = find(p, value)?;
            p.tile(v, *dim, axis)?;
            Ok(None)
        }
        CompilerAction::Atomic { value, axis } => {
            let v = find(p, value)?;
            p.atomic(v, axis)?;
            Ok(None)
        }
        CompilerAction::Propagate => Ok(Some(p.propagate())),
    }
}

/// Expands a manual tactic against the current program, applying each
/// action as it goes, and returns the actions excluding the final propagate.
fn expand_manual(p: &mut NestProgram, t: &ManualPartition) -> Result<Vec<CompilerAction>, TacticError> {
    if !p.mesh.contains(&t.axis) {
        return Err(TacticError::UnknownAxis(t.axis.clone()));
    }
    let mut actions = Vec::new();
    for (sel, sh) in &t.shardings {
        for name in select(p, sel)? {
            let action = match sh {
                Sharding::Dim(d) => CompilerAction::Tile {
                    value: name,
                    dim: *d,
                    axis: t.axis.clone(),
                },
                Sharding::Replicated => CompilerAction::Atomic {
                    value: name,
                    axis: t.axis.clone(),
                },
                Sharding::FirstDivisibleDim => {
                    let v = p.resolve(&name).expect("selected names resolve");
                    let rank = p.ty(v).rank();
                    let mut chosen = None;
                    for d in 0..rank {
                        let mut trial = p.clone();
                        match trial.tile(v, d, &t.axis) {
                            Ok(_) => {
                                chosen = Some(d);
                                break;
                            }
                            Err(RewriteError::Divisibility { .. }) => continue,
                            Err(e) => return Err(e.into()),
                        }
                    }
                    match chosen {
                        Some(d) => CompilerAction::Tile {
                            value: name,
                            dim: d,
                            axis: t.axis.clone(),
                        },
                        None => continue,
                    }
                }
            };
            apply_action(p, &action)?;
            actions.push(action);
        }
    }
    Ok(actions)
}

/// Incremental partitioning state: a base module, the tactics applied so
/// far, and a report per tactic. Tactics only ever add loops.
#[derive(Clone, Debug)]
pub struct Partitioner {
    pub base: Module,
    pub state: NestProgram,
    pub spec: DeviceSpec,
    pub log: Vec<Tactic>,
    pub reports: Vec<TacticReport>,
    pub fuse: FuseOptions,
    model_flops: u64,
}

impl Partitioner {
    /// `mesh` overrides the module's own mesh header.
    pub fn new(m: &Module, mesh: Option<Mesh>, spec: DeviceSpec) -> Result<Self, ScheduleError> {
        let mut base = m.clone();
        if let Some(mesh) = mesh {
            base.mesh = Some(mesh);
        }
        if base.mesh.is_none() {
            return Err(ScheduleError::NoMesh);
        }
        let diags = verify_module(&base);
        if !diags.is_empty() {
            return Err(ScheduleError::Verify(diags));
        }
        let state = NestProgram::from_module(&base)?;
        Ok(Self {
            model_flops: model_flops(&base),
            base,
            state,
            spec,
            log: Vec::new(),
            reports: Vec::new(),
            fuse: FuseOptions::default(),
        })
    }

    pub fn module(&self) -> Module {
        self.state.to_module()
    }

    pub fn device_program(&self) -> DeviceProgram {
        to_device_program(&self.module(), &self.fuse).expect("state has a mesh and main")
    }

    pub fn cost(&self) -> (CollectiveCounts, CostEstimate, DeviceProgram) {
        let dp = self.device_program();
        let cost = estimate(&dp.module, &self.spec).with_mfu(
            self.model_flops as f64,
            self.state.mesh.device_count(),
            &self.spec,
        );
        (count_collectives(&dp.module), cost, dp)
    }

    /// Report for the current state without applying anything.
    pub fn snapshot(&self, label: &str, actions: Vec<CompilerAction>, prop: PropagateReport) -> TacticReport {
        let (collectives, cost, dp) = self.cost();
        TacticReport {
            index: self.reports.len(),
            label: label.to_string(),
            actions,
            conflicts: prop.conflicts,
            blocked: prop.blocked,
            collectives,
            cost,
            ir: crate::ir::print_module(&crate::nest::fuse_loops(&self.module())),
            spmd: crate::ir::print_module(&dp.module),
        }
    }

    /// Applies a tactic and propagates. On error the state is unchanged.
    pub fn apply(&mut self, t: &Tactic) -> Result<&TacticReport, ScheduleError> {
        let label = t.label();
        let wrap = |source: TacticError| ScheduleError::Tactic {
            label: label.clone(),
            source,
        };
        let mut next = self.state.clone();
        let mut actions = match t {
            Tactic::Manual(m) => expand_manual(&mut next, m).map_err(wrap)?,
            Tactic::Auto(a) => {
                for ax in &a.axes {
                    if !next.mesh.contains(ax) {
                        return Err(wrap(TacticError::UnknownAxis(ax.clone())));
                    }
                }
                let found = auto_partition(&next, a, &self.spec, &self.fuse);
                let mut acts = Vec::new();
                for act in found.actions {
                    apply_action(&mut next, &act).map_err(|e| wrap(e.into()))?;
                    acts.push(act);
                }
                if acts.last() == Some(&CompilerAction::Propagate) {
                    acts.pop();
                }
                acts
            }
        };
        let prop = if actions.is_empty() {
            PropagateReport::default()
        } else {
            let r = next.propagate();
            actions.push(CompilerAction::Propagate);
            r
        };
        self.state = next;
        self.log.push(t.clone());
        let report = self.snapshot(&label, actions, prop);
        self.reports.push(report);
        Ok(self.reports.last().unwrap())
    }

    /// Every action applied so far, in order.
    pub fn action_log(&self) -> Vec<CompilerAction> {
        self.reports.iter().flat_map(|r| r.actions.iter().cloned()).collect()
    }

    pub fn shardable(&self) -> Vec<Shardable> {
        let p = &self.state;
        let axes: Vec<String> = p.mesh.axis_names().map(str::to_string).collect();
        selectable_names(p)
            .into_iter()
            .map(|(name, kind)| {
                let v = p.resolve(&name).expect("selectable names resolve");
                let shape = p.ty(v).dims.clone();
                let dims = (0..shape.len())
                    .map(|d| ShardableDim {
                        dim: d,
                        size: shape[d],
                        legal_axes: axes.iter().filter(|a| p.clone().tile(v, d, a).is_ok()).cloned().collect(),
                    })
                    .collect();
                Shardable {
                    name,
                    kind,
                    shape,
                    dims,
                }
            })
            .collect()
    }
}

/// Final result of running a whole schedule.
#[derive(Clone, Debug)]
pub struct ScheduleOutcome {
    pub partitioner: Partitioner,
    pub device: DeviceProgram,
}

impl ScheduleOutcome {
    pub fn reports(&self) -> &[TacticReport] {
        &self.partitioner.reports
    }

    pub fn conflicts(&self) -> &[Conflict] {
        self.partitioner.reports.last().map_or(&[], |r| &r.conflicts)
    }
}

impl fmt::Display for TacticReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let acts: Vec<String> = self.actions.iter().map(|a| a.to_string()).collect();
        write!(
            f,
            "[{}] {}: {}; AG={} AR={} RS={} A2A={}; conflicts={}",
            self.index,
            self.label,
            if acts.is_empty() { "no actions".to_string() } else { acts.join("; ") },
            self.collectives.all_gather,
            self.collectives.all_reduce,
            self.collectives.reduce_scatter,
            self.collectives.all_to_all,
            self.conflicts.len()
        )
    }
}

pub fn run_schedule(
    m: &Module,
    mesh: Option<Mesh>,
    schedule: &[Tactic],
    spec: &DeviceSpec,
) -> Result<ScheduleOutcome, ScheduleError> {
    run_schedule_with(m, mesh, schedule, spec, &FuseOptions::default())
}

pub fn run_schedule_with(
    m: &Module,
    mesh: Option<Mesh>,
    schedule: &[Tactic],
    spec: &DeviceSpec,
    fuse: &FuseOptions,
) -> Result<ScheduleOutcome, ScheduleError> {
    let mut p = Partitioner::new(m, mesh, spec.clone())?;
    p.fuse = fuse.clone();
    for t in schedule {
        p.apply(t)?;
    }
    let device = p.device_program();
    Ok(ScheduleOutcome { partitioner: p, device })
}
