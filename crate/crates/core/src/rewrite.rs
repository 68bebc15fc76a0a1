//! Compiler actions on nest-form programs: tiling a value along an axis,
//! marking it atomic (replicated), and propagating tilings through the
//! program with the tile-mapping registry.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::ir::{Action, Module, OpKind, ValueId};
use crate::nest::{Level, Nest, NestError, NestProgram, Operand};
use crate::tmr::{entries_for, match_entries, MatchKind, NestOp, TmrEntry};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewriteError {
    #[error("unknown value `{0}`")]
    UnknownValue(String),
    #[error("unknown mesh axis `{0}`")]
    UnknownAxis(String),
    #[error("dim {dim} out of range for `{value}` of rank {rank}")]
    DimOutOfRange { value: String, dim: usize, rank: usize },
    #[error("dim {dim} of `{value}` has local size {size}, not divisible by axis \"{axis}\" of size {k}")]
    Divisibility {
        value: String,
        dim: usize,
        size: usize,
        axis: String,
        k: usize,
    },
    #[error("`{value}` already uses axis \"{axis}\"")]
    AxisReuse { value: String, axis: String },
    #[error(transparent)]
    Nest(#[from] NestError),
}

/// A compiler-level step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum CompilerAction {
    Tile { value: String, dim: usize, axis: String },
    Atomic { value: String, axis: String },
    Propagate,
}

impl fmt::Display for CompilerAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompilerAction::Tile { value, dim, axis } => write!(f, "tile({value}, {dim}, \"{axis}\")"),
            CompilerAction::Atomic { value, axis } => write!(f, "atomic({value}, \"{axis}\")"),
            CompilerAction::Propagate => f.write_str("propagate"),
        }
    }
}

/// How a value is currently partitioned.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TilingContext {
    /// Per dim, the axes tiling it, major first. For a nest result this is
    /// the producer's tiling; for an argument, the slicing shared by all uses.
    pub dims: Vec<Vec<String>>,
    /// Axes over which the producer folds partial results.
    pub sums: Vec<String>,
    /// Axes on which the value is kept replicated by an atomic action.
    pub replicated: Vec<String>,
}

impl TilingContext {
    pub fn uses_axis(&self, axis: &str) -> bool {
        self.dims.iter().flatten().any(|a| a == axis) || self.replicated.iter().any(|a| a == axis)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Conflict {
    pub op: String,
    pub axis: String,
    pub candidates: Vec<TmrEntry>,
    pub explanation: String,
}

impl fmt::Display for Conflict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "conflict at {} on axis \"{}\": {}", self.op, self.axis, self.explanation)?;
        for c in &self.candidates {
            write!(f, "\n    candidate {c}")?;
        }
        Ok(())
    }
}

/// An operand tiled along an axis that its consumer already loops over.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Blocked {
    pub op: String,
    pub axis: String,
    pub operand: usize,
    pub explanation: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PropagateReport {
    pub conflicts: Vec<Conflict>,
    pub blocked: Vec<Blocked>,
    /// Loop levels added and values tiled by inference.
    pub rewrites: usize,
}

fn is_prefix(p: &[String], of: &[String]) -> bool {
    p.len() <= of.len() && p.iter().zip(of).all(|(a, b)| a == b)
}

impl NestProgram {
    /// Resolves a name to an argument, a tagged value, or a named nest result.
    pub fn resolve(&self, name: &str) -> Option<ValueId> {
        if let Some(v) = self.func.param_named(name) {
            return Some(v);
        }
        for n in &self.nests {
            if let NestOp::Tensor(OpKind::Tag { name: t }) = &n.op {
                if t == name {
                    return Some(n.results[0]);
                }
            }
        }
        self.nests
            .iter()
            .flat_map(|n| n.results.iter())
            .copied()
            .find(|&r| self.func.name(r) == Some(name))
    }

    /// Display name of a value. Tiled views are named after their source.
    pub fn label(&self, v: ValueId) -> String {
        if let Some(n) = self.func.name(v) {
            return format!("%{n}");
        }
        let mut root = v;
        while let Some(n) = self.nests.iter().find(|n| n.op == NestOp::Identity && n.results.contains(&root)) {
            root = n.operands[0].value;
        }
        match self.func.name(root) {
            Some(n) if root != v => format!("%{n} (tiled)"),
            _ => format!("value#{}", v.0),
        }
    }

    pub fn nest_label(&self, n: usize) -> String {
        let nest = &self.nests[n];
        let r = nest.results[0];
        match self.func.name(r) {
            Some(name) => format!("%{name} = {} (op {n})", nest.op.mnemonic()),
            None => format!("{} (op {n})", nest.op.mnemonic()),
        }
    }

    /// Per-dim axes left over after cancelling the slicing of operand `k` of
    /// nest `n` against the tiling of its producer. Empty when they cancel.
    pub fn operand_excess(&self, n: usize, k: usize) -> Vec<Vec<String>> {
        let v = self.nests[n].operands[k].value;
        let s = self.operand_slicing(n, k);
        let t = match self.producers().get(&v) {
            Some(&(p, j)) => self.result_tiling(p, j),
            None => vec![Vec::new(); s.len()],
        };
        t.iter()
            .zip(&s)
            .map(|(t, s)| {
                if is_prefix(s, t) {
                    t[s.len()..].to_vec()
                } else {
                    t.clone()
                }
            })
            .collect()
    }

    /// The dim on which operand `k` of nest `n` carries tiling by `axis`
    /// beyond what the nest slices away.
    fn operand_excess_on(&self, n: usize, k: usize, axis: &str) -> Option<usize> {
        let v = self.nests[n].operands[k].value;
        let &(p, j) = self.producers().get(&v)?;
        let t = self.result_tiling(p, j);
        let s = self.operand_slicing(n, k);
        t.iter()
            .zip(&s)
            .position(|(t, s)| is_prefix(s, t) && t.len() > s.len() && t[s.len()] == axis)
    }

    /// The dim on which some consumer slices result `j` of nest `n` by `axis`
    /// beyond the result's tiling; `Err` when consumers disagree.
    fn result_excess_on(&self, n: usize, j: usize, axis: &str) -> Result<Option<usize>, ()> {
        let r = self.nests[n].results[j];
        let t = self.result_tiling(n, j);
        let mut found: Option<usize> = None;
        for (c, k) in self.uses(r) {
            let s = self.operand_slicing(c, k);
            for (d, (t, s)) in t.iter().zip(&s).enumerate() {
                if is_prefix(t, s) && s.len() > t.len() && s[t.len()] == axis {
                    match found {
                        Some(e) if e != d => return Err(()),
                        _ => found = Some(d),
                    }
                }
            }
        }
        Ok(found)
    }

    /// Slicing shared by every use of `v`, as `(axis, dim)` in level order.
    fn common_use_slicing(&self, v: ValueId) -> Vec<(String, usize)> {
        let mut common: Option<Vec<(String, usize)>> = None;
        for (c, k) in self.uses(v) {
            let nest = &self.nests[c];
            let seq: Vec<(String, usize)> = nest
                .loops
                .iter()
                .zip(&nest.operands[k].slices)
                .filter_map(|(l, s)| s.map(|d| (l.axis.clone(), d)))
                .collect();
            common = Some(match common {
                None => seq,
                Some(prev) => prev.into_iter().zip(seq).take_while(|(a, b)| a == b).map(|(a, _)| a).collect(),
            });
        }
        if self.returns.contains(&v) {
            return Vec::new();
        }
        common.unwrap_or_default()
    }

    pub fn tiling_context(&self, v: ValueId) -> TilingContext {
        let rank = self.ty(v).rank();
        let mut ctx = TilingContext {
            dims: vec![Vec::new(); rank],
            ..Default::default()
        };
        match self.producers().get(&v) {
            Some(&(p, j)) => {
                ctx.dims = self.result_tiling(p, j);
                for l in &self.nests[p].loops {
                    match l.actions[j] {
                        Action::Sum(_) => ctx.sums.push(l.axis.clone()),
                        Action::Any => ctx.replicated.push(l.axis.clone()),
                        Action::Tile(_) => {}
                    }
                }
            }
            None => {
                for (a, d) in self.common_use_slicing(v) {
                    ctx.dims[d].push(a);
                }
            }
        }
        for (c, _) in self.uses(v) {
            let n = &self.nests[c];
            if n.op == NestOp::Identity {
                for l in &n.loops {
                    if l.actions[0] == Action::Any && !ctx.replicated.contains(&l.axis) {
                        ctx.replicated.push(l.axis.clone());
                    }
                }
            }
        }
        ctx
    }

    fn check_axis(&self, axis: &str) -> Result<usize, RewriteError> {
        self.mesh.size(axis).ok_or_else(|| RewriteError::UnknownAxis(axis.to_string()))
    }

    fn insert_wrapper(&mut self, v: ValueId, nest_loops: Vec<Level>, slices: Vec<Option<usize>>) -> usize {
        let uses = self.uses(v);
        let pos = uses
            .iter()
            .map(|&(c, _)| c)
            .min()
            .unwrap_or_else(|| match self.producers().get(&v) {
                Some(&(p, _)) => p + 1,
                None => self.nests.len(),
            });
        let nv = self.new_value(self.ty(v).clone());
        for (c, k) in uses {
            self.nests[c].operands[k].value = nv;
        }
        for r in &mut self.returns {
            if *r == v {
                *r = nv;
            }
        }
        self.nests.insert(
            pos,
            Nest {
                op: NestOp::Identity,
                operands: vec![Operand { value: v, slices }],
                loops: nest_loops,
                results: vec![nv],
            },
        );
        pos
    }

    /// Tiles `v` along `axis` on `dim`. The replacement nest re-slices along
    /// the slicing all uses already share, then along the new axis, and takes
    /// over every use of `v`. Returns the index of the new nest.
    pub fn tile(&mut self, v: ValueId, dim: usize, axis: &str) -> Result<usize, RewriteError> {
        let k = self.check_axis(axis)?;
        let ty = self.ty(v).clone();
        let label = self.label(v);
        if dim >= ty.rank() {
            return Err(RewriteError::DimOutOfRange {
                value: label,
                dim,
                rank: ty.rank(),
            });
        }
        let ctx = self.tiling_context(v);
        if ctx.uses_axis(axis) {
            return Err(RewriteError::AxisReuse {
                value: label,
                axis: axis.to_string(),
            });
        }
        let common = self.common_use_slicing(v);
        if common.iter().any(|(a, _)| a == axis) {
            return Err(RewriteError::AxisReuse {
                value: label,
                axis: axis.to_string(),
            });
        }
        let mut size = ty.dims[dim];
        for (a, d) in &common {
            if *d == dim {
                size /= self.axis_size(a);
            }
        }
        if size % k != 0 {
            return Err(RewriteError::Divisibility {
                value: label,
                dim,
                size,
                axis: axis.to_string(),
                k,
            });
        }
        let mut loops: Vec<Level> = common
            .iter()
            .map(|(a, d)| Level {
                axis: a.clone(),
                actions: vec![Action::Tile(*d)],
            })
            .collect();
        let mut slices: Vec<Option<usize>> = common.iter().map(|(_, d)| Some(*d)).collect();
        loops.push(Level {
            axis: axis.to_string(),
            actions: vec![Action::Tile(dim)],
        });
        slices.push(Some(dim));
        Ok(self.insert_wrapper(v, loops, slices))
    }

    /// Keeps `v` replicated along `axis`: its uses now read it through a
    /// `#any` loop, which blocks propagation along that axis.
    pub fn atomic(&mut self, v: ValueId, axis: &str) -> Result<usize, RewriteError> {
        self.check_axis(axis)?;
        let ctx = self.tiling_context(v);
        if ctx.uses_axis(axis) {
            return Err(RewriteError::AxisReuse {
                value: self.label(v),
                axis: axis.to_string(),
            });
        }
        Ok(self.insert_wrapper(
            v,
            vec![Level {
                axis: axis.to_string(),
                actions: vec![Action::Any],
            }],
            vec![None],
        ))
    }

    fn entries(&self, n: usize, axis: &str) -> Vec<TmrEntry> {
        let ops = self.inner_operand_types(n);
        let res = self.inner_result_types(n);
        entries_for(&self.nests[n].op, &ops, &res[0], self.axis_size(axis))
    }

    fn add_level(&mut self, n: usize, axis: &str, e: &TmrEntry) {
        let nest = &mut self.nests[n];
        nest.loops.push(Level {
            axis: axis.to_string(),
            actions: e.results.clone(),
        });
        for (o, s) in nest.operands.iter_mut().zip(&e.operands) {
            o.slices.push(*s);
        }
    }

    /// Whether inference may tile `v` along `axis`.
    fn inferable(&self, mut v: ValueId, axis: &str) -> bool {
        let producers = self.producers();
        loop {
            let Some(&(p, j)) = producers.get(&v) else {
                return true;
            };
            let nest = &self.nests[p];
            if let Some(l) = nest.level_of(axis) {
                return matches!(nest.loops[l].actions[j], Action::Sum(_));
            }
            if nest.op != NestOp::Identity {
                return true;
            }
            v = nest.operands[0].value;
        }
    }

    fn forward(&mut self, n: usize, report: &mut PropagateReport) -> (bool, usize) {
        let mut n = n;
        let mut changed = false;
        let axes: Vec<String> = self.mesh.axis_names().map(str::to_string).collect();
        for axis in &axes {
            let nops = self.nests[n].operands.len();
            if self.nests[n].has_axis(axis) {
                for k in 0..nops {
                    if self.operand_excess_on(n, k, axis).is_some() {
                        let v = self.nests[n].operands[k].value;
                        report.blocked.push(Blocked {
                            op: self.nest_label(n),
                            axis: axis.clone(),
                            operand: k,
                            explanation: format!(
                                "operand {k} ({}) is tiled on \"{axis}\" but the op already loops over \"{axis}\"",
                                self.label(v)
                            ),
                        });
                    }
                }
                continue;
            }
            let mut inferred = false;
            loop {
                let ctx: Vec<Option<usize>> = (0..nops).map(|k| self.operand_excess_on(n, k, axis)).collect();
                if ctx.iter().all(Option::is_none) {
                    break;
                }
                let entries = self.entries(n, axis);
                let matches = match_entries(&entries, &ctx, &vec![None; self.nests[n].results.len()]);
                let full: Vec<&TmrEntry> = matches
                    .iter()
                    .filter(|m| m.kind == MatchKind::Full)
                    .map(|m| &m.entry)
                    .collect();
                if full.len() >= 2 {
                    report.conflicts.push(Conflict {
                        op: self.nest_label(n),
                        axis: axis.clone(),
                        candidates: full.into_iter().cloned().collect(),
                        explanation: format!("operand tilings {} match several registry entries", fmt_ctx(&ctx)),
                    });
                    break;
                }
                if let Some(&e) = full.first() {
                    let e = e.clone();
                    let mut disagree = None;
                    for j in 0..self.nests[n].results.len() {
                        if let Ok(Some(d)) = self.result_excess_on(n, j, axis) {
                            if e.results[j] != Action::Tile(d) {
                                disagree = Some(d);
                            }
                        }
                    }
                    if let Some(d) = disagree {
                        let back = TmrEntry {
                            operands: vec![],
                            results: vec![Action::Tile(d)],
                        };
                        report.conflicts.push(Conflict {
                            op: self.nest_label(n),
                            axis: axis.clone(),
                            candidates: vec![e, back],
                            explanation: format!(
                                "operands call for the first entry but consumers slice the result on dim {d}"
                            ),
                        });
                        break;
                    }
                    self.add_level(n, axis, &e);
                    report.rewrites += 1;
                    changed = true;
                    break;
                }
                if inferred {
                    break;
                }
                let nest = &self.nests[n];
                let pick = matches.iter().find_map(|m| match &m.kind {
                    MatchKind::Partial { missing }
                        if missing.iter().all(|&i| self.inferable(nest.operands[i].value, axis)) =>
                    {
                        Some((m.entry.clone(), missing.clone()))
                    }
                    _ => None,
                });
                let Some((e, missing)) = pick else { break };
                let mut done: Vec<ValueId> = Vec::new();
                let mut ok = true;
                for i in missing {
                    let v = self.nests[n].operands[i].value;
                    if done.contains(&v) {
                        continue;
                    }
                    done.push(v);
                    let d = e.operands[i].expect("missing operands are tiled by the entry");
                    match self.tile(v, d, axis) {
                        Ok(pos) => {
                            report.rewrites += 1;
                            if pos <= n {
                                n += 1;
                            }
                        }
                        Err(_) => {
                            ok = false;
                            break;
                        }
                    }
                }
                changed = true;
                inferred = true;
                if !ok {
                    break;
                }
            }
        }
        (changed, n)
    }

    fn backward(&mut self, n: usize, report: &mut PropagateReport) -> bool {
        let mut changed = false;
        let axes: Vec<String> = self.mesh.axis_names().map(str::to_string).collect();
        for axis in &axes {
            if self.nests[n].has_axis(axis) {
                continue;
            }
            let nres = self.nests[n].results.len();
            let rctx: Vec<Option<Action>> = (0..nres)
                .map(|j| self.result_excess_on(n, j, axis).ok().flatten().map(Action::Tile))
                .collect();
            if rctx.iter().all(Option::is_none) {
                continue;
            }
            let entries = self.entries(n, axis);
            let nops = self.nests[n].operands.len();
            let matches = match_entries(&entries, &vec![None; nops], &rctx);
            match matches.as_slice() {
                [] => {}
                [m] => {
                    let e = m.entry.clone();
                    self.add_level(n, axis, &e);
                    report.rewrites += 1;
                    changed = true;
                }
                many => report.conflicts.push(Conflict {
                    op: self.nest_label(n),
                    axis: axis.clone(),
                    candidates: many.iter().map(|m| m.entry.clone()).collect(),
                    explanation: "consumer slicing matches several registry entries".to_string(),
                }),
            }
        }
        changed
    }

    /// Runs forward then backward passes in program order until nothing
    /// changes. Conflicts and blocked operands are those of the final pass.
    pub fn propagate(&mut self) -> PropagateReport {
        let mut total = 0;
        loop {
            let mut report = PropagateReport::default();
            let mut changed = false;
            let mut n = 0;
            while n < self.nests.len() {
                let (c, at) = self.forward(n, &mut report);
                changed |= c;
                n = at + 1;
            }
            for n in 0..self.nests.len() {
                changed |= self.backward(n, &mut report);
            }
            total += report.rewrites;
            if !changed {
                report.rewrites = total;
                dedupe(&mut report);
                return report;
            }
        }
    }
}

fn dedupe(r: &mut PropagateReport) {
    let mut seen = BTreeMap::new();
    r.conflicts.retain(|c| seen.insert((c.op.clone(), c.axis.clone()), ()).is_none());
    let mut seen = BTreeMap::new();
    r.blocked
        .retain(|b| seen.insert((b.op.clone(), b.axis.clone(), b.operand), ()).is_none());
}

fn fmt_ctx(ctx: &[Option<usize>]) -> String {
    let parts: Vec<String> = ctx
        .iter()
        .map(|c| match c {
            Some(d) => format!("tile<{d}>"),
            None => "⊥".into(),
        })
        .collect();
    format!("({})", parts.join(", "))
}

fn with_program<T>(
    m: &Module,
    f: impl FnOnce(&mut NestProgram) -> Result<T, RewriteError>,
) -> Result<(Module, T), RewriteError> {
    let mut p = NestProgram::from_module(m)?;
    let t = f(&mut p)?;
    Ok((p.to_module(), t))
}

fn lookup(p: &NestProgram, value: &str) -> Result<ValueId, RewriteError> {
    p.resolve(value).ok_or_else(|| RewriteError::UnknownValue(value.to_string()))
}

/// Tiles the value named `value` (argument, tag, or named result).
pub fn apply_tile(m: &Module, value: &str, dim: usize, axis: &str) -> Result<Module, RewriteError> {
    with_program(m, |p| {
        let v = lookup(p, value)?;
        p.tile(v, dim, axis)
    })
    .map(|(m, _)| m)
}

pub fn apply_atomic(m: &Module, value: &str, axis: &str) -> Result<Module, RewriteError> {
    with_program(m, |p| {
        let v = lookup(p, value)?;
        p.atomic(v, axis)
    })
    .map(|(m, _)| m)
}

pub fn excess_analysis(m: &Module, value: &str) -> Result<TilingContext, RewriteError> {
    let p = NestProgram::from_module(m)?;
    let v = lookup(&p, value)?;
    Ok(p.tiling_context(v))
}

/// Propagation on a nest-form module. The result is again in nest form;
/// use [`crate::nest::fuse_loops`] for the compact presentation.
pub fn propagate(m: &Module) -> Result<(Module, PropagateReport), RewriteError> {
    with_program(m, |p| Ok(p.propagate()))
}
