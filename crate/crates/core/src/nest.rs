//! Nest form: the canonical shape of partitioned programs during rewriting.
//!
//! Every top-level op of `main` is one [`Nest`]: a single tensor op (or an
//! identity) wrapped in zero or more loops, outermost first, where each loop
//! level may slice some operands. Tiling and propagation only ever add loop
//! levels or identity nests, so the whole program stays in this form until
//! it is lowered. [`fuse_loops`] merges producer/consumer nests for display.

use std::collections::HashMap;

use crate::ir::{Action, Func, Mesh, Module, Op, OpKind, Region, TensorType, Type, ValueId};
use crate::tmr::NestOp;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NestError {
    #[error("module has no mesh")]
    NoMesh,
    #[error("module has no `main` function")]
    NoMain,
    #[error("`main` is not in nest form: {0}")]
    NotNestForm(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Operand {
    pub value: ValueId,
    /// Per loop level, the dim sliced at that level.
    pub slices: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub axis: String,
    /// One action per nest result.
    pub actions: Vec<Action>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nest {
    pub op: NestOp,
    pub operands: Vec<Operand>,
    pub loops: Vec<Level>,
    pub results: Vec<ValueId>,
}

impl Nest {
    pub fn has_axis(&self, axis: &str) -> bool {
        self.loops.iter().any(|l| l.axis == axis)
    }

    pub fn level_of(&self, axis: &str) -> Option<usize> {
        self.loops.iter().position(|l| l.axis == axis)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NestProgram {
    pub mesh: Mesh,
    /// Value arena and parameters of `main`; its body is not kept in sync.
    pub func: Func,
    pub nests: Vec<Nest>,
    pub returns: Vec<ValueId>,
    /// Functions other than `main`, carried through untouched.
    pub others: Vec<Func>,
}

/// Divides the dims of `t` per `(dim, axis)` steps.
fn divide(mesh: &Mesh, t: &TensorType, steps: impl IntoIterator<Item = (usize, String)>) -> TensorType {
    let mut dims = t.dims.clone();
    for (d, a) in steps {
        dims[d] /= mesh.size(&a).unwrap_or(1);
    }
    t.with_dims(dims)
}

impl NestProgram {
    pub fn from_module(m: &Module) -> Result<Self, NestError> {
        let mesh = m.mesh.clone().ok_or(NestError::NoMesh)?;
        let main = m.main().ok_or(NestError::NoMain)?;
        let mut nests = Vec::new();
        for op in &main.body.ops {
            nests.push(match &op.kind {
                OpKind::Loop { .. } => extract_loop(op)?,
                k if k.is_collective() || matches!(k, OpKind::Slice { .. }) => {
                    return Err(NestError::NotNestForm(format!("top-level `{}`", k.mnemonic())))
                }
                k => Nest {
                    op: NestOp::Tensor(k.clone()),
                    operands: op
                        .operands
                        .iter()
                        .map(|&v| Operand {
                            value: v,
                            slices: vec![],
                        })
                        .collect(),
                    loops: vec![],
                    results: op.results.clone(),
                },
            });
        }
        Ok(Self {
            mesh,
            func: main.clone(),
            nests,
            returns: main.returns().to_vec(),
            others: m.funcs.iter().filter(|f| f.name != "main").cloned().collect(),
        })
    }

    pub fn ty(&self, v: ValueId) -> &TensorType {
        self.func.tensor_ty(v)
    }

    pub fn axis_size(&self, axis: &str) -> usize {
        self.mesh.size(axis).unwrap_or(1)
    }

    pub fn new_value(&mut self, ty: TensorType) -> ValueId {
        self.func.add_value(Type::Tensor(ty), None)
    }

    /// Maps each nest result to `(nest index, result index)`.
    pub fn producers(&self) -> HashMap<ValueId, (usize, usize)> {
        let mut p = HashMap::new();
        for (i, n) in self.nests.iter().enumerate() {
            for (j, &r) in n.results.iter().enumerate() {
                p.insert(r, (i, j));
            }
        }
        p
    }

    /// Every `(nest, operand)` position reading `v`.
    pub fn uses(&self, v: ValueId) -> Vec<(usize, usize)> {
        let mut u = Vec::new();
        for (i, n) in self.nests.iter().enumerate() {
            for (k, o) in n.operands.iter().enumerate() {
                if o.value == v {
                    u.push((i, k));
                }
            }
        }
        u
    }

    /// Per dim, the axes tiling result `j` of nest `n`, major first.
    pub fn result_tiling(&self, n: usize, j: usize) -> Vec<Vec<String>> {
        let nest = &self.nests[n];
        let mut t = vec![Vec::new(); self.ty(nest.results[j]).rank()];
        for l in &nest.loops {
            if let Action::Tile(d) = l.actions[j] {
                t[d].push(l.axis.clone());
            }
        }
        t
    }

    /// Per dim, the axes slicing operand `k` of nest `n`, major first.
    pub fn operand_slicing(&self, n: usize, k: usize) -> Vec<Vec<String>> {
        let nest = &self.nests[n];
        let o = &nest.operands[k];
        let mut s = vec![Vec::new(); self.ty(o.value).rank()];
        for (l, sl) in nest.loops.iter().zip(&o.slices) {
            if let Some(d) = sl {
                s[*d].push(l.axis.clone());
            }
        }
        s
    }

    /// Operand types seen by the innermost body of nest `n`.
    pub fn inner_operand_types(&self, n: usize) -> Vec<TensorType> {
        let nest = &self.nests[n];
        nest.operands
            .iter()
            .map(|o| {
                let steps = nest
                    .loops
                    .iter()
                    .zip(&o.slices)
                    .filter_map(|(l, s)| s.map(|d| (d, l.axis.clone())));
                divide(&self.mesh, self.ty(o.value), steps)
            })
            .collect()
    }

    /// Result types of the loop at `level` (equal to the nest result types
    /// at level 0, and to the innermost body types at `loops.len()`).
    pub fn result_types_at(&self, n: usize, level: usize) -> Vec<TensorType> {
        let nest = &self.nests[n];
        nest.results
            .iter()
            .enumerate()
            .map(|(j, &r)| {
                let steps = nest.loops[..level].iter().filter_map(|l| match l.actions[j] {
                    Action::Tile(d) => Some((d, l.axis.clone())),
                    _ => None,
                });
                divide(&self.mesh, self.ty(r), steps)
            })
            .collect()
    }

    pub fn inner_result_types(&self, n: usize) -> Vec<TensorType> {
        self.result_types_at(n, self.nests[n].loops.len())
    }

    /// Renders back to a module whose `main` holds one op per nest.
    pub fn to_module(&self) -> Module {
        let mut f = self.func.clone();
        let mut ops = Vec::with_capacity(self.nests.len());
        for n in 0..self.nests.len() {
            let nest = &self.nests[n];
            let cur: Vec<ValueId> = nest.operands.iter().map(|o| o.value).collect();
            let (mut body_ops, _) = self.render_level(&mut f, n, 0, cur);
            ops.append(&mut body_ops);
        }
        f.body = Region {
            args: self.func.params().to_vec(),
            ops,
            yields: self.returns.clone(),
        };
        let mut funcs = vec![f];
        funcs.extend(self.others.iter().cloned());
        Module {
            funcs,
            mesh: Some(self.mesh.clone()),
        }
    }

    /// Emits level `l` of nest `n` into `f`, with `cur` the operand values
    /// visible at that level. Returns the ops and the level's result values.
    fn render_level(&self, f: &mut Func, n: usize, l: usize, cur: Vec<ValueId>) -> (Vec<Op>, Vec<ValueId>) {
        let nest = &self.nests[n];
        let results: Vec<ValueId> = if l == 0 {
            nest.results.clone()
        } else {
            self.result_types_at(n, l)
                .into_iter()
                .map(|t| f.add_value(Type::Tensor(t), None))
                .collect()
        };
        if l == nest.loops.len() {
            return match &nest.op {
                NestOp::Identity => (vec![], vec![cur[0]]),
                NestOp::Tensor(kind) => (
                    vec![Op {
                        kind: kind.clone(),
                        operands: cur,
                        results: results.clone(),
                    }],
                    results,
                ),
            };
        }
        let level = &nest.loops[l];
        let k = self.axis_size(&level.axis);
        let r = f.add_value(Type::Range(k), Some(format!("r{}", level.axis)));
        let mut body = Vec::new();
        let mut next = cur.clone();
        for (i, o) in nest.operands.iter().enumerate() {
            if let Some(d) = o.slices[l] {
                let t = f.tensor_ty(cur[i]).clone();
                let st = divide(&self.mesh, &t, [(d, level.axis.clone())]);
                let s = f.add_value(Type::Tensor(st), None);
                body.push(Op {
                    kind: OpKind::Slice { dim: d },
                    operands: vec![cur[i], r],
                    results: vec![s],
                });
                next[i] = s;
            }
        }
        let (mut inner, yields) = self.render_level(f, n, l + 1, next);
        body.append(&mut inner);
        (
            vec![Op {
                kind: OpKind::Loop {
                    axis: level.axis.clone(),
                    actions: level.actions.clone(),
                    body: Region {
                        args: vec![r],
                        ops: body,
                        yields,
                    },
                },
                operands: vec![],
                results: results.clone(),
            }],
            results,
        )
    }
}

#[derive(Clone)]
struct Trace {
    value: ValueId,
    slices: Vec<Option<usize>>,
}

fn extract_loop(top: &Op) -> Result<Nest, NestError> {
    let bad = |m: String| NestError::NotNestForm(m);
    let mut loops = Vec::new();
    let mut traces: HashMap<ValueId, Trace> = HashMap::new();
    let trace = |traces: &HashMap<ValueId, Trace>, v: ValueId, depth: usize| -> Trace {
        let mut t = traces.get(&v).cloned().unwrap_or(Trace {
            value: v,
            slices: vec![],
        });
        t.slices.resize(depth, None);
        t
    };
    let mut op = top;
    loop {
        let OpKind::Loop { axis, actions, body } = &op.kind else {
            unreachable!()
        };
        let depth = loops.len();
        loops.push(Level {
            axis: axis.clone(),
            actions: actions.clone(),
        });
        let r = body.args[0];
        let mut last: Option<&Op> = None;
        for inner in &body.ops {
            if last.is_some() {
                return Err(bad("more than one op in a loop level".into()));
            }
            match &inner.kind {
                OpKind::Slice { dim } => {
                    if inner.operands[1] != r {
                        return Err(bad("slice indexed by an outer range".into()));
                    }
                    let mut t = trace(&traces, inner.operands[0], depth);
                    t.slices.push(Some(*dim));
                    traces.insert(inner.results[0], t);
                }
                _ => last = Some(inner),
            }
        }
        match last {
            None => {
                if op.results.len() != 1 || body.yields.len() != 1 {
                    return Err(bad("identity loop with several results".into()));
                }
                let t = trace(&traces, body.yields[0], depth + 1);
                return Ok(Nest {
                    op: NestOp::Identity,
                    operands: vec![Operand {
                        value: t.value,
                        slices: t.slices,
                    }],
                    loops,
                    results: top.results.clone(),
                });
            }
            Some(inner) => {
                if inner.results != body.yields {
                    return Err(bad("loop level does not yield its op's results".into()));
                }
                if matches!(inner.kind, OpKind::Loop { .. }) {
                    op = inner;
                    continue;
                }
                if inner.kind.is_collective() {
                    return Err(bad(format!("`{}` inside a loop", inner.kind.mnemonic())));
                }
                let n = depth + 1;
                let operands = inner
                    .operands
                    .iter()
                    .map(|&v| {
                        let t = trace(&traces, v, n);
                        Operand {
                            value: t.value,
                            slices: t.slices,
                        }
                    })
                    .collect();
                return Ok(Nest {
                    op: NestOp::Tensor(inner.kind.clone()),
                    operands,
                    loops,
                    results: top.results.clone(),
                });
            }
        }
    }
}

fn replace_uses(r: &mut Region, from: ValueId, to: ValueId) {
    for op in &mut r.ops {
        for o in &mut op.operands {
            if *o == from {
                *o = to;
            }
        }
        if let OpKind::Loop { body, .. } = &mut op.kind {
            replace_uses(body, from, to);
        }
    }
    for y in &mut r.yields {
        if *y == from {
            *y = to;
        }
    }
}

/// Counts uses of `v` anywhere in `r`.
fn count_uses(r: &Region, v: ValueId) -> usize {
    let mut n = r.yields.iter().filter(|&&y| y == v).count();
    for op in &r.ops {
        n += op.operands.iter().filter(|&&o| o == v).count();
        if let Some(b) = op.body() {
            n += count_uses(b, v);
        }
    }
    n
}

/// Tries to fuse top-level loop `p` into loop `c` of `r`.
fn try_fuse(r: &mut Region, p: usize, c: usize) -> bool {
    let (OpKind::Loop { axis: pa, actions: pacts, .. }, OpKind::Loop { axis: ca, body: cbody, .. }) =
        (&r.ops[p].kind, &r.ops[c].kind)
    else {
        return false;
    };
    if pa != ca {
        return false;
    }
    let crange = cbody.args[0];
    let mut slice_ops: Vec<(usize, usize)> = Vec::new();
    for (j, (&res, act)) in r.ops[p].results.iter().zip(pacts).enumerate() {
        let Action::Tile(d) = act else { return false };
        let direct: Vec<usize> = cbody
            .ops
            .iter()
            .enumerate()
            .filter(|(_, o)| {
                matches!(o.kind, OpKind::Slice { dim } if dim == *d) && o.operands == [res, crange]
            })
            .map(|(i, _)| i)
            .collect();
        if direct.is_empty() || count_uses(r, res) != direct.len() {
            return false;
        }
        slice_ops.extend(direct.into_iter().map(|i| (i, j)));
    }
    let pop = r.ops[p].clone();
    let OpKind::Loop { body: mut pb, .. } = pop.kind else { unreachable!() };
    let prange = pb.args[0];
    replace_uses(&mut pb, prange, crange);
    let OpKind::Loop { body: cb, .. } = &mut r.ops[c].kind else { unreachable!() };
    let mut subst = Vec::new();
    let mut kept = Vec::new();
    for (i, o) in std::mem::take(&mut cb.ops).into_iter().enumerate() {
        if let Some(&(_, j)) = slice_ops.iter().find(|(k, _)| *k == i) {
            subst.push((o.results[0], pb.yields[j]));
        } else {
            kept.push(o);
        }
    }
    let mut ops = pb.ops;
    ops.extend(kept);
    cb.ops = ops;
    for (from, to) in subst {
        replace_uses(cb, from, to);
    }
    r.ops.remove(p);
    true
}

fn fuse_region(r: &mut Region) {
    'outer: loop {
        for c in 0..r.ops.len() {
            if !matches!(r.ops[c].kind, OpKind::Loop { .. }) {
                continue;
            }
            for p in (0..c).rev() {
                if matches!(r.ops[p].kind, OpKind::Loop { .. }) && try_fuse(r, p, c) {
                    continue 'outer;
                }
            }
        }
        break;
    }
    for op in &mut r.ops {
        if let OpKind::Loop { body, .. } = &mut op.kind {
            fuse_region(body);
        }
    }
}

/// Merges a loop into a later loop over the same axis when every result of
/// the first is consumed only by same-dim slices at the top of the second.
/// The merged body runs the producer's body and feeds its yields straight
/// into the consumer. Semantics are unchanged.
pub fn fuse_loops(m: &Module) -> Module {
    let mut m = m.clone();
    for f in &mut m.funcs {
        fuse_region(&mut f.body);
    }
    m
}
