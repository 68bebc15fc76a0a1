//! Verifiers. `verify_module` checks SSA scoping and the typing of tensor ops
//! and collectives; `verify_core` checks the `loop`/`slice` rules.

use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::{Action, ConstValue, Func, Mesh, Module, Op, OpKind, Region, TensorType, Type, ValueId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    /// `@func` followed by the op's index path, e.g. `@main op 2.0 (slice)`.
    pub location: String,
    pub rule: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: [{}] {}", self.location, self.rule, self.message)
    }
}

const CORE_RULES: &[&str] = &["mesh", "range", "nesting", "any", "action", "loop", "slice"];

struct Checker<'a> {
    func: &'a Func,
    mesh: Option<&'a Mesh>,
    core: bool,
    out: Vec<Diagnostic>,
    defined: HashSet<ValueId>,
    scopes: Vec<HashSet<ValueId>>,
    /// Enclosing loops: (axis, range arg).
    loops: Vec<(String, ValueId)>,
    path: Vec<usize>,
    current: &'static str,
}

impl<'a> Checker<'a> {
    fn location(&self) -> String {
        if self.path.is_empty() {
            return format!("@{}", self.func.name);
        }
        let p: Vec<String> = self.path.iter().map(|i| i.to_string()).collect();
        format!("@{} op {} ({})", self.func.name, p.join("."), self.current)
    }

    fn diag(&mut self, rule: &str, message: String) {
        let core_rule = CORE_RULES.contains(&rule);
        if core_rule != self.core {
            return;
        }
        let location = self.location();
        self.out.push(Diagnostic {
            location,
            rule: rule.to_string(),
            message,
        });
    }

    fn visible(&self, v: ValueId) -> bool {
        self.scopes.iter().any(|s| s.contains(&v))
    }

    fn define(&mut self, v: ValueId) {
        if (v.0 as usize) >= self.func.values.len() {
            self.diag("ssa", format!("value {} is not in the function", v.0));
            return;
        }
        if !self.defined.insert(v) {
            self.diag("ssa", format!("value {} defined more than once", self.show(v)));
        }
        self.scopes.last_mut().unwrap().insert(v);
    }

    fn show(&self, v: ValueId) -> String {
        match self.func.values.get(v.0 as usize).and_then(|i| i.name.as_deref()) {
            Some(n) => format!("%{n}"),
            None => format!("value {}", v.0),
        }
    }

    fn tensor(&self, v: ValueId) -> Option<&'a TensorType> {
        self.func.values.get(v.0 as usize)?.ty.as_tensor()
    }

    fn region(&mut self, r: &Region) {
        for (i, op) in r.ops.iter().enumerate() {
            self.path.push(i);
            self.current = op.kind.mnemonic();
            self.op(op);
            self.path.pop();
        }
        for &y in &r.yields {
            if !self.visible(y) {
                self.diag("ssa", format!("yielded {} is not defined in scope", self.show(y)));
            } else if self.tensor(y).is_none() {
                self.diag("type", format!("yielded {} is not a tensor", self.show(y)));
            }
        }
    }

    fn op(&mut self, op: &Op) {
        let mut operands_ok = true;
        for (i, &v) in op.operands.iter().enumerate() {
            if (v.0 as usize) >= self.func.values.len() || !self.visible(v) {
                self.diag("ssa", format!("operand {i} ({}) used before definition or out of scope", self.show(v)));
                operands_ok = false;
                continue;
            }
            let is_range = matches!(self.func.ty(v), Type::Range(_));
            let slice_index = matches!(op.kind, OpKind::Slice { .. }) && i == 1;
            if is_range != slice_index {
                let msg = if is_range {
                    format!("range value {} may only index a slice", self.show(v))
                } else {
                    format!("slice index {} must be a range value", self.show(v))
                };
                self.diag("type", msg);
                operands_ok = false;
            }
        }
        if let OpKind::Loop {
            axis,
            actions,
            body,
        } = &op.kind
        {
            self.loop_op(op, axis, actions, body);
        } else if operands_ok {
            self.typing(op);
        }
        for &r in &op.results {
            self.define(r);
            if self.tensor(r).is_none() {
                self.diag("type", format!("result {} must be a tensor", self.show(r)));
            }
        }
    }

    fn loop_op(&mut self, op: &Op, axis: &str, actions: &[Action], body: &Region) {
        if !op.operands.is_empty() {
            self.diag("arity", "loop takes no operands".into());
        }
        let k = match body.args.as_slice() {
            [r] => match self.func.values.get(r.0 as usize).map(|i| &i.ty) {
                Some(Type::Range(k)) => Some(*k),
                _ => {
                    self.diag("type", "loop argument must be a range".into());
                    None
                }
            },
            _ => {
                self.diag("arity", "loop body takes exactly one range argument".into());
                None
            }
        };
        {
            match self.mesh.map(|m| m.size(axis)) {
                None => self.diag("mesh", format!("loop over \"{axis}\" in a module without a mesh")),
                Some(None) => self.diag("mesh", format!("loop axis \"{axis}\" is not in the mesh")),
                Some(Some(sz)) => {
                    if k.is_some_and(|k| k != sz) {
                        self.diag(
                            "range",
                            format!("loop over \"{axis}\" has range<{}> but the axis has size {sz}", k.unwrap()),
                        );
                    }
                }
            }
            if self.loops.iter().any(|(a, _)| a == axis) {
                self.diag("nesting", format!("loop over \"{axis}\" nested inside another loop over \"{axis}\""));
            }
            if actions.len() != op.results.len() || body.yields.len() != op.results.len() {
                self.diag(
                    "loop",
                    format!(
                        "loop has {} actions, {} yields and {} results",
                        actions.len(),
                        body.yields.len(),
                        op.results.len()
                    ),
                );
            }
        }
        self.scopes.push(HashSet::new());
        for &a in &body.args {
            self.define(a);
        }
        let range = body.args.first().copied();
        if let Some(r) = range {
            self.loops.push((axis.to_string(), r));
        }
        self.region(body);
        if range.is_some() {
            self.loops.pop();
        }
        self.scopes.pop();
        for (i, (&act, (&y, &res))) in actions
            .iter()
            .zip(body.yields.iter().zip(&op.results))
            .enumerate()
        {
            let (Some(yt), Some(rt)) = (self.tensor(y), self.tensor(res)) else {
                continue;
            };
            let expect = match act {
                Action::Tile(d) => {
                    if d >= yt.rank() {
                        self.diag("action", format!("result {i}: #tile<{d}> out of range for {yt}"));
                        continue;
                    }
                    let mut dims = yt.dims.clone();
                    dims[d] *= k.unwrap_or(1);
                    yt.with_dims(dims)
                }
                Action::Sum(_) | Action::Any => yt.clone(),
            };
            if k.is_some() && *rt != expect {
                self.diag("loop", format!("result {i} has type {rt}, expected {expect} for {act}"));
            }
        }
        if let (Some(r), true) = (range, actions.contains(&Action::Any)) {
            if uses_value(body, r) {
                self.diag("any", format!("#any loop over \"{axis}\" uses its range argument"));
            }
        }
    }

    fn typing(&mut self, op: &Op) {
        let ops: Vec<&TensorType> = op.operands.iter().filter_map(|&v| self.tensor(v)).collect();
        let res: Vec<&TensorType> = op.results.iter().filter_map(|&v| self.tensor(v)).collect();
        let (n_in, n_out) = match &op.kind {
            OpKind::Constant(_) => (0, 1),
            OpKind::Matmul | OpKind::Add | OpKind::Mul => (2, 1),
            OpKind::Slice { .. } => (1, 1),
            _ => (1, 1),
        };
        let n_in_total = if matches!(op.kind, OpKind::Slice { .. }) { 2 } else { n_in };
        if op.operands.len() != n_in_total || op.results.len() != n_out {
            self.diag(
                "arity",
                format!(
                    "`{}` takes {n_in_total} operands and {n_out} results, got {} and {}",
                    op.kind.mnemonic(),
                    op.operands.len(),
                    op.results.len()
                ),
            );
            return;
        }
        if res.len() != n_out || ops.len() != n_in {
            return;
        }
        let r = res[0];
        let expected: Result<TensorType, String> = match &op.kind {
            OpKind::Constant(c) => match c {
                ConstValue::Dense(xs) if xs.len() != r.num_elements() => {
                    Err(format!("dense constant has {} values for {r}", xs.len()))
                }
                _ => Ok(r.clone()),
            },
            OpKind::Matmul => {
                let (a, b) = (ops[0], ops[1]);
                if a.rank() != 2 || b.rank() != 2 {
                    Err(format!("matmul operands must be rank 2, got {a} and {b}"))
                } else if a.dims[1] != b.dims[0] {
                    Err(format!("matmul contracts dim 1 of {a} with dim 0 of {b}: {} != {}", a.dims[1], b.dims[0]))
                } else if a.elem != b.elem {
                    Err(format!("matmul element kinds differ: {a} and {b}"))
                } else {
                    Ok(a.with_dims(vec![a.dims[0], b.dims[1]]))
                }
            }
            OpKind::Add | OpKind::Mul => {
                if ops[0] != ops[1] {
                    Err(format!("`{}` requires identical operand types, got {} and {}", op.kind.mnemonic(), ops[0], ops[1]))
                } else {
                    Ok(ops[0].clone())
                }
            }
            OpKind::Neg | OpKind::Exp | OpKind::Tag { .. } => Ok(ops[0].clone()),
            OpKind::Transpose { perm } => {
                let x = ops[0];
                let mut seen = vec![false; x.rank()];
                let valid = perm.len() == x.rank()
                    && perm.iter().all(|&p| p < x.rank() && !std::mem::replace(&mut seen[p], true));
                if !valid {
                    Err(format!("perm {perm:?} is not a permutation of rank {}", x.rank()))
                } else {
                    Ok(x.with_dims(perm.iter().map(|&p| x.dims[p]).collect()))
                }
            }
            OpKind::Reduce { dims, .. } => {
                let x = ops[0];
                let distinct = dims.iter().collect::<HashSet<_>>().len() == dims.len();
                if !distinct || dims.iter().any(|&d| d >= x.rank()) {
                    Err(format!("reduce dims {dims:?} must be distinct and below rank {}", x.rank()))
                } else {
                    Ok(x.with_dims(
                        (0..x.rank()).filter(|d| !dims.contains(d)).map(|d| x.dims[d]).collect(),
                    ))
                }
            }
            OpKind::Reshape => {
                let x = ops[0];
                if x.num_elements() != r.num_elements() || x.elem != r.elem {
                    Err(format!("reshape from {x} to {r} changes the element count"))
                } else {
                    Ok(r.clone())
                }
            }
            OpKind::Broadcast { dims } => {
                let x = ops[0];
                let distinct = dims.iter().collect::<HashSet<_>>().len() == dims.len();
                if dims.len() != x.rank() || !distinct || dims.iter().any(|&d| d >= r.rank()) {
                    Err(format!("broadcast dims {dims:?} do not map {x} into {r}"))
                } else if dims.iter().enumerate().any(|(i, &d)| r.dims[d] != x.dims[i]) || x.elem != r.elem {
                    Err(format!("broadcast of {x} along {dims:?} cannot produce {r}"))
                } else {
                    Ok(r.clone())
                }
            }
            OpKind::Slice { dim } => self.slice_type(op, *dim, ops[0]),
            OpKind::AllReduce { axes, .. } => self.axes_ok(axes).map(|_| ops[0].clone()),
            OpKind::AllSlice { axes } => self.resize(ops[0], axes, false),
            OpKind::AllGather { axes } => self.resize(ops[0], axes, true),
            OpKind::ReduceScatter { axes, slice, .. } => {
                self.axes_ok(axes).and_then(|_| self.resize(ops[0], slice, false))
            }
            OpKind::AllToAll {
                gather_dim,
                slice_dim,
                axes,
            } => {
                let x = ops[0];
                if gather_dim == slice_dim || *gather_dim >= x.rank() || *slice_dim >= x.rank() {
                    Err(format!("all_to_all dims {gather_dim}->{slice_dim} invalid for {x}"))
                } else {
                    self.axes_ok(axes).and_then(|n| {
                        if x.dims[*slice_dim] % n != 0 {
                            Err(format!("all_to_all slice dim {slice_dim} of {x} not divisible by {n}"))
                        } else {
                            let mut d = x.dims.clone();
                            d[*gather_dim] *= n;
                            d[*slice_dim] /= n;
                            Ok(x.with_dims(d))
                        }
                    })
                }
            }
            OpKind::Loop { .. } => unreachable!(),
        };
        let rule = if matches!(op.kind, OpKind::Slice { .. }) { "slice" } else { "shape" };
        match expected {
            Err(m) => self.diag(rule, m),
            Ok(t) if t != *r => self.diag(rule, format!("result type {r} does not match inferred {t}")),
            Ok(_) => {}
        }
    }

    fn slice_type(&mut self, op: &Op, dim: usize, x: &TensorType) -> Result<TensorType, String> {
        let r = op.operands[1];
        if !self.loops.iter().any(|(_, a)| *a == r) {
            return Err(format!("slice index {} is not the range of an enclosing loop", self.show(r)));
        }
        let Type::Range(k) = *self.func.ty(r) else {
            return Err("slice index is not a range".into());
        };
        if dim >= x.rank() {
            return Err(format!("slice dim {dim} out of range for {x}"));
        }
        if x.dims[dim] % k != 0 {
            return Err(format!("slice dim {dim} of {x} is not divisible by range<{k}>"));
        }
        let mut d = x.dims.clone();
        d[dim] /= k;
        Ok(x.with_dims(d))
    }

    fn axes_ok(&self, axes: &[String]) -> Result<usize, String> {
        let Some(mesh) = self.mesh else {
            return Err("collective in a module without a mesh".into());
        };
        let mut n = 1;
        let mut seen = HashSet::new();
        for a in axes {
            let s = mesh.size(a).ok_or_else(|| format!("axis \"{a}\" is not in the mesh"))?;
            if !seen.insert(a) {
                return Err(format!("axis \"{a}\" repeated"));
            }
            n *= s;
        }
        Ok(n)
    }

    fn resize(&self, x: &TensorType, axes: &[Vec<String>], grow: bool) -> Result<TensorType, String> {
        if axes.len() != x.rank() {
            return Err(format!("axes per dim has {} entries for {x}", axes.len()));
        }
        let flat: Vec<String> = axes.iter().flatten().cloned().collect();
        self.axes_ok(&flat)?;
        let mut dims = x.dims.clone();
        for (d, a) in axes.iter().enumerate() {
            let n = self.axes_ok(a)?;
            if grow {
                dims[d] *= n;
            } else if dims[d] % n != 0 {
                return Err(format!("dim {d} of {x} not divisible by {n}"));
            } else {
                dims[d] /= n;
            }
        }
        Ok(x.with_dims(dims))
    }
}

/// True if `v` is used anywhere in `r`, including nested bodies.
pub(crate) fn uses_value(r: &Region, v: ValueId) -> bool {
    let mut found = r.yields.contains(&v);
    r.walk(&mut |op| found |= op.operands.contains(&v) || op.body().is_some_and(|b| b.yields.contains(&v)));
    found
}

fn check(m: &Module, core: bool) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if !core && m.funcs.iter().filter(|f| f.name == "main").count() != 1 {
        out.push(Diagnostic {
            location: "module".into(),
            rule: "main".into(),
            message: "module must define exactly one function named `main`".into(),
        });
    }
    for f in &m.funcs {
        let mut c = Checker {
            func: f,
            mesh: m.mesh.as_ref(),
            core,
            out: Vec::new(),
            defined: HashSet::new(),
            scopes: vec![HashSet::new()],
            loops: Vec::new(),
            path: Vec::new(),
            current: "",
        };
        for &a in f.params() {
            c.define(a);
            if c.tensor(a).is_none() {
                c.diag("type", format!("argument {} must be a tensor", c.show(a)));
            }
        }
        c.region(&f.body);
        out.extend(c.out);
    }
    out
}

/// SSA scoping plus the typing of tensor ops and collectives.
pub fn verify_module(m: &Module) -> Vec<Diagnostic> {
    check(m, false)
}

/// Loop and slice invariants: mesh axes, range extents, result types per
/// action, same-axis nesting, `#any` bodies and slice divisibility.
pub fn verify_core(m: &Module) -> Vec<Diagnostic> {
    check(m, true)
}
