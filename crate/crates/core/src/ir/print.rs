//! Deterministic printer for the textual IR.
//!
//! Values keep their source names where they have one. Unnamed values are
//! numbered in print order, and a repeated name gets a `_N` suffix, so that
//! printing a parsed printout reproduces it exactly.

use std::collections::{HashMap, HashSet};
use std::fmt::Write;

use super::{AxesPerDim, ConstValue, Func, Module, Op, OpKind, Region, ValueId};

struct Namer<'a> {
    func: &'a Func,
    names: HashMap<ValueId, String>,
    used: HashSet<String>,
    counter: usize,
}

impl<'a> Namer<'a> {
    fn assign(&mut self, v: ValueId, fallback: Option<String>) {
        let base = self.func.name(v).map(str::to_string).or(fallback);
        let name = match base {
            Some(b) => {
                let mut cand = b.clone();
                let mut k = 1;
                while self.used.contains(&cand) {
                    cand = format!("{b}_{k}");
                    k += 1;
                }
                cand
            }
            None => loop {
                let cand = self.counter.to_string();
                self.counter += 1;
                if !self.used.contains(&cand) {
                    break cand;
                }
            },
        };
        self.used.insert(name.clone());
        self.names.insert(v, name);
    }

    fn region(&mut self, r: &Region) {
        for op in &r.ops {
            for &res in &op.results {
                self.assign(res, None);
            }
            if let OpKind::Loop { axis, body, .. } = &op.kind {
                for &a in &body.args {
                    self.assign(a, Some(format!("r{axis}")));
                }
                self.region(body);
            }
        }
    }
}

fn fmt_axes(axes: &[String]) -> String {
    let inner: Vec<String> = axes.iter().map(|a| format!("\"{a}\"")).collect();
    format!("[{}]", inner.join(","))
}

fn fmt_axes_per_dim(a: &AxesPerDim) -> String {
    let inner: Vec<String> = a.iter().map(|d| fmt_axes(d)).collect();
    format!("[{}]", inner.join(","))
}

fn fmt_num(x: f64) -> String {
    format!("{x:?}")
}

fn fmt_usizes(v: &[usize]) -> String {
    let inner: Vec<String> = v.iter().map(|d| d.to_string()).collect();
    format!("[{}]", inner.join(", "))
}

struct Printer<'a> {
    func: &'a Func,
    names: HashMap<ValueId, String>,
    out: String,
}

impl Printer<'_> {
    fn v(&self, v: ValueId) -> String {
        format!("%{}", self.names[&v])
    }

    fn vs(&self, vs: &[ValueId]) -> String {
        vs.iter().map(|&v| self.v(v)).collect::<Vec<_>>().join(", ")
    }

    fn types(&self, vs: &[ValueId]) -> String {
        vs.iter()
            .map(|&v| self.func.ty(v).to_string())
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn line(&mut self, depth: usize, s: &str) {
        for _ in 0..depth {
            self.out.push_str("  ");
        }
        self.out.push_str(s);
        self.out.push('\n');
    }

    fn op(&mut self, depth: usize, op: &Op) {
        let lhs = format!("{} = ", self.vs(&op.results));
        let ty = self.types(&op.results);
        let body = match &op.kind {
            OpKind::Loop {
                axis,
                actions,
                body,
            } => {
                let acts: Vec<String> = actions.iter().map(|a| a.to_string()).collect();
                let arg = body.args[0];
                let head = format!(
                    "{lhs}loop \"{axis}\" [{}] ({}: {}) {{",
                    acts.join(", "),
                    self.v(arg),
                    self.func.ty(arg)
                );
                self.line(depth, &head);
                for inner in &body.ops {
                    self.op(depth + 1, inner);
                }
                let y = format!("yield {}", self.vs(&body.yields));
                self.line(depth + 1, &y);
                self.line(depth, &format!("}} : {ty}"));
                return;
            }
            OpKind::Slice { dim } => format!(
                "slice {dim} {}[{}]",
                self.v(op.operands[0]),
                self.v(op.operands[1])
            ),
            OpKind::AllReduce { axes, monoid } => {
                let m = match monoid {
                    super::Monoid::Sum => String::new(),
                    m => format!("<{}>", m.as_str()),
                };
                format!("all_reduce{m} {} {}", fmt_axes(axes), self.vs(&op.operands))
            }
            OpKind::AllSlice { axes } => {
                format!("all_slice {} {}", fmt_axes_per_dim(axes), self.vs(&op.operands))
            }
            OpKind::AllGather { axes } => {
                format!("all_gather {} {}", fmt_axes_per_dim(axes), self.vs(&op.operands))
            }
            OpKind::AllToAll {
                gather_dim,
                slice_dim,
                axes,
            } => format!(
                "all_to_all {gather_dim}->{slice_dim} {} {}",
                fmt_axes(axes),
                self.vs(&op.operands)
            ),
            OpKind::ReduceScatter {
                axes,
                monoid,
                slice,
            } => {
                let m = match monoid {
                    super::Monoid::Sum => String::new(),
                    m => format!("<{}>", m.as_str()),
                };
                format!(
                    "reduce_scatter{m} {} {} {}",
                    fmt_axes(axes),
                    fmt_axes_per_dim(slice),
                    self.vs(&op.operands)
                )
            }
            kind => {
                let attrs = match kind {
                    OpKind::Constant(ConstValue::Splat(x)) => format!(" {{value = {}}}", fmt_num(*x)),
                    OpKind::Constant(ConstValue::Dense(xs)) => {
                        let inner: Vec<String> = xs.iter().map(|&x| fmt_num(x)).collect();
                        format!(" {{value = [{}]}}", inner.join(", "))
                    }
                    OpKind::Transpose { perm } => format!(" {{perm = {}}}", fmt_usizes(perm)),
                    OpKind::Reduce { dims, monoid } => {
                        format!(" {{dims = {}, monoid = {}}}", fmt_usizes(dims), monoid.as_str())
                    }
                    OpKind::Broadcast { dims } => format!(" {{dims = {}}}", fmt_usizes(dims)),
                    OpKind::Tag { name } => format!(" {{name = \"{name}\"}}"),
                    _ => String::new(),
                };
                format!("{}({}){attrs}", kind.mnemonic(), self.vs(&op.operands))
            }
        };
        self.line(depth, &format!("{lhs}{body} : {ty}"));
    }
}

pub fn print_func(f: &Func) -> String {
    let mut namer = Namer {
        func: f,
        names: HashMap::new(),
        used: HashSet::new(),
        counter: 0,
    };
    for (i, &a) in f.params().iter().enumerate() {
        namer.assign(a, Some(format!("arg{i}")));
    }
    namer.region(&f.body);
    let mut p = Printer {
        func: f,
        names: namer.names,
        out: String::new(),
    };
    let args: Vec<String> = f
        .params()
        .iter()
        .map(|&a| format!("{}: {}", p.v(a), f.ty(a)))
        .collect();
    let results: Vec<String> = f.returns().iter().map(|&r| f.ty(r).to_string()).collect();
    let results = match results.len() {
        1 => results[0].clone(),
        _ => format!("({})", results.join(", ")),
    };
    let mut head = String::new();
    write!(head, "func @{}({}) -> {results} {{", f.name, args.join(", ")).unwrap();
    p.line(0, &head);
    for op in &f.body.ops {
        p.op(1, op);
    }
    let ret = if f.returns().is_empty() {
        "return".to_string()
    } else {
        format!("return {}", p.vs(f.returns()))
    };
    p.line(1, &ret);
    p.line(0, "}");
    p.out
}

pub fn print_module(m: &Module) -> String {
    let mut out = String::new();
    if let Some(mesh) = &m.mesh {
        writeln!(out, "mesh = {mesh}").unwrap();
    }
    for (i, f) in m.funcs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&print_func(f));
    }
    out
}
