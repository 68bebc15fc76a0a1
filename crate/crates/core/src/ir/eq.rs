use std::collections::HashMap;

use super::{Func, Module, Op, OpKind, Region, ValueId};

struct Matcher<'a> {
    a: &'a Func,
    b: &'a Func,
    map: HashMap<ValueId, ValueId>,
}

impl Matcher<'_> {
    fn bind(&mut self, x: ValueId, y: ValueId) -> bool {
        if self.a.ty(x) != self.b.ty(y) {
            return false;
        }
        self.map.insert(x, y);
        true
    }

    fn same(&self, x: &[ValueId], y: &[ValueId]) -> bool {
        x.len() == y.len() && x.iter().zip(y).all(|(p, q)| self.map.get(p) == Some(q))
    }

    fn region(&mut self, x: &Region, y: &Region) -> bool {
        if x.args.len() != y.args.len() || x.ops.len() != y.ops.len() {
            return false;
        }
        for (&p, &q) in x.args.iter().zip(&y.args) {
            if !self.bind(p, q) {
                return false;
            }
        }
        for (p, q) in x.ops.iter().zip(&y.ops) {
            if !self.op(p, q) {
                return false;
            }
        }
        self.same(&x.yields, &y.yields)
    }

    fn op(&mut self, x: &Op, y: &Op) -> bool {
        if !self.same(&x.operands, &y.operands) || x.results.len() != y.results.len() {
            return false;
        }
        let ok = match (&x.kind, &y.kind) {
            (
                OpKind::Loop {
                    axis: a1,
                    actions: c1,
                    body: b1,
                },
                OpKind::Loop {
                    axis: a2,
                    actions: c2,
                    body: b2,
                },
            ) => a1 == a2 && c1 == c2 && self.region(b1, b2),
            (k1, k2) => k1 == k2,
        };
        ok && x.results.iter().zip(&y.results).all(|(&p, &q)| self.bind(p, q))
    }
}

/// Equality up to value renaming: same ops, attributes, types and dataflow.
pub fn funcs_eq(a: &Func, b: &Func) -> bool {
    let mut m = Matcher {
        a,
        b,
        map: HashMap::new(),
    };
    a.name == b.name && m.region(&a.body, &b.body)
}

pub fn structurally_eq(a: &Module, b: &Module) -> bool {
    a.mesh == b.mesh
        && a.funcs.len() == b.funcs.len()
        && a.funcs.iter().zip(&b.funcs).all(|(f, g)| funcs_eq(f, g))
}
