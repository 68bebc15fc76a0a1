use super::{ConstValue, Func, Monoid, Op, OpKind, Region, TensorType, Type, ValueId};

/// Incrementally builds a flat tensor function with inferred result types.
pub struct FuncBuilder {
    func: Func,
    ops: Vec<Op>,
}

impl FuncBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            func: Func::new(name),
            ops: Vec::new(),
        }
    }

    pub fn arg(&mut self, name: &str, ty: TensorType) -> ValueId {
        let v = self.func.add_value(Type::Tensor(ty), Some(name.to_string()));
        self.func.body.args.push(v);
        v
    }

    pub fn ty(&self, v: ValueId) -> &TensorType {
        self.func.tensor_ty(v)
    }

    pub fn name(&mut self, v: ValueId, name: &str) -> ValueId {
        self.func.values[v.0 as usize].name = Some(name.to_string());
        v
    }

    pub fn op(&mut self, kind: OpKind, operands: Vec<ValueId>, ty: TensorType) -> ValueId {
        let r = self.func.add_value(Type::Tensor(ty), None);
        self.ops.push(Op {
            kind,
            operands,
            results: vec![r],
        });
        r
    }

    pub fn constant(&mut self, value: f64, ty: TensorType) -> ValueId {
        self.op(OpKind::Constant(ConstValue::Splat(value)), vec![], ty)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (ta, tb) = (self.ty(a), self.ty(b));
        let ty = ta.with_dims(vec![ta.dims[0], tb.dims[1]]);
        self.op(OpKind::Matmul, vec![a, b], ty)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let ty = self.ty(a).clone();
        self.op(OpKind::Add, vec![a, b], ty)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let ty = self.ty(a).clone();
        self.op(OpKind::Mul, vec![a, b], ty)
    }

    pub fn neg(&mut self, a: ValueId) -> ValueId {
        let ty = self.ty(a).clone();
        self.op(OpKind::Neg, vec![a], ty)
    }

    pub fn exp(&mut self, a: ValueId) -> ValueId {
        let ty = self.ty(a).clone();
        self.op(OpKind::Exp, vec![a], ty)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn transpose(&mut self, a: ValueId, perm: Vec<usize>) -> ValueId {
        let t = self.ty(a);
        let ty = t.with_dims(perm.iter().map(|&p| t.dims[p]).collect());
        self.op(OpKind::Transpose { perm }, vec![a], ty)
    }

    /// Rank-2 transpose.
    pub fn t(&mut self, a: ValueId) -> ValueId {
        self.transpose(a, vec![1, 0])
    }

    pub fn reduce(&mut self, a: ValueId, dims: Vec<usize>, monoid: Monoid) -> ValueId {
        let t = self.ty(a);
        let ty = t.with_dims((0..t.rank()).filter(|d| !dims.contains(d)).map(|d| t.dims[d]).collect());
        self.op(OpKind::Reduce { dims, monoid }, vec![a], ty)
    }

    pub fn broadcast(&mut self, a: ValueId, dims: Vec<usize>, out: Vec<usize>) -> ValueId {
        let ty = self.ty(a).with_dims(out);
        self.op(OpKind::Broadcast { dims }, vec![a], ty)
    }

    pub fn reshape(&mut self, a: ValueId, out: Vec<usize>) -> ValueId {
        let ty = self.ty(a).with_dims(out);
        self.op(OpKind::Reshape, vec![a], ty)
    }

    pub fn tag(&mut self, a: ValueId, name: &str) -> ValueId {
        let ty = self.ty(a).clone();
        let v = self.op(OpKind::Tag { name: name.to_string() }, vec![a], ty);
        self.name(v, name)
    }

    pub fn finish(mut self, returns: Vec<ValueId>) -> Func {
        self.func.body = Region {
            args: std::mem::take(&mut self.func.body.args),
            ops: self.ops,
            yields: returns,
        };
        self.func
    }
}
