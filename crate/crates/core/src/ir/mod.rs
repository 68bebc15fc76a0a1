//! The base SSA tensor IR.
//!
//! A [`Module`] holds functions whose bodies are [`Region`]s of [`Op`]s in SSA
//! order. The same op enum carries three layers of operations: plain tensor
//! ops, the `loop`/`slice` partitioning ops, and the device-local collectives
//! produced by SPMD lowering. Which layer is legal at a given point of the
//! pipeline is a verifier concern, not a type-level one.

mod builder;
mod eq;
pub(crate) mod interp;
mod mesh;
mod parse;
mod print;
mod tensor;
pub(crate) mod verify;

pub use builder::FuncBuilder;
pub use eq::{funcs_eq, structurally_eq};
pub use interp::{interpret, interpret_exact, temporal_interpret, InterpError};
pub use mesh::{DeviceCoord, Mesh, MeshError};
pub use parse::{parse_module, ParseError};
pub use print::{print_func, print_module};
pub use tensor::{Tensor, TensorError};
pub use verify::{verify_core, verify_module, Diagnostic};

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElemKind {
    F32,
    I32,
}

impl ElemKind {
    pub fn byte_width(self) -> usize {
        4
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ElemKind::F32 => "f32",
            ElemKind::I32 => "i32",
        }
    }
}

impl fmt::Display for ElemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A ranked tensor type. Rank 0 is a scalar.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorType {
    pub dims: Vec<usize>,
    pub elem: ElemKind,
}

impl TensorType {
    pub fn new(dims: impl Into<Vec<usize>>, elem: ElemKind) -> Self {
        Self {
            dims: dims.into(),
            elem,
        }
    }

    pub fn f32(dims: impl Into<Vec<usize>>) -> Self {
        Self::new(dims, ElemKind::F32)
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn num_elements(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn size_bytes(&self) -> usize {
        self.num_elements() * self.elem.byte_width()
    }

    pub fn with_dims(&self, dims: Vec<usize>) -> Self {
        Self {
            dims,
            elem: self.elem,
        }
    }
}

impl fmt::Display for TensorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("tensor<")?;
        for d in &self.dims {
            write!(f, "{d}x")?;
        }
        write!(f, "{}>", self.elem)
    }
}

/// The type of an SSA value: a tensor, or the index of a `loop` iteration.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Type {
    Tensor(TensorType),
    /// `range<k>`: an iteration index in `0..k`.
    Range(usize),
}

impl Type {
    pub fn as_tensor(&self) -> Option<&TensorType> {
        match self {
            Type::Tensor(t) => Some(t),
            Type::Range(_) => None,
        }
    }
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Type::Tensor(t) => t.fmt(f),
            Type::Range(k) => write!(f, "range<{k}>"),
        }
    }
}

/// Index of a value in its function's value arena.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId(pub u32);

#[derive(Clone, Debug, PartialEq)]
pub struct ValueInfo {
    pub ty: Type,
    /// Source-level name. Purely numeric names are not kept; the printer
    /// renumbers those values.
    pub name: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monoid {
    Sum,
    Max,
}

impl Monoid {
    pub fn identity(self) -> f64 {
        match self {
            Monoid::Sum => 0.0,
            Monoid::Max => f64::NEG_INFINITY,
        }
    }

    pub fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            Monoid::Sum => a + b,
            Monoid::Max => a.max(b),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Monoid::Sum => "sum",
            Monoid::Max => "max",
        }
    }
}

/// Per-result attribute of a `loop`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    /// Concatenate the iteration results along a dimension.
    Tile(usize),
    /// Fold the iteration results with a monoid.
    Sum(Monoid),
    /// Every iteration computes the same value; the body may not use the range.
    Any,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Tile(d) => write!(f, "#tile<{d}>"),
            Action::Sum(Monoid::Sum) => f.write_str("#sum"),
            Action::Sum(m) => write!(f, "#sum<{}>", m.as_str()),
            Action::Any => f.write_str("#any"),
        }
    }
}

/// Mesh axes per tensor dimension, major axis first.
pub type AxesPerDim = Vec<Vec<String>>;

#[derive(Clone, Debug, PartialEq)]
pub enum ConstValue {
    Splat(f64),
    Dense(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Constant(ConstValue),
    Matmul,
    Add,
    Mul,
    Neg,
    Exp,
    /// Result dim `i` is operand dim `perm[i]`.
    Transpose { perm: Vec<usize> },
    Reduce { dims: Vec<usize>, monoid: Monoid },
    /// Target dims are given by the result type.
    Reshape,
    /// Operand dim `i` becomes result dim `dims[i]`; other result dims are new.
    Broadcast { dims: Vec<usize> },
    Tag { name: String },
    Loop {
        axis: String,
        actions: Vec<Action>,
        body: Region,
    },
    /// Operands: the sliced tensor and a range value.
    Slice { dim: usize },
    AllReduce { axes: Vec<String>, monoid: Monoid },
    AllSlice { axes: AxesPerDim },
    AllGather { axes: AxesPerDim },
    AllToAll {
        gather_dim: usize,
        slice_dim: usize,
        axes: Vec<String>,
    },
    ReduceScatter {
        axes: Vec<String>,
        monoid: Monoid,
        slice: AxesPerDim,
    },
}

impl OpKind {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            OpKind::Constant(_) => "constant",
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Neg => "neg",
            OpKind::Exp => "exp",
            OpKind::Transpose { .. } => "transpose",
            OpKind::Reduce { .. } => "reduce",
            OpKind::Reshape => "reshape",
            OpKind::Broadcast { .. } => "broadcast",
            OpKind::Tag { .. } => "tag",
            OpKind::Loop { .. } => "loop",
            OpKind::Slice { .. } => "slice",
            OpKind::AllReduce { .. } => "all_reduce",
            OpKind::AllSlice { .. } => "all_slice",
            OpKind::AllGather { .. } => "all_gather",
            OpKind::AllToAll { .. } => "all_to_all",
            OpKind::ReduceScatter { .. } => "reduce_scatter",
        }
    }

    pub fn is_collective(&self) -> bool {
        matches!(
            self,
            OpKind::AllReduce { .. }
                | OpKind::AllSlice { .. }
                | OpKind::AllGather { .. }
                | OpKind::AllToAll { .. }
                | OpKind::ReduceScatter { .. }
        )
    }

    pub fn is_elementwise(&self) -> bool {
        matches!(self, OpKind::Add | OpKind::Mul | OpKind::Neg | OpKind::Exp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Op {
    pub kind: OpKind,
    pub operands: Vec<ValueId>,
    pub results: Vec<ValueId>,
}

impl Op {
    pub fn body(&self) -> Option<&Region> {
        match &self.kind {
            OpKind::Loop { body, .. } => Some(body),
            _ => None,
        }
    }
}

/// A block of ops with arguments and yielded values. A function body is a
/// region whose arguments are the parameters and whose yields are returned.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Region {
    pub args: Vec<ValueId>,
    pub ops: Vec<Op>,
    pub yields: Vec<ValueId>,
}

impl Region {
    /// Visits every op, including those nested in loop bodies, pre-order.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Op)) {
        for op in &self.ops {
            f(op);
            if let Some(body) = op.body() {
                body.walk(f);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Func {
    pub name: String,
    pub values: Vec<ValueInfo>,
    pub body: Region,
}

impl Func {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            values: Vec::new(),
            body: Region::default(),
        }
    }

    pub fn params(&self) -> &[ValueId] {
        &self.body.args
    }

    pub fn returns(&self) -> &[ValueId] {
        &self.body.yields
    }

    pub fn add_value(&mut self, ty: Type, name: Option<String>) -> ValueId {
        let id = ValueId(self.values.len() as u32);
        self.values.push(ValueInfo { ty, name });
        id
    }

    pub fn info(&self, v: ValueId) -> &ValueInfo {
        &self.values[v.0 as usize]
    }

    pub fn ty(&self, v: ValueId) -> &Type {
        &self.info(v).ty
    }

    /// Panics on a range value; callers use this where the verifier has
    /// already established the value is a tensor.
    pub fn tensor_ty(&self, v: ValueId) -> &TensorType {
        self.ty(v)
            .as_tensor()
            .unwrap_or_else(|| panic!("value {v:?} is not a tensor"))
    }

    pub fn name(&self, v: ValueId) -> Option<&str> {
        self.info(v).name.as_deref()
    }

    pub fn param_types(&self) -> Vec<TensorType> {
        self.params().iter().map(|&v| self.tensor_ty(v).clone()).collect()
    }

    pub fn result_types(&self) -> Vec<TensorType> {
        self.returns().iter().map(|&v| self.tensor_ty(v).clone()).collect()
    }

    /// Looks up a function parameter by name.
    pub fn param_named(&self, name: &str) -> Option<ValueId> {
        self.params().iter().copied().find(|&v| self.name(v) == Some(name))
    }

    pub fn param_index(&self, v: ValueId) -> Option<usize> {
        self.params().iter().position(|&p| p == v)
    }

    /// Finds the result of the `tag` op carrying `name`, at any nesting depth.
    pub fn tagged(&self, name: &str) -> Option<ValueId> {
        let mut found = None;
        self.body.walk(&mut |op| {
            if let OpKind::Tag { name: n } = &op.kind {
                if n == name && found.is_none() {
                    found = Some(op.results[0]);
                }
            }
        });
        found
    }

    pub fn op_count(&self) -> usize {
        let mut n = 0;
        self.body.walk(&mut |_| n += 1);
        n
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Module {
    pub funcs: Vec<Func>,
    pub mesh: Option<Mesh>,
}

impl Module {
    pub fn new(funcs: Vec<Func>) -> Self {
        Self { funcs, mesh: None }
    }

    pub fn with_mesh(mut self, mesh: Mesh) -> Self {
        self.mesh = Some(mesh);
        self
    }

    pub fn func(&self, name: &str) -> Option<&Func> {
        self.funcs.iter().find(|f| f.name == name)
    }

    pub fn func_mut(&mut self, name: &str) -> Option<&mut Func> {
        self.funcs.iter_mut().find(|f| f.name == name)
    }

    /// The partitionable entry point.
    pub fn main(&self) -> Option<&Func> {
        self.func("main")
    }

    pub fn main_mut(&mut self) -> Option<&mut Func> {
        self.func_mut("main")
    }
}
