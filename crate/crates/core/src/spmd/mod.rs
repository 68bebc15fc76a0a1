//! Lowering of partitioned programs to device-local code with explicit
//! collectives, collective fusion, and a lockstep multi-device interpreter.

mod fuse;
mod interp;
mod localize;

use std::collections::HashMap;

use serde::Serialize;

pub use fuse::{fuse_collectives, fuse_collectives_with, FuseOptions};
pub use interp::{shard, spmd_interpret, unshard, SpmdError};
pub use localize::{localize, Layout, ShardingSpec};

use crate::ir::{Action, Func, Mesh, Module, Op, OpKind, Region, Type, ValueId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LowerError {
    #[error("module has no mesh")]
    NoMesh,
    #[error("module has no `main` function")]
    NoMain,
}

struct Lowerer<'a> {
    src: &'a Func,
    out: Func,
    ops: Vec<Op>,
    map: HashMap<ValueId, ValueId>,
    ranges: HashMap<ValueId, String>,
}

fn axes_on(rank: usize, dim: usize, axis: &str) -> Vec<Vec<String>> {
    let mut v = vec![Vec::new(); rank];
    v[dim].push(axis.to_string());
    v
}

impl Lowerer<'_> {
    fn fresh(&mut self, like: ValueId) -> ValueId {
        let info = self.src.info(like).clone();
        self.out.add_value(info.ty, info.name)
    }

    fn emit(&mut self, kind: OpKind, operands: Vec<ValueId>, like: ValueId) -> ValueId {
        let r = self.fresh(like);
        self.ops.push(Op {
            kind,
            operands,
            results: vec![r],
        });
        r
    }

    fn region(&mut self, r: &Region) {
        for op in &r.ops {
            match &op.kind {
                OpKind::Loop { axis, actions, body } => {
                    for &a in &body.args {
                        self.ranges.insert(a, axis.clone());
                    }
                    self.region(body);
                    for ((&y, act), &res) in body.yields.iter().zip(actions).zip(&op.results) {
                        let inner = self.map[&y];
                        let rank = self.src.tensor_ty(res).rank();
                        let v = match act {
                            Action::Tile(d) => self.emit(
                                OpKind::AllGather {
                                    axes: axes_on(rank, *d, axis),
                                },
                                vec![inner],
                                res,
                            ),
                            Action::Sum(m) => self.emit(
                                OpKind::AllReduce {
                                    axes: vec![axis.clone()],
                                    monoid: *m,
                                },
                                vec![inner],
                                res,
                            ),
                            Action::Any => inner,
                        };
                        self.map.insert(res, v);
                    }
                }
                OpKind::Slice { dim } => {
                    let x = self.map[&op.operands[0]];
                    let axis = self.ranges[&op.operands[1]].clone();
                    let rank = self.src.tensor_ty(op.results[0]).rank();
                    let v = self.emit(
                        OpKind::AllSlice {
                            axes: axes_on(rank, *dim, &axis),
                        },
                        vec![x],
                        op.results[0],
                    );
                    self.map.insert(op.results[0], v);
                }
                kind => {
                    let operands = op.operands.iter().map(|v| self.map[v]).collect();
                    let v = self.emit(kind.clone(), operands, op.results[0]);
                    self.map.insert(op.results[0], v);
                }
            }
        }
    }
}

/// Turns every loop level into collectives: each slice becomes an
/// `all_slice` along the loop's axis and each loop result is gathered,
/// reduced, or passed through according to its action.
pub fn lower(m: &Module) -> Result<Module, LowerError> {
    let mesh = m.mesh.clone().ok_or(LowerError::NoMesh)?;
    let mut funcs = Vec::new();
    for f in &m.funcs {
        let mut l = Lowerer {
            src: f,
            out: Func::new(f.name.clone()),
            ops: Vec::new(),
            map: HashMap::new(),
            ranges: HashMap::new(),
        };
        for &p in f.params() {
            let np = l.fresh(p);
            l.out.body.args.push(np);
            l.map.insert(p, np);
        }
        l.region(&f.body);
        let yields = f.body.yields.iter().map(|v| l.map[v]).collect();
        let mut out = l.out;
        out.body.ops = l.ops;
        out.body.yields = yields;
        funcs.push(out);
    }
    if !funcs.iter().any(|f| f.name == "main") {
        return Err(LowerError::NoMain);
    }
    Ok(Module::new(funcs).with_mesh(mesh))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CollectiveCounts {
    pub all_gather: usize,
    pub all_reduce: usize,
    pub reduce_scatter: usize,
    pub all_to_all: usize,
    pub all_slice: usize,
}

impl CollectiveCounts {
    /// Collectives that move data between devices.
    pub fn communicating(&self) -> usize {
        self.all_gather + self.all_reduce + self.reduce_scatter + self.all_to_all
    }
}

pub fn count_collectives(m: &Module) -> CollectiveCounts {
    let mut c = CollectiveCounts::default();
    for f in &m.funcs {
        f.body.walk(&mut |op| match op.kind {
            OpKind::AllGather { .. } => c.all_gather += 1,
            OpKind::AllReduce { .. } => c.all_reduce += 1,
            OpKind::ReduceScatter { .. } => c.reduce_scatter += 1,
            OpKind::AllToAll { .. } => c.all_to_all += 1,
            OpKind::AllSlice { .. } => c.all_slice += 1,
            _ => {}
        });
    }
    c
}

/// A partitioned program ready to run on each device.
#[derive(Clone, Debug)]
pub struct DeviceProgram {
    pub module: Module,
    pub spec: ShardingSpec,
}

/// Lower, fuse, and localize in one step.
pub fn to_device_program(m: &Module, opts: &FuseOptions) -> Result<DeviceProgram, LowerError> {
    let lowered = lower(m)?;
    let fused = fuse_collectives_with(&lowered, opts);
    let (module, spec) = localize(&fused);
    Ok(DeviceProgram { module, spec })
}

/// Worst relative error of a device program against the reference
/// interpreter over `trials` random inputs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiffReport {
    pub trials: usize,
    pub max_rel_err: f64,
}

pub fn differential_check(
    original: &Module,
    dp: &DeviceProgram,
    trials: usize,
    seed: u64,
) -> Result<DiffReport, SpmdError> {
    use rand::SeedableRng;
    let f = original.main().ok_or(crate::ir::InterpError::NoMain)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let xs: Vec<crate::ir::Tensor> = f
            .param_types()
            .into_iter()
            .map(|t| crate::ir::Tensor::random(t, &mut rng))
            .collect();
        let want = crate::ir::interpret(original, &xs)?;
        let got = spmd_interpret(&dp.module, &dp.spec, &xs)?;
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max(g.rel_err(w));
        }
    }
    Ok(DiffReport {
        trials,
        max_rel_err: worst,
    })
}

pub(crate) fn mesh_of(m: &Module) -> &Mesh {
    m.mesh.as_ref().expect("device program has a mesh")
}

pub(crate) fn tensor_of(f: &Func, v: ValueId) -> crate::ir::TensorType {
    match f.ty(v) {
        Type::Tensor(t) => t.clone(),
        Type::Range(_) => unreachable!("device programs have no ranges"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_module, print_module, verify_module};
    use crate::rewrite::{apply_tile, propagate};

    pub(super) const CHAIN_SRC: &str = "mesh = {B:4, M:2}
func @main(%x: tensor<256x8xf32>, %w1: tensor<8x32xf32>, %w2: tensor<32x16xf32>) -> tensor<256x16xf32> {
  %x1 = matmul(%x, %w1) : tensor<256x32xf32>
  %x2 = matmul(%x1, %w2) : tensor<256x16xf32>
  return %x2
}
";

    #[test]
    fn lowering_emits_slices_and_gathers() {
        let m = parse_module(CHAIN_SRC).unwrap();
        let t = apply_tile(&m, "x", 0, "B").unwrap();
        let (p, _) = propagate(&t).unwrap();
        let l = lower(&p).unwrap();
        assert!(verify_module(&l).is_empty(), "{:?}", verify_module(&l));
        let c = count_collectives(&l);
        assert!(c.all_gather >= 2 && c.all_slice >= 2, "{}", print_module(&l));
        let f = fuse_collectives(&l);
        let c = count_collectives(&f);
        assert_eq!(c.all_gather, 1, "{}", print_module(&f));
        assert_eq!(c.all_reduce, 0);
    }
}
