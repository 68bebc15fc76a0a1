use std::collections::{HashMap, HashSet};

use crate::ir::{Func, Mesh, Module, Op, OpKind, TensorType, Type, ValueId};

#[derive(Clone, Debug, Default)]
pub struct FuseOptions {
    /// Drops the first `all_reduce` of `main`. Produces a wrong program on
    /// purpose, for exercising divergence detection.
    #[doc(hidden)]
    pub drop_first_all_reduce: bool,
}

pub fn fuse_collectives(m: &Module) -> Module {
    fuse_collectives_with(m, &FuseOptions::default())
}

/// Simplifies collective chains in a lowered module: merges consecutive
/// gathers and slices, cancels a slice against the gather it follows, turns
/// gather-then-slice on different dims into `all_to_all`, and moves slices
/// ahead of reductions (forming `reduce_scatter` where the slice axes are
/// reduced). Finishes with common-subexpression and dead-code elimination.
pub fn fuse_collectives_with(m: &Module, opts: &FuseOptions) -> Module {
    let Some(mesh) = m.mesh.clone() else {
        return m.clone();
    };
    let mut out = m.clone();
    for f in &mut out.funcs {
        let mut fz = Fuser { f, mesh: &mesh };
        while fz.step() {
            fz.dce();
        }
        fz.cse();
        fz.dce();
        if opts.drop_first_all_reduce && fz.f.name == "main" {
            if let Some(i) = fz.f.body.ops.iter().position(|o| matches!(o.kind, OpKind::AllReduce { .. })) {
                let op = fz.f.body.ops.remove(i);
                fz.substitute(op.results[0], op.operands[0]);
            }
        }
    }
    out
}

struct Fuser<'a> {
    f: &'a mut Func,
    mesh: &'a Mesh,
}

fn trivial(kind: &OpKind) -> bool {
    match kind {
        OpKind::AllGather { axes } | OpKind::AllSlice { axes } => axes.iter().all(Vec::is_empty),
        OpKind::AllReduce { axes, .. } => axes.is_empty(),
        OpKind::AllToAll { axes, .. } => axes.is_empty(),
        OpKind::ReduceScatter { axes, slice, .. } => axes.is_empty() && slice.iter().all(Vec::is_empty),
        _ => false,
    }
}

fn all_axes(per_dim: &[Vec<String>]) -> HashSet<&str> {
    per_dim.iter().flatten().map(String::as_str).collect()
}

impl Fuser<'_> {
    fn substitute(&mut self, old: ValueId, new: ValueId) {
        for op in &mut self.f.body.ops {
            for v in &mut op.operands {
                if *v == old {
                    *v = new;
                }
            }
        }
        for v in &mut self.f.body.yields {
            if *v == old {
                *v = new;
            }
        }
    }

    fn scaled(&self, ty: &TensorType, axes: &[Vec<String>], grow: bool) -> TensorType {
        let dims = ty
            .dims
            .iter()
            .zip(axes)
            .map(|(&d, a)| {
                let g = self.mesh.group_size(a);
                if grow {
                    d * g
                } else {
                    d / g
                }
            })
            .collect();
        ty.with_dims(dims)
    }

    fn tty(&self, v: ValueId) -> TensorType {
        self.f.tensor_ty(v).clone()
    }

    /// Inserts `kind(x)` before op `at` and returns its result.
    fn insert(&mut self, at: usize, kind: OpKind, x: ValueId, ty: TensorType) -> ValueId {
        let r = self.f.add_value(Type::Tensor(ty), None);
        self.f.body.ops.insert(
            at,
            Op {
                kind,
                operands: vec![x],
                results: vec![r],
            },
        );
        r
    }

    fn set(&mut self, at: usize, kind: OpKind, x: ValueId) {
        let op = &mut self.f.body.ops[at];
        op.kind = kind;
        op.operands = vec![x];
    }

    fn step(&mut self) -> bool {
        let ops = &self.f.body.ops;
        let mut def: HashMap<ValueId, usize> = HashMap::new();
        let mut uses: HashMap<ValueId, usize> = HashMap::new();
        for (i, op) in ops.iter().enumerate() {
            for &r in &op.results {
                def.insert(r, i);
            }
            for &v in &op.operands {
                *uses.entry(v).or_default() += 1;
            }
        }
        for &v in &self.f.body.yields {
            *uses.entry(v).or_default() += 1;
        }
        for i in 0..ops.len() {
            let op = &self.f.body.ops[i];
            if trivial(&op.kind) {
                let (r, x) = (op.results[0], op.operands[0]);
                self.f.body.ops.remove(i);
                self.substitute(r, x);
                return true;
            }
            let Some(&pi) = op.operands.first().and_then(|v| def.get(v)) else {
                continue;
            };
            let prev = &self.f.body.ops[pi];
            let single = uses.get(&prev.results[0]).copied().unwrap_or(0) == 1;
            let x = prev.operands.first().copied();
            match (&op.kind, &prev.kind) {
                (OpKind::AllGather { axes: outer }, OpKind::AllGather { axes: inner }) if single => {
                    let axes = outer.iter().zip(inner).map(|(o, i)| [o.clone(), i.clone()].concat()).collect();
                    self.set(i, OpKind::AllGather { axes }, x.unwrap());
                    return true;
                }
                (OpKind::AllSlice { axes: second }, OpKind::AllSlice { axes: first }) => {
                    let axes = first.iter().zip(second).map(|(a, b)| [a.clone(), b.clone()].concat()).collect();
                    self.set(i, OpKind::AllSlice { axes }, x.unwrap());
                    return true;
                }
                (OpKind::AllSlice { axes: s }, OpKind::AllGather { axes: g }) => {
                    let (s, g) = (s.clone(), g.clone());
                    if self.slice_after_gather(i, x.unwrap(), &g, &s) {
                        return true;
                    }
                }
                (OpKind::AllSlice { axes: s }, OpKind::AllReduce { axes: red, monoid }) if single => {
                    let red_set: HashSet<&str> = red.iter().map(String::as_str).collect();
                    let mut p = Vec::new();
                    let mut q = Vec::new();
                    for sd in s {
                        let cut = sd.iter().position(|a| red_set.contains(a.as_str())).unwrap_or(sd.len());
                        p.push(sd[..cut].to_vec());
                        q.push(sd[cut..].to_vec());
                    }
                    if !q.iter().flatten().all(|a| red_set.contains(a.as_str())) {
                        continue;
                    }
                    let (red, monoid) = (red.clone(), *monoid);
                    let mut src = x.unwrap();
                    let mut at = i;
                    if p.iter().any(|d| !d.is_empty()) {
                        let ty = self.scaled(&self.tty(src), &p, false);
                        src = self.insert(i, OpKind::AllSlice { axes: p }, src, ty);
                        at += 1;
                    }
                    let kind = if q.iter().all(Vec::is_empty) {
                        OpKind::AllReduce { axes: red, monoid }
                    } else {
                        OpKind::ReduceScatter {
                            axes: red,
                            monoid,
                            slice: q,
                        }
                    };
                    self.set(at, kind, src);
                    return true;
                }
                (
                    OpKind::AllSlice { axes: s },
                    OpKind::ReduceScatter {
                        axes: red,
                        monoid,
                        slice,
                    },
                ) if single => {
                    let used = all_axes(slice);
                    let ok = s
                        .iter()
                        .flatten()
                        .all(|a| red.contains(a) && !used.contains(a.as_str()));
                    if ok {
                        let slice = slice.iter().zip(s).map(|(a, b)| [a.clone(), b.clone()].concat()).collect();
                        let kind = OpKind::ReduceScatter {
                            axes: red.clone(),
                            monoid: *monoid,
                            slice,
                        };
                        self.set(i, kind, x.unwrap());
                        return true;
                    }
                }
                _ => {}
            }
        }
        false
    }

    /// Rewrites op `i`, `all_slice s (all_gather g x)`.
    fn slice_after_gather(&mut self, i: usize, x: ValueId, g: &[Vec<String>], s: &[Vec<String>]) -> bool {
        let mut gr = Vec::new();
        let mut sr = Vec::new();
        let mut cancelled = false;
        for (gd, sd) in g.iter().zip(s) {
            let c = gd.iter().zip(sd).take_while(|(a, b)| a == b).count();
            cancelled |= c > 0;
            gr.push(gd[c..].to_vec());
            sr.push(sd[c..].to_vec());
        }
        let gdims: Vec<usize> = (0..gr.len()).filter(|&d| !gr[d].is_empty()).collect();
        let sdims: Vec<usize> = (0..sr.len()).filter(|&d| !sr[d].is_empty()).collect();
        if let ([gd], [sd]) = (gdims.as_slice(), sdims.as_slice()) {
            if gd != sd && gr[*gd] == sr[*sd] {
                let kind = OpKind::AllToAll {
                    gather_dim: *gd,
                    slice_dim: *sd,
                    axes: gr[*gd].clone(),
                };
                self.set(i, kind, x);
                return true;
            }
        }
        if !cancelled {
            return false;
        }
        if gdims.is_empty() {
            self.set(i, OpKind::AllSlice { axes: sr }, x);
        } else if sdims.is_empty() {
            self.set(i, OpKind::AllGather { axes: gr }, x);
        } else if all_axes(&gr).is_disjoint(&all_axes(&sr)) {
            let ty = self.scaled(&self.tty(x), &sr, false);
            let y = self.insert(i, OpKind::AllSlice { axes: sr }, x, ty);
            self.set(i + 1, OpKind::AllGather { axes: gr }, y);
        } else {
            let ty = self.scaled(&self.tty(x), &gr, true);
            let y = self.insert(i, OpKind::AllGather { axes: gr }, x, ty);
            self.set(i + 1, OpKind::AllSlice { axes: sr }, y);
        }
        true
    }

    fn cse(&mut self) {
        let mut seen: HashMap<(String, Vec<ValueId>, TensorType), ValueId> = HashMap::new();
        let mut i = 0;
        while i < self.f.body.ops.len() {
            let op = &self.f.body.ops[i];
            let key = (format!("{:?}", op.kind), op.operands.clone(), self.tty(op.results[0]));
            if let Some(&prev) = seen.get(&key) {
                let r = op.results[0];
                self.f.body.ops.remove(i);
                self.substitute(r, prev);
                continue;
            }
            seen.insert(key, op.results[0]);
            i += 1;
        }
    }

    fn dce(&mut self) {
        let mut live: HashSet<ValueId> = self.f.body.yields.iter().copied().collect();
        let mut keep = vec![false; self.f.body.ops.len()];
        for (i, op) in self.f.body.ops.iter().enumerate().rev() {
            if op.results.iter().any(|r| live.contains(r)) {
                keep[i] = true;
                live.extend(op.operands.iter().copied());
            }
        }
        let mut k = keep.into_iter();
        self.f.body.ops.retain(|_| k.next().unwrap());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_module, print_module};

    fn fused(src: &str) -> String {
        let m = parse_module(src).unwrap();
        print_module(&fuse_collectives(&m))
    }

    #[test]
    fn gather_then_slice_cancels() {
        let out = fused(
            "mesh = {B:4}
func @main(%x: tensor<8x4xf32>) -> tensor<8x4xf32> {
  %g = all_gather [[\"B\"],[]] %x : tensor<32x4xf32>
  %s = all_slice [[\"B\"],[]] %g : tensor<8x4xf32>
  return %s
}",
        );
        assert!(!out.contains("all_"), "{out}");
    }

    #[test]
    fn slice_after_reduce_becomes_reduce_scatter() {
        let out = fused(
            "mesh = {M:2}
func @main(%x: tensor<8x4xf32>) -> tensor<8x2xf32> {
  %r = all_reduce [\"M\"] %x : tensor<8x4xf32>
  %s = all_slice [[],[\"M\"]] %r : tensor<8x2xf32>
  return %s
}",
        );
        assert!(out.contains("reduce_scatter [\"M\"] [[],[\"M\"]] %x"), "{out}");
    }

    #[test]
    fn slice_on_other_axis_commutes() {
        let out = fused(
            "mesh = {B:2, M:2}
func @main(%x: tensor<8x4xf32>) -> tensor<4x4xf32> {
  %r = all_reduce [\"M\"] %x : tensor<8x4xf32>
  %s = all_slice [[\"B\"],[]] %r : tensor<4x4xf32>
  return %s
}",
        );
        let sl = out.find("all_slice").unwrap();
        let ar = out.find("all_reduce").unwrap();
        assert!(sl < ar, "{out}");
    }

    #[test]
    fn gather_slice_across_dims_is_all_to_all() {
        let out = fused(
            "mesh = {M:2}
func @main(%x: tensor<4x8xf32>) -> tensor<8x4xf32> {
  %g = all_gather [[\"M\"],[]] %x : tensor<8x8xf32>
  %s = all_slice [[],[\"M\"]] %g : tensor<8x4xf32>
  return %s
}",
        );
        assert!(out.contains("all_to_all 0->1 [\"M\"] %x"), "{out}");
    }

    #[test]
    fn gathers_and_slices_merge() {
        let out = fused(
            "mesh = {B:2, M:2}
func @main(%x: tensor<2x4xf32>) -> tensor<8x4xf32> {
  %a = all_gather [[\"M\"],[]] %x : tensor<4x4xf32>
  %b = all_gather [[\"B\"],[]] %a : tensor<8x4xf32>
  return %b
}",
        );
        assert!(out.contains("all_gather [[\"B\",\"M\"],[]] %x"), "{out}");
        let out = fused(
            "mesh = {B:2, M:2}
func @main(%x: tensor<8x4xf32>) -> tensor<2x4xf32> {
  %a = all_slice [[\"B\"],[]] %x : tensor<4x4xf32>
  %b = all_slice [[\"M\"],[]] %a : tensor<2x4xf32>
  return %b
}",
        );
        assert!(out.contains("all_slice [[\"B\",\"M\"],[]] %x"), "{out}");
    }

    #[test]
    fn cse_keeps_constants_of_different_shapes() {
        let out = fused(
            "mesh = {M:2}
func @main(%x: tensor<4xf32>) -> (tensor<4xf32>, tensor<2x4xf32>) {
  %a = constant() {value = 0.5} : tensor<4xf32>
  %b = constant() {value = 0.5} : tensor<2x4xf32>
  %c = constant() {value = 0.5} : tensor<4xf32>
  %d = add(%a, %c) : tensor<4xf32>
  return %d, %b
}",
        );
        assert_eq!(out.matches("constant").count(), 2, "{out}");
    }
}
