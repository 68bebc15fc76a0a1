use rayon::prelude::*;

use super::localize::{Layout, ShardingSpec};
use crate::ir::interp::eval_op;
use crate::ir::{DeviceCoord, InterpError, Mesh, Module, OpKind, Tensor, ValueId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpmdError {
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error("input `{name}` has shape {got:?}, expected {want:?}")]
    Input {
        name: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("devices {a} and {b} disagree on their shared copy of output `{name}`")]
    Divergence { name: String, a: usize, b: usize },
}

/// Linear indices of the devices that share `c`'s coordinates outside
/// `axes`, in chunk order (first axis major).
fn group(mesh: &Mesh, c: &DeviceCoord, axes: &[String]) -> Vec<usize> {
    let size = mesh.group_size(axes);
    (0..size)
        .map(|mut i| {
            let mut coord = c.clone();
            for a in axes.iter().rev() {
                let ai = mesh.index_of(a).expect("axis in mesh");
                let k = mesh.axes()[ai].1;
                coord.0[ai] = i % k;
                i /= k;
            }
            mesh.linear_index(&coord)
        })
        .collect()
}

/// The shard of `t` that device `c` holds under `layout`.
pub fn shard(mesh: &Mesh, t: &Tensor, axes: &[Vec<String>], c: &DeviceCoord) -> Tensor {
    let mut out = t.clone();
    for (d, a) in axes.iter().enumerate() {
        if !a.is_empty() {
            out = out.chunk(d, mesh.group_size(a), mesh.chunk_index(c, a));
        }
    }
    out
}

/// Reassembles a global tensor from per-device shards, checking that
/// devices holding the same shard agree exactly.
pub fn unshard(mesh: &Mesh, layout: &Layout, parts: &[Tensor]) -> Result<Tensor, SpmdError> {
    let devices = mesh.devices();
    let elem = parts[0].ty.elem;
    let mut global = Tensor::zeros(crate::ir::TensorType::new(layout.global.clone(), elem));
    let mut owner: std::collections::HashMap<Vec<usize>, usize> = std::collections::HashMap::new();
    let gstrides = strides(&layout.global);
    for (i, c) in devices.iter().enumerate() {
        let key: Vec<usize> = layout.axes.iter().map(|a| mesh.chunk_index(c, a)).collect();
        if let Some(&o) = owner.get(&key) {
            if parts[o].data != parts[i].data {
                return Err(SpmdError::Divergence {
                    name: layout.name.clone(),
                    a: o,
                    b: i,
                });
            }
            continue;
        }
        owner.insert(key.clone(), i);
        let local = parts[i].dims().to_vec();
        let offs: Vec<usize> = key.iter().zip(&local).map(|(k, l)| k * l).collect();
        let mut idx = vec![0; local.len()];
        for (lin, &x) in parts[i].data.iter().enumerate() {
            let mut r = lin;
            for d in (0..local.len()).rev() {
                idx[d] = r % local[d];
                r /= local[d];
            }
            let g: usize = (0..local.len()).map(|d| (idx[d] + offs[d]) * gstrides[d]).sum();
            global.data[g] = x;
        }
    }
    Ok(global)
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

type DeviceEnv = Vec<Option<Tensor>>;

fn get(env: &DeviceEnv, v: ValueId) -> &Tensor {
    env[v.0 as usize].as_ref().expect("value defined before use")
}

fn gather(mesh: &Mesh, devices: &[DeviceCoord], cur: Vec<Tensor>, axes: &[Vec<String>]) -> Vec<Tensor> {
    let mut cur = cur;
    for (d, a) in axes.iter().enumerate() {
        if a.is_empty() {
            continue;
        }
        cur = devices
            .iter()
            .map(|c| {
                let parts: Vec<Tensor> = group(mesh, c, a).into_iter().map(|i| cur[i].clone()).collect();
                Tensor::concat(d, &parts)
            })
            .collect();
    }
    cur
}

fn reduce(
    mesh: &Mesh,
    devices: &[DeviceCoord],
    cur: &[Tensor],
    axes: &[String],
    monoid: crate::ir::Monoid,
) -> Vec<Tensor> {
    devices
        .iter()
        .map(|c| {
            let g = group(mesh, c, axes);
            let mut acc = cur[g[0]].clone();
            for &i in &g[1..] {
                for (a, b) in acc.data.iter_mut().zip(&cur[i].data) {
                    *a = monoid.combine(*a, *b);
                }
            }
            acc.rounded()
        })
        .collect()
}

fn slice_all(mesh: &Mesh, devices: &[DeviceCoord], cur: Vec<Tensor>, axes: &[Vec<String>]) -> Vec<Tensor> {
    cur.iter().zip(devices).map(|(t, c)| shard(mesh, t, axes, c)).collect()
}

/// Runs a device program on every device of the mesh in lockstep, from
/// global inputs sharded according to `spec`, and reassembles the outputs.
pub fn spmd_interpret(m: &Module, spec: &ShardingSpec, inputs: &[Tensor]) -> Result<Vec<Tensor>, SpmdError> {
    let mesh = super::mesh_of(m);
    let f = m.main().ok_or(InterpError::NoMain)?;
    if inputs.len() != spec.inputs.len() {
        return Err(InterpError::Arity {
            want: spec.inputs.len(),
            got: inputs.len(),
        }
        .into());
    }
    for (x, l) in inputs.iter().zip(&spec.inputs) {
        if x.dims() != l.global.as_slice() {
            return Err(SpmdError::Input {
                name: l.name.clone(),
                want: l.global.clone(),
                got: x.dims().to_vec(),
            });
        }
    }
    let devices = mesh.devices();
    let mut envs: Vec<DeviceEnv> = devices
        .iter()
        .map(|c| {
            let mut env = vec![None; f.values.len()];
            for ((x, l), &p) in inputs.iter().zip(&spec.inputs).zip(f.params()) {
                env[p.0 as usize] = Some(shard(mesh, x, &l.axes, c));
            }
            env
        })
        .collect();
    for op in &f.body.ops {
        let r = op.results[0];
        let res_ty = f.tensor_ty(r);
        if op.kind.is_collective() {
            let cur: Vec<Tensor> = envs.iter().map(|e| get(e, op.operands[0]).clone()).collect();
            let out = match &op.kind {
                OpKind::AllGather { axes } => gather(mesh, &devices, cur, axes),
                OpKind::AllSlice { axes } => slice_all(mesh, &devices, cur, axes),
                OpKind::AllReduce { axes, monoid } => reduce(mesh, &devices, &cur, axes, *monoid),
                OpKind::ReduceScatter { axes, monoid, slice } => {
                    let red = reduce(mesh, &devices, &cur, axes, *monoid);
                    slice_all(mesh, &devices, red, slice)
                }
                OpKind::AllToAll {
                    gather_dim,
                    slice_dim,
                    axes,
                } => {
                    let rank = res_ty.rank();
                    let mut g = vec![Vec::new(); rank];
                    g[*gather_dim] = axes.clone();
                    let mut s = vec![Vec::new(); rank];
                    s[*slice_dim] = axes.clone();
                    let full = gather(mesh, &devices, cur, &g);
                    slice_all(mesh, &devices, full, &s)
                }
                _ => unreachable!(),
            };
            for (env, t) in envs.iter_mut().zip(out) {
                env[r.0 as usize] = Some(t);
            }
        } else {
            envs.par_iter_mut().try_for_each(|env| -> Result<(), InterpError> {
                let args: Vec<&Tensor> = op.operands.iter().map(|&v| get(env, v)).collect();
                let t = eval_op(&op.kind, &args, res_ty)?.rounded();
                env[r.0 as usize] = Some(t);
                Ok(())
            })?;
        }
    }
    let mut outs = Vec::new();
    for (&y, l) in f.returns().iter().zip(&spec.outputs) {
        let parts: Vec<Tensor> = envs.iter().map(|e| get(e, y).clone()).collect();
        outs.push(unshard(mesh, l, &parts)?);
    }
    Ok(outs)
}
