use serde::{Deserialize, Serialize};

use crate::ir::{Module, OpKind, Type};

/// How one argument or result is laid out across the mesh.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub name: String,
    pub global: Vec<usize>,
    pub local: Vec<usize>,
    /// Per dim, the mesh axes that tile it, major first.
    pub axes: Vec<Vec<String>>,
}

impl Layout {
    pub fn is_replicated(&self) -> bool {
        self.axes.iter().all(Vec::is_empty)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardingSpec {
    pub mesh: String,
    pub inputs: Vec<Layout>,
    pub outputs: Vec<Layout>,
}

/// Makes `main` take and return shards. An argument whose every use is the
/// same `all_slice` is passed pre-sliced; a result produced by `all_gather`
/// is returned ungathered. Other functions are left alone.
pub fn localize(m: &Module) -> (Module, ShardingSpec) {
    let mut out = m.clone();
    let mesh = super::mesh_of(m).clone();
    let f = out.main_mut().expect("main");
    let mut inputs = Vec::new();
    for (i, &p) in f.body.args.clone().iter().enumerate() {
        let global = super::tensor_of(f, p);
        let name = f.name(p).map_or_else(|| format!("arg{i}"), str::to_string);
        let users: Vec<usize> = (0..f.body.ops.len())
            .filter(|&k| f.body.ops[k].operands.contains(&p))
            .collect();
        let first_axes = users.first().and_then(|&k| match &f.body.ops[k].kind {
            OpKind::AllSlice { axes } => Some(axes.clone()),
            _ => None,
        });
        let shardable = match &first_axes {
            Some(a) => {
                !f.body.yields.contains(&p)
                    && users
                        .iter()
                        .all(|&k| matches!(&f.body.ops[k].kind, OpKind::AllSlice { axes } if axes == a))
            }
            None => false,
        };
        let axes = if shardable { first_axes.unwrap() } else { vec![Vec::new(); global.rank()] };
        let local: Vec<usize> = global
            .dims
            .iter()
            .zip(&axes)
            .map(|(&d, a)| d / mesh.group_size(a))
            .collect();
        if shardable {
            let results: Vec<_> = users.iter().map(|&k| f.body.ops[k].results[0]).collect();
            for &k in users.iter().rev() {
                f.body.ops.remove(k);
            }
            for r in results {
                for op in &mut f.body.ops {
                    for v in &mut op.operands {
                        if *v == r {
                            *v = p;
                        }
                    }
                }
                for v in &mut f.body.yields {
                    if *v == r {
                        *v = p;
                    }
                }
            }
            f.values[p.0 as usize].ty = Type::Tensor(global.with_dims(local.clone()));
        }
        inputs.push(Layout {
            name,
            global: global.dims.clone(),
            local,
            axes,
        });
    }
    let mut outputs = Vec::new();
    for j in 0..f.body.yields.len() {
        let v = f.body.yields[j];
        let global = super::tensor_of(f, v);
        let name = f.name(v).map_or_else(|| format!("out{j}"), str::to_string);
        let gather = f.body.ops.iter().find(|o| o.results[0] == v).and_then(|o| match &o.kind {
            OpKind::AllGather { axes } => Some((axes.clone(), o.operands[0])),
            _ => None,
        });
        let axes = match gather {
            Some((axes, x)) => {
                f.body.yields[j] = x;
                axes
            }
            None => vec![Vec::new(); global.rank()],
        };
        let local = super::tensor_of(f, f.body.yields[j]).dims;
        outputs.push(Layout {
            name,
            global: global.dims,
            local,
            axes,
        });
    }
    let live_ops = {
        let mut live: std::collections::HashSet<_> = f.body.yields.iter().copied().collect();
        let mut keep = vec![false; f.body.ops.len()];
        for (i, op) in f.body.ops.iter().enumerate().rev() {
            if op.results.iter().any(|r| live.contains(r)) {
                keep[i] = true;
                live.extend(op.operands.iter().copied());
            }
        }
        keep
    };
    let mut k = live_ops.into_iter();
    f.body.ops.retain(|_| k.next().unwrap());
    let spec = ShardingSpec {
        mesh: mesh.to_string(),
        inputs,
        outputs,
    };
    (out, spec)
}
