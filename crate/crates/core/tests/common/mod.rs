#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use tilepart::ir::{interpret_exact, Action, FuncBuilder, Module, Monoid, OpKind, Tensor, TensorType, ValueId};
use tilepart::tmr::{entries_for, sliced_types, NestOp, TmrEntry};

fn index_of(mut lin: usize, dims: &[usize]) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for i in (0..dims.len()).rev() {
        out[i] = lin % dims[i];
        lin /= dims[i];
    }
    out
}

/// Chunk `i` of `k` along `dim`, by explicit index arithmetic.
pub fn chunk(t: &Tensor, dim: usize, k: usize, i: usize) -> Tensor {
    let mut dims = t.dims().to_vec();
    dims[dim] /= k;
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|lin| {
            let mut idx = index_of(lin, &dims);
            idx[dim] += i * dims[dim];
            t.at(&idx)
        })
        .collect();
    Tensor::new(t.ty.with_dims(dims), data).unwrap()
}

pub fn concat(dim: usize, parts: &[Tensor]) -> Tensor {
    let len = parts[0].dims()[dim];
    let mut dims = parts[0].dims().to_vec();
    dims[dim] *= parts.len();
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|lin| {
            let mut idx = index_of(lin, &dims);
            let p = idx[dim] / len;
            idx[dim] %= len;
            parts[p].at(&idx)
        })
        .collect();
    Tensor::new(parts[0].ty.with_dims(dims), data).unwrap()
}

/// Runs one op on concrete inputs through a single-op module.
pub fn eval(op: &NestOp, xs: &[Tensor], result: &TensorType) -> Tensor {
    let mut b = FuncBuilder::new("main");
    let args: Vec<ValueId> = xs.iter().enumerate().map(|(i, x)| b.arg(&format!("a{i}"), x.ty.clone())).collect();
    let r = match op {
        NestOp::Tensor(k) => b.op(k.clone(), args, result.clone()),
        NestOp::Identity => args[0],
    };
    let m = Module::new(vec![b.finish(vec![r])]);
    interpret_exact(&m, xs).unwrap().remove(0)
}

/// Checks one registry entry: the op on chunks, recombined per the entry's
/// result action, equals the op on whole operands.
pub fn check_entry(
    op: &NestOp,
    e: &TmrEntry,
    xs: &[Tensor],
    result: &TensorType,
    k: usize,
    tol: f64,
) -> Result<f64, String> {
    let want = eval(op, xs, result);
    let tys: Vec<TensorType> = xs.iter().map(|x| x.ty.clone()).collect();
    let (_, body_ty) = sliced_types(e, &tys, result, k);
    let parts: Vec<Tensor> = (0..k)
        .map(|i| {
            let args: Vec<Tensor> = xs
                .iter()
                .zip(&e.operands)
                .map(|(x, d)| match d {
                    Some(d) => chunk(x, *d, k, i),
                    None => x.clone(),
                })
                .collect();
            eval(op, &args, &body_ty)
        })
        .collect();
    let got = match e.results[0] {
        Action::Tile(d) => concat(d, &parts),
        Action::Sum(m) => parts[1..].iter().fold(parts[0].clone(), |acc, p| {
            Tensor::new(acc.ty.clone(), acc.data.iter().zip(&p.data).map(|(&a, &b)| m.combine(a, b)).collect()).unwrap()
        }),
        Action::Any => parts[0].clone(),
    };
    let err = got.rel_err(&want);
    if err < tol {
        Ok(err)
    } else {
        Err(format!("{} entry {e} on {tys:?}: rel err {err}", op.mnemonic()))
    }
}

/// One random instance of an op family: the op, operand types, result type.
pub fn random_instance(family: usize, k: usize, rng: &mut impl Rng) -> (NestOp, Vec<TensorType>, TensorType) {
    let mut d = || k * rng.gen_range(1..=3);
    let t = |dims: Vec<usize>| TensorType::f32(dims);
    match family {
        0 => {
            let (m, n, p) = (d(), d(), d());
            (NestOp::Tensor(OpKind::Matmul), vec![t(vec![m, n]), t(vec![n, p])], t(vec![m, p]))
        }
        1 | 2 => {
            let s = t(vec![d(), d()]);
            let kind = if family == 1 { OpKind::Add } else { OpKind::Mul };
            (NestOp::Tensor(kind), vec![s.clone(), s.clone()], s)
        }
        3 | 4 | 5 | 6 => {
            let s = t(vec![d(), d()]);
            let op = match family {
                3 => NestOp::Tensor(OpKind::Neg),
                4 => NestOp::Tensor(OpKind::Exp),
                5 => NestOp::Tensor(OpKind::Tag { name: "t".into() }),
                _ => NestOp::Identity,
            };
            (op, vec![s.clone()], s)
        }
        7 => {
            let dims = vec![d(), d(), d()];
            let mut perm = vec![0, 1, 2];
            perm.shuffle(rng);
            let out = perm.iter().map(|&p| dims[p]).collect();
            (NestOp::Tensor(OpKind::Transpose { perm }), vec![t(dims)], t(out))
        }
        8 => {
            let dims = vec![d(), d(), d()];
            let mut rd: Vec<usize> = (0..3).filter(|_| rng.gen_bool(0.5)).collect();
            if rd.is_empty() {
                rd.push(rng.gen_range(0..3));
            }
            let monoid = if rng.gen_bool(0.5) { Monoid::Sum } else { Monoid::Max };
            let out = (0..3).filter(|i| !rd.contains(i)).map(|i| dims[i]).collect();
            (NestOp::Tensor(OpKind::Reduce { dims: rd, monoid }), vec![t(dims)], t(out))
        }
        9 => {
            let (a, b) = (d(), d());
            let (dims, out) = if rng.gen_bool(0.5) { (vec![1], vec![a, b]) } else { (vec![0], vec![b, a]) };
            (NestOp::Tensor(OpKind::Broadcast { dims }), vec![t(vec![b])], t(out))
        }
        _ => {
            let (a, b, c) = (d(), d(), rng.gen_range(1..=3));
            (NestOp::Tensor(OpKind::Reshape), vec![t(vec![a, b * c])], t(vec![a, b, c]))
        }
    }
}

pub const FAMILIES: usize = 11;

/// Runs `n` instances of every family; returns the number of entry checks.
pub fn tmr_soundness(n: usize, tol: f64, rng: &mut impl Rng) -> Result<usize, String> {
    let mut checked = 0;
    for family in 0..FAMILIES {
        for _ in 0..n {
            let k = [2, 3, 4][rng.gen_range(0..3)];
            let (op, tys, res) = random_instance(family, k, rng);
            let xs: Vec<Tensor> = tys.iter().map(|t| Tensor::random(t.clone(), rng)).collect();
            let entries = entries_for(&op, &tys, &res, k);
            if entries.is_empty() {
                return Err(format!("{} on {tys:?}: no entries", op.mnemonic()));
            }
            for e in &entries {
                check_entry(&op, e, &xs, &res, k, tol)?;
                checked += 1;
            }
        }
    }
    Ok(checked)
}

/// A random straight-line program over dims in {4, 8} on mesh {B:2, M:2}.
pub fn random_program(rng: &mut impl Rng, ops: usize) -> Module {
    let mut b = FuncBuilder::new("main");
    let dim = |rng: &mut dyn rand::RngCore| [4, 8][rng.gen_range(0..2)];
    let mut pool: Vec<ValueId> = Vec::new();
    let mut args = 0;
    let mut new_arg = |b: &mut FuncBuilder, ty: TensorType| {
        args += 1;
        b.arg(&format!("a{args}"), ty)
    };
    let first = TensorType::f32(vec![dim(rng), dim(rng)]);
    pool.push(new_arg(&mut b, first));
    let mut exps = 0;
    for _ in 0..ops {
        let v = if rng.gen_bool(0.7) { *pool.last().unwrap() } else { pool[rng.gen_range(0..pool.len())] };
        let ty = b.ty(v).clone();
        let mut kinds = vec!["add", "mul", "neg", "tag"];
        if exps == 0 {
            kinds.push("exp");
        }
        if ty.rank() == 2 {
            kinds.extend(["matmul", "matmul", "matmul", "t", "reduce"]);
        } else {
            kinds.extend(["broadcast", "broadcast"]);
        }
        let r = match *kinds.choose(rng).unwrap() {
            "matmul" => {
                if rng.gen_bool(0.5) {
                    let w = new_arg(&mut b, TensorType::f32(vec![ty.dims[1], dim(rng)]));
                    b.matmul(v, w)
                } else {
                    let w = new_arg(&mut b, TensorType::f32(vec![dim(rng), ty.dims[0]]));
                    b.matmul(w, v)
                }
            }
            "add" => {
                let other = pool.iter().rev().find(|&&u| u != v && *b.ty(u) == ty).copied();
                let o = other.unwrap_or_else(|| new_arg(&mut b, ty.clone()));
                b.add(v, o)
            }
            "mul" => {
                let o = new_arg(&mut b, ty.clone());
                b.mul(o, v)
            }
            "neg" => b.neg(v),
            "exp" => {
                exps += 1;
                b.exp(v)
            }
            "t" => b.t(v),
            "reduce" => b.reduce(v, vec![rng.gen_range(0..2)], Monoid::Sum),
            "broadcast" => {
                let m = dim(rng);
                b.broadcast(v, vec![1], vec![m, ty.dims[0]])
            }
            _ => {
                let n = format!("t{}", pool.len());
                b.tag(v, &n)
            }
        };
        pool.push(r);
    }
    let mut rets = vec![*pool.last().unwrap()];
    if pool.len() > 2 && rng.gen_bool(0.3) {
        rets.push(pool[pool.len() / 2]);
    }
    Module::new(vec![b.finish(rets)]).with_mesh("{B:2, M:2}".parse().unwrap())
}

pub fn random_inputs(m: &Module, rng: &mut impl Rng) -> Vec<Tensor> {
    m.main().unwrap().param_types().into_iter().map(|t| Tensor::random(t, rng)).collect()
}

pub fn max_err(got: &[Tensor], want: &[Tensor]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter().zip(want).map(|(g, w)| g.rel_err(w)).fold(0.0, f64::max)
}
