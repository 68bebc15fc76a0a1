//! Dense reference interpreter. `interpret` accepts plain tensor programs;
//! `temporal_interpret` additionally runs `loop` as a sequential loop and
//! `slice` as chunk extraction.

use std::sync::Arc;

use super::{Action, ConstValue, Func, Module, Op, OpKind, Region, Tensor, TensorType, Type, ValueId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InterpError {
    #[error("module has no `main` function")]
    NoMain,
    #[error("expected {want} inputs, got {got}")]
    Arity { want: usize, got: usize },
    #[error("input {index} has type {got}, expected {want}")]
    InputType { index: usize, want: String, got: String },
    #[error("`{0}` cannot be evaluated by this interpreter")]
    Unsupported(String),
    #[error("evaluation failed: {0}")]
    Eval(String),
}

/// Evaluates one non-structural op on concrete operands.
pub(crate) fn eval_op(kind: &OpKind, args: &[&Tensor], result: &TensorType) -> Result<Tensor, InterpError> {
    let ev = |e: super::TensorError| InterpError::Eval(e.to_string());
    let t = match kind {
        OpKind::Constant(ConstValue::Splat(x)) => Tensor::splat(result.clone(), *x),
        OpKind::Constant(ConstValue::Dense(xs)) => Tensor::new(result.clone(), xs.clone()).map_err(ev)?,
        OpKind::Matmul => args[0].matmul(args[1]).map_err(ev)?,
        OpKind::Add => args[0].zip(args[1], |a, b| a + b).map_err(ev)?,
        OpKind::Mul => args[0].zip(args[1], |a, b| a * b).map_err(ev)?,
        OpKind::Neg => args[0].map(|a| -a),
        OpKind::Exp => args[0].map(f64::exp),
        OpKind::Transpose { perm } => args[0].transpose(perm),
        OpKind::Reduce { dims, monoid } => args[0].reduce(dims, *monoid),
        OpKind::Reshape => args[0].reshape(result.dims.clone()).map_err(ev)?,
        OpKind::Broadcast { dims } => args[0].broadcast(dims, result.dims.clone()),
        OpKind::Tag { .. } => args[0].clone(),
        other => return Err(InterpError::Unsupported(other.mnemonic().to_string())),
    };
    Ok(t)
}

#[derive(Clone, Copy)]
struct Mode {
    loops: bool,
    exact: bool,
}

struct Env<'a> {
    func: &'a Func,
    mode: Mode,
    vals: Vec<Option<Arc<Tensor>>>,
    idx: Vec<usize>,
}

impl Env<'_> {
    fn get(&self, v: ValueId) -> Result<Arc<Tensor>, InterpError> {
        self.vals[v.0 as usize]
            .clone()
            .ok_or_else(|| InterpError::Eval(format!("value {} not computed", v.0)))
    }

    fn set(&mut self, v: ValueId, t: Tensor) {
        let t = if self.mode.exact { t } else { t.rounded() };
        self.vals[v.0 as usize] = Some(Arc::new(t));
    }

    fn region(&mut self, r: &Region) -> Result<Vec<Arc<Tensor>>, InterpError> {
        for op in &r.ops {
            self.op(op)?;
        }
        r.yields.iter().map(|&y| self.get(y)).collect()
    }

    fn op(&mut self, op: &Op) -> Result<(), InterpError> {
        match &op.kind {
            OpKind::Loop { actions, body, .. } if self.mode.loops => {
                let Type::Range(k) = *self.func.ty(body.args[0]) else {
                    return Err(InterpError::Eval("loop argument is not a range".into()));
                };
                let iters = if actions.iter().all(|a| *a == Action::Any) { 1 } else { k };
                let mut per_iter: Vec<Vec<Arc<Tensor>>> = Vec::with_capacity(iters);
                for i in 0..iters {
                    self.idx[body.args[0].0 as usize] = i;
                    per_iter.push(self.region(body)?);
                }
                for (j, (&act, &res)) in actions.iter().zip(&op.results).enumerate() {
                    let t = match act {
                        Action::Tile(d) => {
                            let parts: Vec<Tensor> = per_iter.iter().map(|p| (*p[j]).clone()).collect();
                            Tensor::concat(d, &parts)
                        }
                        Action::Sum(m) => {
                            let mut acc = (*per_iter[0][j]).clone();
                            for p in &per_iter[1..] {
                                acc = acc
                                    .zip(&p[j], |a, b| m.combine(a, b))
                                    .map_err(|e| InterpError::Eval(e.to_string()))?;
                            }
                            acc
                        }
                        Action::Any => (*per_iter[0][j]).clone(),
                    };
                    self.set(res, t);
                }
            }
            OpKind::Slice { dim } if self.mode.loops => {
                let x = self.get(op.operands[0])?;
                let r = op.operands[1];
                let Type::Range(k) = *self.func.ty(r) else {
                    return Err(InterpError::Eval("slice index is not a range".into()));
                };
                let t = x.chunk(*dim, k, self.idx[r.0 as usize]);
                self.set(op.results[0], t);
            }
            kind => {
                let args: Vec<Arc<Tensor>> = op.operands.iter().map(|&v| self.get(v)).collect::<Result<_, _>>()?;
                let refs: Vec<&Tensor> = args.iter().map(|a| a.as_ref()).collect();
                let t = eval_op(kind, &refs, self.func.tensor_ty(op.results[0]))?;
                self.set(op.results[0], t);
            }
        }
        Ok(())
    }
}

pub(crate) fn check_inputs(f: &Func, inputs: &[Tensor]) -> Result<(), InterpError> {
    if inputs.len() != f.params().len() {
        return Err(InterpError::Arity {
            want: f.params().len(),
            got: inputs.len(),
        });
    }
    for (i, (x, &p)) in inputs.iter().zip(f.params()).enumerate() {
        let want = f.tensor_ty(p);
        if &x.ty != want {
            return Err(InterpError::InputType {
                index: i,
                want: want.to_string(),
                got: x.ty.to_string(),
            });
        }
    }
    Ok(())
}

fn run(m: &Module, inputs: &[Tensor], mode: Mode) -> Result<Vec<Tensor>, InterpError> {
    let f = m.main().ok_or(InterpError::NoMain)?;
    check_inputs(f, inputs)?;
    let mut env = Env {
        func: f,
        mode,
        vals: vec![None; f.values.len()],
        idx: vec![0; f.values.len()],
    };
    for (x, &p) in inputs.iter().zip(f.params()) {
        env.vals[p.0 as usize] = Some(Arc::new(x.clone()));
    }
    let outs = env.region(&f.body)?;
    Ok(outs.into_iter().map(|t| (*t).clone()).collect())
}

/// Dense semantics of `main`. Reductions fold in row-major order.
pub fn interpret(m: &Module, inputs: &[Tensor]) -> Result<Vec<Tensor>, InterpError> {
    run(
        m,
        inputs,
        Mode {
            loops: false,
            exact: false,
        },
    )
}

/// Sequential semantics of partitioned programs: tile results concatenate in
/// ascending index order, sum results fold in ascending order, `#any` bodies
/// run once at index 0.
pub fn temporal_interpret(m: &Module, inputs: &[Tensor]) -> Result<Vec<Tensor>, InterpError> {
    run(
        m,
        inputs,
        Mode {
            loops: true,
            exact: false,
        },
    )
}

/// Like [`temporal_interpret`] but without rounding to the element kind.
pub fn interpret_exact(m: &Module, inputs: &[Tensor]) -> Result<Vec<Tensor>, InterpError> {
    run(
        m,
        inputs,
        Mode {
            loops: true,
            exact: true,
        },
    )
}
