//! Tile-mapping registry: for each op, which operand tilings along one mesh
//! axis produce which result actions.
//!
//! An entry `(t0, ⊥) ↪ t0` for matmul says that running matmul on row
//! chunks of the left operand and the whole right operand, then
//! concatenating the chunks along dim 0, equals the unpartitioned matmul.

use std::fmt;

use serde::Serialize;

use crate::ir::{Action, Monoid, OpKind, TensorType};

/// Ops that a nest can carry. `Identity` is the body of tile and atomic
/// rewrites: it passes its single operand through.
#[derive(Clone, Debug, PartialEq)]
pub enum NestOp {
    Tensor(OpKind),
    Identity,
}

impl NestOp {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            NestOp::Tensor(k) => k.mnemonic(),
            NestOp::Identity => "identity",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TmrEntry {
    /// Tiled dim per operand, or `None` for an operand used whole.
    pub operands: Vec<Option<usize>>,
    pub results: Vec<Action>,
}

impl fmt::Display for TmrEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ops: Vec<String> = self
            .operands
            .iter()
            .map(|o| match o {
                Some(d) => format!("tile<{d}>"),
                None => "⊥".to_string(),
            })
            .collect();
        let res: Vec<String> = self.results.iter().map(|a| a.to_string()).collect();
        write!(f, "({}) -> {}", ops.join(", "), res.join(", "))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MatchKind {
    Full,
    Partial { missing: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MatchResult {
    pub entry: TmrEntry,
    pub kind: MatchKind,
}

fn entry(operands: Vec<Option<usize>>, result: Action) -> TmrEntry {
    TmrEntry {
        operands,
        results: vec![result],
    }
}

/// Groups of (operand dims, result dims) with equal products, in order.
fn reshape_groups(from: &[usize], to: &[usize]) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut groups = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < from.len() && j < to.len() {
        let (mut gi, mut gj) = (vec![i], vec![j]);
        let (mut pi, mut pj) = (from[i], to[j]);
        i += 1;
        j += 1;
        while pi != pj {
            if pi < pj {
                if i >= from.len() {
                    return groups;
                }
                pi *= from[i];
                gi.push(i);
                i += 1;
            } else {
                if j >= to.len() {
                    return groups;
                }
                pj *= to[j];
                gj.push(j);
                j += 1;
            }
        }
        groups.push((gi, gj));
    }
    groups
}

/// Registry entries for `op` applied to `operands` producing `result`, for a
/// mesh axis of size `k`. Entries whose tiled dims are not divisible by `k`
/// are omitted.
pub fn entries_for(op: &NestOp, operands: &[TensorType], result: &TensorType, k: usize) -> Vec<TmrEntry> {
    let div = |t: &TensorType, d: usize| t.dims.get(d).is_some_and(|&n| n % k == 0);
    let mut out: Vec<TmrEntry> = Vec::new();
    let unary_identity = |out: &mut Vec<TmrEntry>| {
        for d in 0..operands[0].rank() {
            if div(&operands[0], d) {
                out.push(entry(vec![Some(d)], Action::Tile(d)));
            }
        }
    };
    match op {
        NestOp::Identity => unary_identity(&mut out),
        NestOp::Tensor(kind) => match kind {
            OpKind::Matmul => {
                let (a, b) = (&operands[0], &operands[1]);
                if div(a, 0) {
                    out.push(entry(vec![Some(0), None], Action::Tile(0)));
                }
                if div(b, 1) {
                    out.push(entry(vec![None, Some(1)], Action::Tile(1)));
                }
                if div(a, 1) {
                    out.push(entry(vec![Some(1), Some(0)], Action::Sum(Monoid::Sum)));
                }
            }
            OpKind::Add | OpKind::Mul => {
                for d in 0..operands[0].rank() {
                    if div(&operands[0], d) {
                        out.push(entry(vec![Some(d), Some(d)], Action::Tile(d)));
                    }
                }
            }
            OpKind::Neg | OpKind::Exp | OpKind::Tag { .. } => unary_identity(&mut out),
            OpKind::Transpose { perm } => {
                for (i, &p) in perm.iter().enumerate() {
                    if div(&operands[0], p) {
                        out.push(entry(vec![Some(p)], Action::Tile(i)));
                    }
                }
                out.sort_by_key(|e| e.operands[0]);
            }
            OpKind::Reduce { dims, monoid } => {
                let mut rd = 0;
                for d in 0..operands[0].rank() {
                    if !div(&operands[0], d) {
                        if !dims.contains(&d) {
                            rd += 1;
                        }
                        continue;
                    }
                    if dims.contains(&d) {
                        out.push(entry(vec![Some(d)], Action::Sum(*monoid)));
                    } else {
                        out.push(entry(vec![Some(d)], Action::Tile(rd)));
                        rd += 1;
                    }
                }
            }
            OpKind::Broadcast { dims } => {
                for (i, &d) in dims.iter().enumerate() {
                    if div(&operands[0], i) {
                        out.push(entry(vec![Some(i)], Action::Tile(d)));
                    }
                }
            }
            OpKind::Reshape => {
                for (gi, gj) in reshape_groups(&operands[0].dims, &result.dims) {
                    if div(&operands[0], gi[0]) && div(result, gj[0]) {
                        out.push(entry(vec![Some(gi[0])], Action::Tile(gj[0])));
                    }
                }
            }
            _ => {}
        },
    }
    out
}

/// Matches operand and result contexts against `entries`.
///
/// Forward: an entry is Full when every operand it tiles is tiled that way
/// in `operand_ctx`; it is Partial when at least one is and every other
/// required operand is untiled in the context. Backward: an entry is Full
/// when its result actions equal every constraint in `result_ctx`. Full
/// results come first, each group in registry order.
pub fn match_entries(
    entries: &[TmrEntry],
    operand_ctx: &[Option<usize>],
    result_ctx: &[Option<Action>],
) -> Vec<MatchResult> {
    let mut full = Vec::new();
    let mut partial = Vec::new();
    let backward = result_ctx.iter().any(Option::is_some);
    for e in entries {
        if backward {
            let ok = e
                .results
                .iter()
                .zip(result_ctx)
                .all(|(a, c)| c.is_none_or(|c| c == *a));
            if ok {
                full.push(MatchResult {
                    entry: e.clone(),
                    kind: MatchKind::Full,
                });
            }
            continue;
        }
        let mut satisfied = 0;
        let mut missing = Vec::new();
        let mut contradicted = false;
        for (i, (req, ctx)) in e.operands.iter().zip(operand_ctx).enumerate() {
            let Some(d) = req else { continue };
            match ctx {
                Some(c) if c == d => satisfied += 1,
                Some(_) => contradicted = true,
                None => missing.push(i),
            }
        }
        if contradicted || satisfied == 0 {
            continue;
        }
        let kind = if missing.is_empty() {
            MatchKind::Full
        } else {
            MatchKind::Partial { missing }
        };
        let r = MatchResult {
            entry: e.clone(),
            kind,
        };
        if r.kind == MatchKind::Full {
            full.push(r);
        } else {
            partial.push(r);
        }
    }
    full.extend(partial);
    full
}

/// Registry lookup plus matching in one call.
pub fn match_op(
    op: &NestOp,
    operands: &[TensorType],
    result: &TensorType,
    k: usize,
    operand_ctx: &[Option<usize>],
    result_ctx: &[Option<Action>],
) -> Vec<MatchResult> {
    match_entries(&entries_for(op, operands, result, k), operand_ctx, result_ctx)
}

/// Body types of `entry` under an axis of size `k`: operands with their
/// tiled dims divided, and the result with tiled dims divided.
pub fn sliced_types(
    entry: &TmrEntry,
    operands: &[TensorType],
    result: &TensorType,
    k: usize,
) -> (Vec<TensorType>, TensorType) {
    let ops = operands
        .iter()
        .zip(&entry.operands)
        .map(|(t, e)| match e {
            Some(d) => {
                let mut dims = t.dims.clone();
                dims[*d] /= k;
                t.with_dims(dims)
            }
            None => t.clone(),
        })
        .collect();
    let res = match entry.results[0] {
        Action::Tile(d) => {
            let mut dims = result.dims.clone();
            dims[d] /= k;
            result.with_dims(dims)
        }
        _ => result.clone(),
    };
    (ops, res)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(kind: OpKind) -> NestOp {
        NestOp::Tensor(kind)
    }

    #[test]
    fn matmul_entries() {
        let e = entries_for(&m(OpKind::Matmul), &[TensorType::f32(vec![32, 16]), TensorType::f32(vec![16, 8])], &TensorType::f32(vec![32, 8]), 4);
        let shown: Vec<String> = e.iter().map(|e| e.to_string()).collect();
        assert_eq!(shown, vec!["(tile<0>, ⊥) -> #tile<0>", "(⊥, tile<1>) -> #tile<1>", "(tile<1>, tile<0>) -> #sum"]);
    }

    #[test]
    fn matmul_matches() {
        let tys = [TensorType::f32(vec![8, 8]), TensorType::f32(vec![8, 8])];
        let r = TensorType::f32(vec![8, 8]);
        let q = |ctx: &[Option<usize>]| match_op(&m(OpKind::Matmul), &tys, &r, 2, ctx, &[None]);
        let a = q(&[Some(0), None]);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].kind, MatchKind::Full);
        assert_eq!(a[0].entry.results, vec![Action::Tile(0)]);
        let b = q(&[None, Some(0)]);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].kind, MatchKind::Partial { missing: vec![0] });
        assert_eq!(b[0].entry.results, vec![Action::Sum(Monoid::Sum)]);
        let c = q(&[Some(0), Some(1)]);
        assert_eq!(c.iter().filter(|m| m.kind == MatchKind::Full).count(), 2);
        let back = match_op(&m(OpKind::Matmul), &tys, &r, 2, &[None, None], &[Some(Action::Tile(1))]);
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].entry.operands, vec![None, Some(1)]);
    }

    #[test]
    fn add_rank2() {
        let t = TensorType::f32(vec![4, 4]);
        let e = entries_for(&m(OpKind::Add), &[t.clone(), t.clone()], &t, 2);
        assert_eq!(e.len(), 2);
        assert_eq!(e[1].operands, vec![Some(1), Some(1)]);
    }

    #[test]
    fn reshape_blocking() {
        let from = TensorType::f32(vec![16]);
        let to = TensorType::f32(vec![4, 4]);
        assert!(entries_for(&m(OpKind::Reshape), &[from.clone()], &to, 8).is_empty());
        let e = entries_for(&m(OpKind::Reshape), &[from], &to, 2);
        assert_eq!(e, vec![entry(vec![Some(0)], Action::Tile(0))]);
        assert_eq!(reshape_groups(&[2, 3, 4], &[6, 2, 2]), vec![(vec![0, 1], vec![0]), (vec![2], vec![1, 2])]);
    }

    #[test]
    fn reduce_and_transpose() {
        let x = TensorType::f32(vec![4, 6, 8]);
        let e = entries_for(
            &m(OpKind::Reduce { dims: vec![1], monoid: Monoid::Max }),
            &[x.clone()],
            &TensorType::f32(vec![4, 8]),
            2,
        );
        assert_eq!(
            e.iter().map(|e| e.results[0]).collect::<Vec<_>>(),
            vec![Action::Tile(0), Action::Sum(Monoid::Max), Action::Tile(1)]
        );
        let e = entries_for(&m(OpKind::Transpose { perm: vec![2, 0, 1] }), &[x], &TensorType::f32(vec![8, 4, 6]), 2);
        assert_eq!(e[0], entry(vec![Some(0)], Action::Tile(1)));
        assert_eq!(e[2], entry(vec![Some(2)], Action::Tile(0)));
    }
}
