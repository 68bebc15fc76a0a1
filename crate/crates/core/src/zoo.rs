//! Generated test programs. Training steps carry a hand-written backward pass
//! and a momentum-SGD update, and return
//! `(loss, dx, new params..., new momenta...)`.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::ir::{FuncBuilder, Mesh, Module, Monoid, TensorType, ValueId};
use crate::schedule::{Sharding, Tactic};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Chain,
    MlpTrain,
    MiniTransformerTrain,
    TransposeDiag,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Chain,
        ModelKind::MlpTrain,
        ModelKind::MiniTransformerTrain,
        ModelKind::TransposeDiag,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Chain => "chain",
            ModelKind::MlpTrain => "mlp_train",
            ModelKind::MiniTransformerTrain => "mini_transformer_train",
            ModelKind::TransposeDiag => "transpose_diag",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = ZooError;

    fn from_str(s: &str) -> Result<Self, ZooError> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ZooError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ZooError {
    #[error("unknown model kind `{0}` (available: chain, mlp_train, mini_transformer_train, transpose_diag)")]
    UnknownKind(String),
    #[error("invalid config: {0}")]
    Config(String),
}

/// Sizes for generated models. Which fields matter depends on the kind.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZooConfig {
    pub batch: usize,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    /// Hidden layers of `mlp_train`; the model has `layers + 1` linear layers.
    pub layers: usize,
    /// Blocks of `mini_transformer_train`.
    pub blocks: usize,
    pub beta: f64,
    pub lr: f64,
}

impl ZooConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        let base = ZooConfig {
            batch: 16,
            d_in: 8,
            d_hidden: 16,
            d_out: 8,
            layers: 2,
            blocks: 1,
            beta: 0.9,
            lr: 0.1,
        };
        match kind {
            ModelKind::Chain => ZooConfig {
                batch: 256,
                d_in: 8,
                d_hidden: 32,
                d_out: 16,
                ..base
            },
            ModelKind::TransposeDiag => ZooConfig {
                batch: 16,
                d_in: 8,
                ..base
            },
            _ => base,
        }
    }

    /// Every dim that a cookbook schedule splits must divide by the axis
    /// sizes of the default mesh.
    fn check(&self, kind: ModelKind) -> Result<(), ZooError> {
        let need = |ok: bool, what: &str| if ok { Ok(()) } else { Err(ZooError::Config(what.to_string())) };
        need(self.batch > 0 && self.d_in > 0 && self.d_hidden > 0 && self.d_out > 0, "sizes must be positive")?;
        match kind {
            ModelKind::MiniTransformerTrain => need(self.blocks > 0, "blocks must be positive"),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ZooModel {
    pub kind: ModelKind,
    pub module: Module,
    /// Parameter argument names, in argument order.
    pub params: Vec<String>,
    /// Momentum argument names, aligned with `params`.
    pub momenta: Vec<String>,
}

pub fn default_mesh() -> Mesh {
    "{B:4, M:2}".parse().expect("valid mesh")
}

pub fn generate_model(kind: ModelKind, cfg: &ZooConfig) -> Result<ZooModel, ZooError> {
    cfg.check(kind)?;
    let (func, params, momenta) = match kind {
        ModelKind::Chain => {
            let mut b = FuncBuilder::new("main");
            let x = b.arg("x", TensorType::f32([cfg.batch, cfg.d_in]));
            let w1 = b.arg("w1", TensorType::f32([cfg.d_in, cfg.d_hidden]));
            let w2 = b.arg("w2", TensorType::f32([cfg.d_hidden, cfg.d_out]));
            let x1 = b.matmul(x, w1);
            b.name(x1, "x1");
            let x2 = b.matmul(x1, w2);
            b.name(x2, "x2");
            (b.finish(vec![x2]), vec!["w1".into(), "w2".into()], vec![])
        }
        ModelKind::TransposeDiag => {
            let mut b = FuncBuilder::new("main");
            let x = b.arg("x", TensorType::f32([cfg.batch, cfg.d_in]));
            let t = b.t(x);
            let tx = b.tag(t, "tx");
            let y = b.matmul(x, tx);
            (b.finish(vec![y]), vec![], vec![])
        }
        ModelKind::MlpTrain => mlp(cfg),
        ModelKind::MiniTransformerTrain => transformer(cfg),
    };
    Ok(ZooModel {
        kind,
        module: Module::new(vec![func]).with_mesh(default_mesh()),
        params,
        momenta,
    })
}

struct Train {
    b: FuncBuilder,
    beta: f64,
    lr: f64,
}

impl Train {
    fn splat(&mut self, v: f64, like: ValueId) -> ValueId {
        let ty = self.b.ty(like).clone();
        self.b.constant(v, ty)
    }

    /// `exp(-z*z)`.
    fn bump(&mut self, z: ValueId) -> ValueId {
        let zz = self.b.mul(z, z);
        let n = self.b.neg(zz);
        self.b.exp(n)
    }

    fn sq_loss(&mut self, pred: ValueId, target: ValueId) -> (ValueId, ValueId) {
        let e = self.b.sub(pred, target);
        let sq = self.b.mul(e, e);
        let loss = self.b.reduce(sq, vec![0, 1], Monoid::Sum);
        self.b.name(loss, "loss");
        let two = self.splat(2.0, e);
        (loss, self.b.mul(two, e))
    }

    /// `(new param, new momentum)`.
    fn update(&mut self, p: ValueId, m: ValueId, grad: ValueId) -> (ValueId, ValueId) {
        let beta = self.splat(self.beta, m);
        let bm = self.b.mul(beta, m);
        let m2 = self.b.add(bm, grad);
        let lr = self.splat(self.lr, m2);
        let step = self.b.mul(lr, m2);
        (self.b.sub(p, step), m2)
    }

    fn finish(
        mut self,
        loss: ValueId,
        dx: ValueId,
        ps: &[(String, ValueId, ValueId, ValueId)],
    ) -> (crate::ir::Func, Vec<String>, Vec<String>) {
        let mut new_p = Vec::new();
        let mut new_m = Vec::new();
        for (name, p, m, g) in ps {
            let (p2, m2) = self.update(*p, *m, *g);
            self.b.name(p2, &format!("{name}_new"));
            self.b.name(m2, &format!("m_{name}_new"));
            new_p.push(p2);
            new_m.push(m2);
        }
        self.b.name(dx, "dx");
        let mut rets = vec![loss, dx];
        rets.extend(new_p);
        rets.extend(new_m);
        let params = ps.iter().map(|p| p.0.clone()).collect();
        let momenta = ps.iter().map(|p| format!("m_{}", p.0)).collect();
        (self.b.finish(rets), params, momenta)
    }
}

fn mlp(cfg: &ZooConfig) -> (crate::ir::Func, Vec<String>, Vec<String>) {
    let mut t = Train {
        b: FuncBuilder::new("main"),
        beta: cfg.beta,
        lr: cfg.lr,
    };
    let n = cfg.layers + 1;
    let widths: Vec<usize> = (0..=n)
        .map(|i| match i {
            0 => cfg.d_in,
            i if i == n => cfg.d_out,
            _ => cfg.d_hidden,
        })
        .collect();
    let x = t.b.arg("x", TensorType::f32([cfg.batch, cfg.d_in]));
    let y = t.b.arg("y", TensorType::f32([cfg.batch, cfg.d_out]));
    let mut ws = Vec::new();
    let mut bs = Vec::new();
    for l in 0..n {
        ws.push(t.b.arg(&format!("w{l}"), TensorType::f32([widths[l], widths[l + 1]])));
        bs.push(t.b.arg(&format!("b{l}"), TensorType::f32([widths[l + 1]])));
    }
    let mut mws = Vec::new();
    let mut mbs = Vec::new();
    for l in 0..n {
        mws.push(t.b.arg(&format!("m_w{l}"), TensorType::f32([widths[l], widths[l + 1]])));
        mbs.push(t.b.arg(&format!("m_b{l}"), TensorType::f32([widths[l + 1]])));
    }

    let mut acts = vec![x];
    let mut pre = Vec::new();
    let mut pred = x;
    for l in 0..n {
        let mm = t.b.matmul(acts[l], ws[l]);
        let bb = t.b.broadcast(bs[l], vec![1], vec![cfg.batch, widths[l + 1]]);
        let z = t.b.add(mm, bb);
        if l + 1 < n {
            let a = t.bump(z);
            pre.push(z);
            acts.push(a);
        } else {
            pred = t.b.tag(z, "pred");
        }
    }
    let (loss, mut g) = t.sq_loss(pred, y);
    let mut grads = vec![(ValueId(0), ValueId(0)); n];
    let mut dx = g;
    for l in (0..n).rev() {
        let at = t.b.t(acts[l]);
        let dw = t.b.matmul(at, g);
        let db = t.b.reduce(g, vec![0], Monoid::Sum);
        grads[l] = (dw, db);
        let wt = t.b.t(ws[l]);
        let ga = t.b.matmul(g, wt);
        if l > 0 {
            // d/dz exp(-z^2) = -2 z exp(-z^2)
            let za = t.b.mul(pre[l - 1], acts[l]);
            let m2 = t.splat(-2.0, za);
            let d = t.b.mul(m2, za);
            g = t.b.mul(ga, d);
        } else {
            dx = ga;
        }
    }
    let mut ps = Vec::new();
    for l in 0..n {
        ps.push((format!("w{l}"), ws[l], mws[l], grads[l].0));
        ps.push((format!("b{l}"), bs[l], mbs[l], grads[l].1));
    }
    // keep argument order w0, b0, w1, b1, ... for the parameter list
    t.finish(loss, dx, &ps)
}

fn transformer(cfg: &ZooConfig) -> (crate::ir::Func, Vec<String>, Vec<String>) {
    let mut t = Train {
        b: FuncBuilder::new("main"),
        beta: cfg.beta,
        lr: cfg.lr,
    };
    let (bt, d, f) = (cfg.batch, cfg.d_in, cfg.d_hidden);
    let x = t.b.arg("x", TensorType::f32([bt, d]));
    let y = t.b.arg("y", TensorType::f32([bt, d]));
    let names = ["wq", "wo", "w1", "w2"];
    let shape = |k: usize| if k % 2 == 0 { [d, f] } else { [f, d] };
    let mut ws = Vec::new();
    for i in 0..cfg.blocks {
        for (k, n) in names.iter().enumerate() {
            ws.push(t.b.arg(&format!("blk{i}_{n}"), TensorType::f32(shape(k))));
        }
    }
    let mut ms = Vec::new();
    for i in 0..cfg.blocks {
        for (k, n) in names.iter().enumerate() {
            ms.push(t.b.arg(&format!("m_blk{i}_{n}"), TensorType::f32(shape(k))));
        }
    }

    struct Saved {
        x: ValueId,
        h: ValueId,
        gh: ValueId,
        a: ValueId,
        o: ValueId,
        u: ValueId,
        v: ValueId,
    }
    let mut saved = Vec::new();
    let mut cur = x;
    for i in 0..cfg.blocks {
        let [wq, wo, w1, w2] = [ws[4 * i], ws[4 * i + 1], ws[4 * i + 2], ws[4 * i + 3]];
        // gated projection standing in for attention
        let h = t.b.matmul(cur, wq);
        let gh = t.bump(h);
        let a = t.b.mul(h, gh);
        let ao = t.b.matmul(a, wo);
        let o = t.b.add(ao, cur);
        // feed-forward
        let u = t.b.matmul(o, w1);
        let v = t.bump(u);
        let vo = t.b.matmul(v, w2);
        let out = t.b.add(vo, o);
        saved.push(Saved { x: cur, h, gh, a, o, u, v });
        cur = out;
    }
    let pred = t.b.tag(cur, "pred");
    let (loss, mut g) = t.sq_loss(pred, y);
    let mut grads = vec![ValueId(0); ws.len()];
    for i in (0..cfg.blocks).rev() {
        let s = &saved[i];
        let [wq, wo, w1, w2] = [ws[4 * i], ws[4 * i + 1], ws[4 * i + 2], ws[4 * i + 3]];
        let vt = t.b.t(s.v);
        grads[4 * i + 3] = t.b.matmul(vt, g);
        let w2t = t.b.t(w2);
        let dv = t.b.matmul(g, w2t);
        let uv = t.b.mul(s.u, s.v);
        let m2 = t.splat(-2.0, uv);
        let dvu = t.b.mul(m2, uv);
        let du = t.b.mul(dv, dvu);
        let ot = t.b.t(s.o);
        grads[4 * i + 2] = t.b.matmul(ot, du);
        let w1t = t.b.t(w1);
        let dof = t.b.matmul(du, w1t);
        let d_o = t.b.add(dof, g);

        let at = t.b.t(s.a);
        grads[4 * i + 1] = t.b.matmul(at, d_o);
        let wot = t.b.t(wo);
        let da = t.b.matmul(d_o, wot);
        // d/dh h exp(-h^2) = exp(-h^2) (1 - 2 h^2)
        let hh = t.b.mul(s.h, s.h);
        let m2 = t.splat(-2.0, hh);
        let th = t.b.mul(m2, hh);
        let one = t.splat(1.0, th);
        let fac = t.b.add(one, th);
        let dha = t.b.mul(s.gh, fac);
        let dh = t.b.mul(da, dha);
        let xt = t.b.t(s.x);
        grads[4 * i] = t.b.matmul(xt, dh);
        let wqt = t.b.t(wq);
        let dxa = t.b.matmul(dh, wqt);
        g = t.b.add(dxa, d_o);
    }
    let mut ps = Vec::new();
    for i in 0..cfg.blocks {
        for (k, n) in names.iter().enumerate() {
            let j = 4 * i + k;
            ps.push((format!("blk{i}_{n}"), ws[j], ms[j], grads[j]));
        }
    }
    t.finish(loss, g, &ps)
}

/// Named schedules that fit a model kind.
pub fn cookbook(model: &ZooModel) -> Vec<(String, Vec<Tactic>)> {
    use Sharding::{Dim, FirstDivisibleDim as Fdd, Replicated};
    let manual = Tactic::manual;
    let mut out: Vec<(String, Vec<Tactic>)> = Vec::new();
    let mut add = |name: &str, ts: Vec<Tactic>| out.push((name.to_string(), ts));
    match model.kind {
        ModelKind::Chain => {
            let bp = manual("BP", "B", &[("x", Dim(0))]);
            let mp = manual("MP", "M", &[("w1", Dim(1))]);
            add("BP", vec![bp.clone()]);
            add("MP", vec![mp.clone()]);
            add("BP+MP", vec![bp.clone(), mp.clone()]);
            add("BP+MP+Z2", vec![bp.clone(), mp.clone(), manual("Z2", "B", &[("w*", Replicated)])]);
            add(
                "BP+MP+Z3",
                vec![bp, mp, manual("Z3", "B", &[("w1", Dim(0)), ("w2", Dim(1))])],
            );
        }
        ModelKind::TransposeDiag => {
            add("BP", vec![manual("BP", "B", &[("x", Dim(0))])]);
            add("atomic-BP", vec![manual("atomic-BP", "B", &[("tx", Replicated), ("x", Dim(0))])]);
            add("MP", vec![manual("MP", "M", &[("x", Dim(1))])]);
        }
        ModelKind::MlpTrain => {
            let bp = manual("BP", "B", &[("x", Dim(0)), ("y", Dim(0))]);
            let layers = model.params.len() / 2;
            let mut pairs: Vec<(String, Sharding)> = Vec::new();
            for l in (0..layers.saturating_sub(1)).step_by(2) {
                pairs.push((format!("w{l}"), Dim(1)));
                pairs.push((format!("b{l}"), Dim(0)));
                pairs.push((format!("w{}", l + 1), Dim(0)));
            }
            let pairs_ref: Vec<(&str, Sharding)> = pairs.iter().map(|(k, v)| (k.as_str(), *v)).collect();
            let mp = manual("MP", "M", &pairs_ref);
            let z2 = manual("Z2", "B", &[("w*", Replicated), ("m_w*", Fdd)]);
            let z3 = manual("Z3", "B", &[("w*", Fdd), ("m_w*", Fdd)]);
            let es = manual("ES", "M", &[("x", Dim(1)), ("pred", Dim(1))]);
            add("BP", vec![bp.clone()]);
            add("MP", vec![mp.clone()]);
            add("BP+MP", vec![bp.clone(), mp.clone()]);
            add("BP+MP+Z2", vec![bp.clone(), mp.clone(), z2.clone()]);
            add("BP+MP+Z3", vec![bp.clone(), mp.clone(), z3.clone()]);
            add("BP+MP+ES", vec![bp.clone(), mp, es]);
            add("BP+Z2", vec![bp.clone(), z2]);
            add("BP+Z3", vec![bp, z3]);
        }
        ModelKind::MiniTransformerTrain => {
            let bp = manual("BP", "B", &[("x", Dim(0)), ("y", Dim(0))]);
            let mp = manual(
                "MP",
                "M",
                &[("*_wq", Dim(1)), ("*_wo", Dim(0)), ("*_w1", Dim(1)), ("*_w2", Dim(0))],
            );
            let z2 = manual("Z2", "B", &[("blk*", Replicated), ("m_*", Fdd)]);
            let z3 = manual("Z3", "B", &[("blk*", Fdd), ("m_*", Fdd)]);
            add("BP", vec![bp.clone()]);
            add("MP", vec![mp.clone()]);
            add("BP+MP", vec![bp.clone(), mp.clone()]);
            add("BP+MP+Z2", vec![bp.clone(), mp.clone(), z2.clone()]);
            add("BP+MP+Z3", vec![bp.clone(), mp, z3]);
            add("BP+Z2", vec![bp, z2]);
        }
    }
    out
}
