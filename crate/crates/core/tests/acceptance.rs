//! One line per criterion. Run with `cargo test --test acceptance`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tilepart::ir::{interpret_exact, parse_module, print_module, Module, OpKind, Tensor};
use tilepart::nest::NestProgram;
use tilepart::schedule::{auto_partition, run_schedule, AutomaticPartition, Partitioner, SearchMode, Sharding, Tactic};
use tilepart::sim::{estimate, DeviceSpec};
use tilepart::spmd::{
    count_collectives, differential_check, fuse_collectives, spmd_interpret, to_device_program, CollectiveCounts,
    FuseOptions, Layout, ShardingSpec,
};
use tilepart::zoo::{cookbook, generate_model, ModelKind, ZooConfig, ZooModel};

const DIFF_TOL: f64 = 1e-5;
const DIFF_TRIALS: usize = 20;
const DIFF_BUDGET: Duration = Duration::from_secs(60);
const FUSE_TOL: f64 = 1e-5;
const TMR_TOL: f64 = 1e-5;
const TMR_INSTANCES: usize = 50;
const FD_TOL: f64 = 1e-3;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn cfg(kind: ModelKind) -> ZooConfig {
    ZooConfig::for_kind(kind)
}

fn model(kind: ModelKind, cfg: &ZooConfig) -> ZooModel {
    generate_model(kind, cfg).unwrap()
}

fn schedule(m: &ZooModel, name: &str) -> Vec<Tactic> {
    cookbook(m)
        .into_iter()
        .find(|(n, _)| n == name)
        .unwrap_or_else(|| panic!("no schedule {name} for {}", m.kind))
        .1
}

fn counts(m: &Module, tactics: &[Tactic]) -> (CollectiveCounts, usize) {
    let out = run_schedule(m, None, tactics, &DeviceSpec::tpu_v3_core()).unwrap();
    (count_collectives(&out.device.module), out.conflicts().len())
}

fn show(c: &CollectiveCounts) -> String {
    format!("AG={} AR={} RS={} A2A={}", c.all_gather, c.all_reduce, c.reduce_scatter, c.all_to_all)
}

fn differential() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    let mut models: Vec<ZooModel> = ModelKind::ALL.iter().map(|&k| model(k, &cfg(k))).collect();
    for layers in [1, 4] {
        models.push(model(ModelKind::MlpTrain, &ZooConfig { layers, ..cfg(ModelKind::MlpTrain) }));
    }
    models.push(model(
        ModelKind::MiniTransformerTrain,
        &ZooConfig { blocks: 2, ..cfg(ModelKind::MiniTransformerTrain) },
    ));
    for m in &models {
        let kind = m.kind;
        for (name, tactics) in cookbook(m) {
            let out = run_schedule(&m.module, None, &tactics, &DeviceSpec::tpu_v3_core())
                .map_err(|e| format!("{kind}/{name}: {e}"))?;
            let r = differential_check(&m.module, &out.device, DIFF_TRIALS, 17).map_err(|e| format!("{kind}/{name}: {e}"))?;
            ensure!(r.max_rel_err < DIFF_TOL, "{kind}/{name}: rel err {:e} >= {DIFF_TOL:e}", r.max_rel_err);
            worst = worst.max(r.max_rel_err);
            runs += 1;
        }
    }
    let t = start.elapsed();
    ensure!(t < DIFF_BUDGET, "took {:.1} s, budget {} s", t.as_secs_f64(), DIFF_BUDGET.as_secs());
    Ok(format!(
        "{runs} model/schedule pairs x {DIFF_TRIALS} trials, max rel err {worst:.2e} < {DIFF_TOL:e}, {:.1} s < {} s",
        t.as_secs_f64(),
        DIFF_BUDGET.as_secs()
    ))
}

fn chain_oracle() -> Outcome {
    let m = model(ModelKind::Chain, &cfg(ModelKind::Chain));
    let bp = Tactic::manual("BP", "B", &[("x", Sharding::Dim(0))]);
    let mp = Tactic::manual("MP", "M", &[("w1", Sharding::Dim(1))]);
    let z3 = Tactic::manual("Z3", "B", &[("w1", Sharding::Dim(0)), ("w2", Sharding::Dim(1))]);
    let spec = DeviceSpec::tpu_v3_core();

    let out = run_schedule(&m.module, None, &[bp.clone()], &spec).unwrap();
    let c = count_collectives(&out.device.module);
    ensure!(c == CollectiveCounts::default(), "[BP]: {c:?}");
    let local = &out.device.spec.inputs[0].local;
    ensure!(local == &vec![64, 8], "[BP]: local x is {local:?}");

    let out = run_schedule(&m.module, None, &[bp.clone(), mp.clone()], &spec).unwrap();
    let c = count_collectives(&out.device.module);
    ensure!(c.communicating() == 1 && c.all_reduce == 1, "[BP,MP]: {}", show(&c));
    let mut axes = Vec::new();
    out.device.module.main().unwrap().body.walk(&mut |op| {
        if let OpKind::AllReduce { axes: a, .. } = &op.kind {
            axes = a.clone();
        }
    });
    ensure!(axes == ["M"], "[BP,MP]: all_reduce over {axes:?}");

    let (c, _) = counts(&m.module, &[bp, mp, z3]);
    ensure!(
        c.all_gather == 2 && c.all_reduce == 1 && c.reduce_scatter == 0 && c.all_to_all == 0,
        "[BP,MP,Z3]: {}",
        show(&c)
    );
    Ok("[BP] 0 collectives, x local 64x8; [BP,MP] 1 AR over M; [BP,MP,Z3] AG=2 AR=1".into())
}

fn counting_rules() -> Outcome {
    let mut seen = Vec::new();
    for layers in [1, 2, 4] {
        let m = model(ModelKind::MlpTrain, &ZooConfig { layers, ..cfg(ModelKind::MlpTrain) });
        let params = m.params.len();
        let sharded = m.params.iter().filter(|p| p.starts_with('w')).count();
        ensure!(params == 2 * (layers + 1) && sharded == layers + 1, "mlp L={layers}: {:?}", m.params);
        let (bp, _) = counts(&m.module, &schedule(&m, "BP"));
        ensure!(
            bp.all_reduce == params + 1 && bp.communicating() == bp.all_reduce,
            "mlp L={layers} BP: {} want AR={}",
            show(&bp),
            params + 1
        );
        let (z2, _) = counts(&m.module, &schedule(&m, "BP+Z2"));
        let want = (sharded, bp.all_reduce - sharded, sharded);
        ensure!(
            (z2.all_gather, z2.all_reduce, z2.reduce_scatter) == want && z2.all_to_all == 0,
            "mlp L={layers} BP+Z2: {} want AG={} AR={} RS={}",
            show(&z2),
            want.0,
            want.1,
            want.2
        );
        let (z3, _) = counts(&m.module, &schedule(&m, "BP+Z3"));
        let want = (2 * sharded, bp.all_reduce - sharded, sharded);
        ensure!(
            (z3.all_gather, z3.all_reduce, z3.reduce_scatter) == want && z3.all_to_all == 0,
            "mlp L={layers} BP+Z3: {} want AG={} AR={} RS={}",
            show(&z3),
            want.0,
            want.1,
            want.2
        );
        seen.push(format!("mlp L={layers} AR={}", bp.all_reduce));
    }
    for blocks in [1, 2] {
        let m = model(
            ModelKind::MiniTransformerTrain,
            &ZooConfig { blocks, ..cfg(ModelKind::MiniTransformerTrain) },
        );
        let sharded = m.params.len();
        ensure!(sharded == 4 * blocks, "transformer N={blocks}: {:?}", m.params);
        let (bp, _) = counts(&m.module, &schedule(&m, "BP"));
        ensure!(bp.all_reduce == sharded + 1, "transformer N={blocks} BP: {}", show(&bp));
        let (bpmp, _) = counts(&m.module, &schedule(&m, "BP+MP"));
        ensure!(
            bpmp.all_reduce == bp.all_reduce + 4 * blocks && bpmp.communicating() == bpmp.all_reduce,
            "transformer N={blocks} BP+MP: {} want AR={}",
            show(&bpmp),
            bp.all_reduce + 4 * blocks
        );
        let (z2, _) = counts(&m.module, &schedule(&m, "BP+MP+Z2"));
        let want = (sharded, bpmp.all_reduce - sharded, sharded);
        ensure!(
            (z2.all_gather, z2.all_reduce, z2.reduce_scatter) == want && z2.all_to_all == 0,
            "transformer N={blocks} BP+MP+Z2: {}",
            show(&z2)
        );
        let (z3, _) = counts(&m.module, &schedule(&m, "BP+MP+Z3"));
        let want = (2 * sharded, bpmp.all_reduce - sharded, sharded);
        ensure!(
            (z3.all_gather, z3.all_reduce, z3.reduce_scatter) == want && z3.all_to_all == 0,
            "transformer N={blocks} BP+MP+Z3: {}",
            show(&z3)
        );
        seen.push(format!("transformer N={blocks} +{} AR", bpmp.all_reduce - bp.all_reduce));
    }
    Ok(seen.join(", "))
}

fn conflict_incrementality() -> Outcome {
    let m = model(ModelKind::Chain, &cfg(ModelKind::Chain));
    let mut p = Partitioner::new(&m.module, None, DeviceSpec::tpu_v3_core()).unwrap();
    let both = Tactic::manual("both", "B", &[("x", Sharding::Dim(0)), ("w1", Sharding::Dim(1))]);
    let r = p.apply(&both).unwrap();
    ensure!(r.conflicts.len() == 1, "batched: {} conflicts", r.conflicts.len());

    let mut p = Partitioner::new(&m.module, None, DeviceSpec::tpu_v3_core()).unwrap();
    let r1 = p.apply(&Tactic::manual("x", "B", &[("x", Sharding::Dim(0))])).unwrap().clone();
    let r2 = p.apply(&Tactic::manual("w1", "B", &[("w1", Sharding::Dim(1))])).unwrap().clone();
    ensure!(r1.conflicts.is_empty() && r2.conflicts.is_empty(), "sequential: conflicts {:?} {:?}", r1.conflicts, r2.conflicts);
    let blocked = r2.blocked.iter().find(|b| b.axis == "B" && b.explanation.contains("w1"));
    ensure!(blocked.is_some(), "sequential: w1 not blocked: {:?}", r2.blocked);
    Ok("batched 1 conflict; sequential 0 conflicts, w1 blocked on B".into())
}

fn tag_atomic() -> Outcome {
    let m = model(ModelKind::TransposeDiag, &cfg(ModelKind::TransposeDiag));
    let spec = DeviceSpec::tpu_v3_core();
    let out = run_schedule(&m.module, None, &schedule(&m, "BP"), &spec).unwrap();
    let r = &out.reports()[0];
    ensure!(!r.conflicts.is_empty() || !r.blocked.is_empty(), "plain BP: no conflict or block");

    let out = run_schedule(&m.module, None, &schedule(&m, "atomic-BP"), &spec).unwrap();
    let f = out.device.module.main().unwrap();
    let c = count_collectives(&out.device.module);
    ensure!(c.all_gather == 1 && c.communicating() == 1, "atomic-BP: {}", show(&c));
    let gathered: Vec<_> = f
        .body
        .ops
        .iter()
        .filter(|o| matches!(o.kind, OpKind::AllGather { .. }))
        .map(|o| o.results[0])
        .collect();
    let feeds = f
        .body
        .ops
        .iter()
        .any(|o| o.kind == OpKind::Matmul && gathered.contains(&o.operands[1]) && !gathered.contains(&o.operands[0]));
    ensure!(feeds, "all_gather does not feed the matmul rhs:\n{}", print_module(&out.device.module));
    Ok(format!("BP alone: {} conflicts, {} blocked; atomic tx: 1 AG into matmul rhs", r.conflicts.len(), r.blocked.len()))
}

fn layout(name: &str, global: &[usize], local: &[usize], axes: &[&[&str]]) -> Layout {
    Layout {
        name: name.into(),
        global: global.to_vec(),
        local: local.to_vec(),
        axes: axes.iter().map(|a| a.iter().map(|s| s.to_string()).collect()).collect(),
    }
}

fn fusion_rules() -> Outcome {
    struct Case {
        name: &'static str,
        src: &'static str,
        input: Layout,
        output: Layout,
        expect: &'static str,
        oracle: fn(&Tensor) -> Tensor,
    }
    let cases = [
        Case {
            name: "slice of reduce",
            src: "mesh = {M:2}
func @main(%x: tensor<8x4xf32>) -> tensor<8x2xf32> {
  %r = all_reduce [\"M\"] %x : tensor<8x4xf32>
  %s = all_slice [[],[\"M\"]] %r : tensor<8x2xf32>
  return %s
}",
            input: layout("x", &[16, 4], &[8, 4], &[&["M"], &[]]),
            output: layout("s", &[8, 4], &[8, 2], &[&[], &["M"]]),
            expect: "reduce_scatter [\"M\"] [[],[\"M\"]] %x",
            oracle: |x| common::chunk(x, 0, 2, 0).zip(&common::chunk(x, 0, 2, 1), |a, b| a + b).unwrap(),
        },
        Case {
            name: "gather then slice across dims",
            src: "mesh = {M:2}
func @main(%x: tensor<4x8xf32>) -> tensor<8x4xf32> {
  %g = all_gather [[\"M\"],[]] %x : tensor<8x8xf32>
  %s = all_slice [[],[\"M\"]] %g : tensor<8x4xf32>
  return %s
}",
            input: layout("x", &[8, 8], &[4, 8], &[&["M"], &[]]),
            output: layout("s", &[8, 8], &[8, 4], &[&[], &["M"]]),
            expect: "all_to_all 0->1 [\"M\"] %x",
            oracle: |x| x.clone(),
        },
        Case {
            name: "slice cancels gather",
            src: "mesh = {B:4}
func @main(%x: tensor<8x4xf32>) -> tensor<8x4xf32> {
  %g = all_gather [[\"B\"],[]] %x : tensor<32x4xf32>
  %s = all_slice [[\"B\"],[]] %g : tensor<8x4xf32>
  return %s
}",
            input: layout("x", &[32, 4], &[8, 4], &[&["B"], &[]]),
            output: layout("s", &[32, 4], &[8, 4], &[&["B"], &[]]),
            expect: "return %x",
            oracle: |x| x.clone(),
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for c in &cases {
        let before = parse_module(c.src).unwrap();
        let after = fuse_collectives(&before);
        let text = print_module(&after);
        ensure!(text.contains(c.expect), "{}: expected `{}` in\n{text}", c.name, c.expect);
        if c.expect == "return %x" {
            ensure!(!text.contains("all_"), "{}: collectives left in\n{text}", c.name);
        }
        let spec = ShardingSpec {
            mesh: "".into(),
            inputs: vec![c.input.clone()],
            outputs: vec![c.output.clone()],
        };
        for _ in 0..5 {
            let x = Tensor::random(tilepart::ir::TensorType::f32(c.input.global.clone()), &mut rng);
            let a = spmd_interpret(&before, &spec, &[x.clone()]).map_err(|e| format!("{}: {e}", c.name))?;
            let b = spmd_interpret(&after, &spec, &[x.clone()]).map_err(|e| format!("{}: {e}", c.name))?;
            let want = (c.oracle)(&x);
            let e = a[0].rel_err(&want).max(b[0].rel_err(&want));
            ensure!(e < FUSE_TOL, "{}: rel err {e:e}", c.name);
        }
    }
    Ok(format!("reduce_scatter, all_to_all, cancellation; golden text and semantics within {FUSE_TOL:e}"))
}

fn tmr_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = common::tmr_soundness(TMR_INSTANCES, TMR_TOL, &mut rng)?;
    Ok(format!(
        "{n} entry checks over {} op families x {TMR_INSTANCES} shapes, rel err < {TMR_TOL:e}",
        common::FAMILIES
    ))
}

fn objective(p: &NestProgram, spec: &DeviceSpec, penalty: f64) -> f64 {
    let dp = to_device_program(&p.to_module(), &FuseOptions::default()).unwrap();
    let e = estimate(&dp.module, spec);
    e.estimated_runtime_sec + penalty * (e.peak_live_bytes as f64 - spec.hbm_bytes).max(0.0)
}

/// Every sequence of (tile, propagate) steps on `axis`, depth first.
fn brute_force(p: &NestProgram, axis: &str, spec: &DeviceSpec, visited: &mut usize) -> f64 {
    *visited += 1;
    let mut best = objective(p, spec, 1.0);
    let names: Vec<String> = p.func.params().iter().filter_map(|&v| p.func.name(v).map(str::to_string)).collect();
    for name in names {
        let v = p.resolve(&name).unwrap();
        for d in 0..p.ty(v).rank() {
            let mut q = p.clone();
            if q.tile(v, d, axis).is_ok() {
                q.propagate();
                best = best.min(brute_force(&q, axis, spec, visited));
            }
        }
    }
    best
}

fn simulator_relatives() -> Outcome {
    let spec = DeviceSpec::tpu_v3_core();
    let c = cfg(ModelKind::Chain);
    let full = 2 * c.batch * c.d_in * c.d_hidden + 2 * c.batch * c.d_hidden * c.d_out;
    let bp = Tactic::manual("BP", "B", &[("x", Sharding::Dim(0))]);
    for d in [2usize, 4, 8] {
        let mut m = model(ModelKind::Chain, &c).module;
        m.mesh = Some(format!("{{B:{d}, M:2}}").parse().unwrap());
        let base = run_schedule(&m, None, &[], &spec).unwrap();
        let e0 = estimate(&base.device.module, &spec);
        ensure!(e0.per_device_flops == full as u64, "unpartitioned flops {} != {full}", e0.per_device_flops);
        let out = run_schedule(&m, None, &[bp.clone()], &spec).unwrap();
        let e = estimate(&out.device.module, &spec);
        ensure!(
            e.per_device_flops * d as u64 == full as u64,
            "BP over {d}: flops {} != {full}/{d}",
            e.per_device_flops
        );
    }

    let m = model(ModelKind::Chain, &c);
    let peak = |name: &str| {
        let out = run_schedule(&m.module, None, &schedule(&m, name), &spec).unwrap();
        estimate(&out.device.module, &spec).peak_live_bytes
    };
    let (pbp, pz3) = (peak("BP"), peak("BP+MP+Z3"));
    ensure!(pz3 < pbp, "peak Z3 {pz3} !< BP {pbp}");

    let mut m = m.module.clone();
    m.mesh = Some("{M:2}".parse().unwrap());
    let p = NestProgram::from_module(&m).unwrap();
    let mut visited = 0;
    let oracle = brute_force(&p, "M", &spec, &mut visited);
    let cfg = AutomaticPartition {
        mode: SearchMode::Exhaustive,
        ..AutomaticPartition::new(&["M"], 1)
    };
    let r = auto_partition(&p, &cfg, &spec, &FuseOptions::default());
    ensure!(r.objective == oracle, "auto {} != brute force {oracle}", r.objective);
    Ok(format!(
        "flops x1/d exact for d in 2,4,8; peak Z3 {pz3} B < BP {pbp} B; auto = brute force over {visited} states ({:.3e} s)",
        oracle
    ))
}

/// Central differences of the loss against the gradient the program
/// computes, with zero momenta so the new momenta equal the gradients.
fn fd_check(m: &ZooModel) -> Result<f64, String> {
    let f = m.module.main().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut xs: Vec<Tensor> = f.param_types().into_iter().map(|t| Tensor::random(t, &mut rng)).collect();
    let index = |name: &str| f.params().iter().position(|&v| f.name(v) == Some(name)).unwrap();
    for mname in &m.momenta {
        let i = index(mname);
        xs[i] = Tensor::zeros(xs[i].ty.clone());
    }
    let outs = interpret_exact(&m.module, &xs).unwrap();
    let np = m.params.len();
    let mut targets: Vec<(String, usize, Tensor)> = m
        .params
        .iter()
        .enumerate()
        .map(|(j, p)| (p.clone(), index(p), outs[2 + np + j].clone()))
        .collect();
    targets.push(("x".into(), index("x"), outs[1].clone()));
    let loss = |xs: &[Tensor]| interpret_exact(&m.module, xs).unwrap()[0].data[0];
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (name, i, grad) in targets {
        let mut fd = grad.clone();
        for k in 0..xs[i].data.len() {
            let orig = xs[i].data[k];
            xs[i].data[k] = orig + h;
            let up = loss(&xs);
            xs[i].data[k] = orig - h;
            let down = loss(&xs);
            xs[i].data[k] = orig;
            fd.data[k] = (up - down) / (2.0 * h);
        }
        let e = grad.rel_err(&fd);
        if e >= FD_TOL {
            return Err(format!("{} {name}: rel err {e:e}", m.kind));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

fn backward_validity() -> Outcome {
    let small = ZooConfig {
        batch: 4,
        d_in: 4,
        d_hidden: 8,
        d_out: 4,
        ..cfg(ModelKind::MlpTrain)
    };
    let mut worst: f64 = 0.0;
    for layers in [1, 2] {
        worst = worst.max(fd_check(&model(ModelKind::MlpTrain, &ZooConfig { layers, ..small.clone() }))?);
    }
    for blocks in [1, 2] {
        worst = worst.max(fd_check(&model(ModelKind::MiniTransformerTrain, &ZooConfig { blocks, ..small.clone() }))?);
    }
    Ok(format!("mlp L=1,2 and transformer N=1,2 at dims <= 8, max rel err {worst:.2e} < {FD_TOL:e}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("differential-semantics", differential),
        ("chain-oracle", chain_oracle),
        ("counting-rules", counting_rules),
        ("conflict-incrementality", conflict_incrementality),
        ("tag-atomic", tag_atomic),
        ("fusion-rules", fusion_rules),
        ("tmr-soundness", tmr_soundness),
        ("simulator-relatives", simulator_relatives),
        ("backward-validity", backward_validity),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let r = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match r {
            Ok(detail) => println!("PASS  {name:<24} {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<24} {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
