//! Analytical cost model for device programs: per-device flops, live-range
//! peak memory, ring-model collective traffic, and a sequential runtime
//! estimate.
//!
//! Device spec files are `key = value` lines; `#` starts a comment:
//!
//! ```text
//! name = my-chip
//! peak_flops_f32 = 1.0e14
//! peak_flops_i32 = 1.0e14
//! hbm_bytes = 1.6e10
//! link_bandwidth = 1.0e11
//! latency = 1e-6
//! ```

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ir::{ElemKind, Mesh, Module, OpKind, Type, ValueId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("unknown device spec `{name}` (available: {available})")]
    UnknownSpec { name: String, available: String },
    #[error("device spec is missing `{0}`")]
    MissingField(&'static str),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("`{0}` must be positive")]
    NonPositive(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    pub peak_flops_f32: f64,
    pub peak_flops_i32: f64,
    pub hbm_bytes: f64,
    pub link_bandwidth: f64,
    /// Fixed cost per collective, seconds.
    pub latency: f64,
}

impl DeviceSpec {
    pub fn peak_flops(&self, elem: ElemKind) -> f64 {
        match elem {
            ElemKind::F32 => self.peak_flops_f32,
            ElemKind::I32 => self.peak_flops_i32,
        }
    }

    pub fn tpu_v3_core() -> Self {
        Self {
            name: "tpu-v3-core".into(),
            peak_flops_f32: 61.5e12,
            peak_flops_i32: 61.5e12,
            hbm_bytes: 16.0 * (1u64 << 30) as f64,
            link_bandwidth: 70e9,
            latency: 1e-6,
        }
    }

    pub fn a100_40g() -> Self {
        Self {
            name: "a100-40g".into(),
            peak_flops_f32: 156e12,
            peak_flops_i32: 156e12,
            hbm_bytes: 40e9,
            link_bandwidth: 600e9,
            latency: 1e-6,
        }
    }

    pub fn builtin() -> Vec<DeviceSpec> {
        vec![Self::tpu_v3_core(), Self::a100_40g()]
    }

    pub fn by_name(name: &str) -> Result<Self, SimError> {
        Self::builtin()
            .into_iter()
            .find(|s| s.name == name)
            .ok_or_else(|| SimError::UnknownSpec {
                name: name.to_string(),
                available: Self::builtin().iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(", "),
            })
    }

    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut kv: HashMap<&str, &str> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| SimError::Syntax {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            kv.insert(k.trim(), v.trim());
        }
        let num = |key: &'static str| -> Result<f64, SimError> {
            let v = kv.get(key).ok_or(SimError::MissingField(key))?;
            let x: f64 = v.parse().map_err(|_| SimError::Syntax {
                line: 0,
                message: format!("`{key}` is not a number: `{v}`"),
            })?;
            if x > 0.0 {
                Ok(x)
            } else {
                Err(SimError::NonPositive(key))
            }
        };
        Ok(Self {
            name: kv.get("name").ok_or(SimError::MissingField("name"))?.to_string(),
            peak_flops_f32: num("peak_flops_f32")?,
            peak_flops_i32: num("peak_flops_i32")?,
            hbm_bytes: num("hbm_bytes")?,
            link_bandwidth: num("link_bandwidth")?,
            latency: num("latency")?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CollectiveCost {
    pub count: usize,
    /// Bytes sent per device.
    pub bytes: f64,
    pub time_sec: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CostEstimate {
    pub per_device_flops: u64,
    pub peak_live_bytes: u64,
    pub all_gather: CollectiveCost,
    pub all_reduce: CollectiveCost,
    pub reduce_scatter: CollectiveCost,
    pub all_to_all: CollectiveCost,
    pub compute_time_sec: f64,
    pub estimated_runtime_sec: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mfu_percent: Option<f64>,
}

impl CostEstimate {
    /// Bytes above device memory, zero when it fits.
    pub fn overflow_bytes(&self, spec: &DeviceSpec) -> f64 {
        (self.peak_live_bytes as f64 - spec.hbm_bytes).max(0.0)
    }

    pub fn with_mfu(mut self, model_flops: f64, devices: usize, spec: &DeviceSpec) -> Self {
        self.mfu_percent = compute_mfu(model_flops, self.estimated_runtime_sec, devices, spec.peak_flops_f32).ok();
        self
    }
}

impl fmt::Display for CostEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22}{:>16}", "per-device flops", self.per_device_flops)?;
        writeln!(f, "{:<22}{:>16}", "peak live bytes", self.peak_live_bytes)?;
        for (k, c) in [
            ("all_gather", &self.all_gather),
            ("all_reduce", &self.all_reduce),
            ("reduce_scatter", &self.reduce_scatter),
            ("all_to_all", &self.all_to_all),
        ] {
            writeln!(f, "{:<22}{:>16}  ({} ops, {:.3e} s)", format!("{k} bytes"), c.bytes, c.count, c.time_sec)?;
        }
        writeln!(f, "{:<22}{:>16.6e}", "compute time (s)", self.compute_time_sec)?;
        write!(f, "{:<22}{:>16.6e}", "runtime (s)", self.estimated_runtime_sec)?;
        if let Some(m) = self.mfu_percent {
            write!(f, "\n{:<22}{:>16.2}", "MFU (%)", m)?;
        }
        Ok(())
    }
}

/// `100 × (model_flops / step_time) / (devices × peak_flops)`.
pub fn compute_mfu(model_flops: f64, step_time_sec: f64, devices: usize, peak_flops: f64) -> Result<f64, SimError> {
    if !(model_flops > 0.0) {
        return Err(SimError::NonPositive("model_flops"));
    }
    if !(step_time_sec > 0.0) {
        return Err(SimError::NonPositive("step_time"));
    }
    if devices == 0 {
        return Err(SimError::NonPositive("devices"));
    }
    if !(peak_flops > 0.0) {
        return Err(SimError::NonPositive("peak_flops"));
    }
    Ok(100.0 * (model_flops / step_time_sec) / (devices as f64 * peak_flops))
}

/// Flops of `main` with no partitioning, as a model-flops figure for MFU.
pub fn model_flops(m: &Module) -> u64 {
    estimate(m, &DeviceSpec::tpu_v3_core()).per_device_flops
}

fn ring(n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        (n - 1) as f64 / n as f64
    }
}

/// Estimates the cost of running `main` of a device-local module. Ops run
/// strictly one after another; there is no compute/communication overlap.
pub fn estimate(m: &Module, spec: &DeviceSpec) -> CostEstimate {
    let mut est = CostEstimate::default();
    let Some(f) = m.main() else { return est };
    let trivial = Mesh::new(vec![("_".into(), 2)]).unwrap();
    let mesh = m.mesh.as_ref().unwrap_or(&trivial);
    let bytes = |v: ValueId| -> u64 {
        match f.ty(v) {
            Type::Tensor(t) => t.size_bytes() as u64,
            Type::Range(_) => 0,
        }
    };
    let ops = &f.body.ops;
    for op in ops {
        let out = f.tensor_ty(op.results[0]);
        let flops: u64 = match &op.kind {
            OpKind::Matmul => {
                let a = f.tensor_ty(op.operands[0]);
                2 * (a.dims[0] * a.dims[1] * out.dims[1]) as u64
            }
            OpKind::Add | OpKind::Mul | OpKind::Neg | OpKind::Exp => out.num_elements() as u64,
            OpKind::Reduce { .. } => f.tensor_ty(op.operands[0]).num_elements() as u64,
            _ => 0,
        };
        est.per_device_flops += flops;
        est.compute_time_sec += flops as f64 / spec.peak_flops(out.elem);
        let x = op.operands.first().map(|&v| bytes(v) as f64).unwrap_or(0.0);
        let y = bytes(op.results[0]) as f64;
        let (slot, b) = match &op.kind {
            OpKind::AllGather { axes } => (&mut est.all_gather, ring(mesh.group_size(&axes.concat())) * y),
            OpKind::AllReduce { axes, .. } => (&mut est.all_reduce, 2.0 * ring(mesh.group_size(axes)) * y),
            OpKind::ReduceScatter { axes, .. } => (&mut est.reduce_scatter, ring(mesh.group_size(axes)) * x),
            OpKind::AllToAll { axes, .. } => (&mut est.all_to_all, ring(mesh.group_size(axes)) * x),
            _ => continue,
        };
        slot.count += 1;
        slot.bytes += b;
        slot.time_sec += b / spec.link_bandwidth + spec.latency;
    }
    est.peak_live_bytes = peak_live(f, &bytes);
    est.estimated_runtime_sec = est.compute_time_sec
        + est.all_gather.time_sec
        + est.all_reduce.time_sec
        + est.reduce_scatter.time_sec
        + est.all_to_all.time_sec;
    est
}

/// Peak over program points of the bytes of values defined at or before the
/// point and used at or after it. Arguments are live from the start, results
/// until the end.
fn peak_live(f: &crate::ir::Func, bytes: &impl Fn(ValueId) -> u64) -> u64 {
    let ops = &f.body.ops;
    let end = ops.len() + 1;
    let mut def: HashMap<ValueId, usize> = HashMap::new();
    let mut last: HashMap<ValueId, usize> = HashMap::new();
    for &p in f.params() {
        def.insert(p, 0);
        last.insert(p, 0);
    }
    for (i, op) in ops.iter().enumerate() {
        for &r in &op.results {
            def.insert(r, i + 1);
            last.insert(r, i + 1);
        }
        for &v in &op.operands {
            last.insert(v, i + 1);
        }
    }
    for &v in f.returns() {
        last.insert(v, end);
    }
    let mut delta = vec![0i64; end + 2];
    for (v, &d) in &def {
        let b = bytes(*v) as i64;
        delta[d] += b;
        delta[last[v] + 1] -= b;
    }
    let mut cur = 0i64;
    let mut peak = 0i64;
    for d in delta {
        cur += d;
        peak = peak.max(cur);
    }
    peak as u64
}
