use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use tilepart::ir::{parse_module, Mesh, Module};
use tilepart::schedule::{parse_schedule, Tactic};
use tilepart::sim::DeviceSpec;

use crate::Input;

pub struct Loaded {
    pub module: Module,
    pub mesh: Option<Mesh>,
    pub schedule: Vec<Tactic>,
    pub spec: DeviceSpec,
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

/// A builtin name, or a file when one exists at that path.
pub fn device_spec(s: &str) -> Result<DeviceSpec> {
    let p = Path::new(s);
    if p.is_file() {
        return DeviceSpec::parse(&read(p)?).with_context(|| format!("device spec {s}"));
    }
    Ok(DeviceSpec::by_name(s)?)
}

impl Loaded {
    pub fn from_input(input: &Input) -> Result<Self> {
        let text = read(&input.module)?;
        let module = parse_module(&text).map_err(|e| anyhow!("{}:{e}", input.module.display()))?;
        let mesh = match &input.mesh {
            Some(m) => Some(m.parse::<Mesh>().with_context(|| format!("--mesh {m}"))?),
            None => None,
        };
        let schedule = match &input.schedule {
            Some(p) => parse_schedule(&read(p)?).with_context(|| format!("schedule {}", p.display()))?,
            None => Vec::new(),
        };
        let spec = device_spec(&input.spec)?;
        Ok(Self {
            module,
            mesh,
            schedule,
            spec,
        })
    }
}
