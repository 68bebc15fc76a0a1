//! `tilepart`: partition, check, and cost tensor programs from the shell.
//!
//! Exit codes: 0 success, 1 bad input, 2 conflicts remain after the
//! schedule, 3 the device program disagrees with the original.

/// Writes to stdout, ignoring a closed pipe.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

mod load;
mod report;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tilepart::ir::print_module;
use tilepart::schedule::{run_schedule_with, Partitioner};
use tilepart::spmd::{differential_check, FuseOptions};
use tilepart::zoo::{cookbook, generate_model, ModelKind, ZooConfig};

use load::Loaded;

/// Largest relative error `verify` accepts.
const TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "tilepart", version, about = "Schedule-driven SPMD partitioner for tensor programs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Apply a schedule, print collectives and cost, optionally dump every step.
    Partition {
        #[command(flatten)]
        input: Input,
        /// Directory for per-tactic IR, device programs and reports.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Run the device program against the original on random inputs.
    Verify {
        #[command(flatten)]
        input: Input,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Drops the first all_reduce after fusion. For testing the checker.
        #[arg(long, hide = true)]
        corrupt_fusion: bool,
    },
    /// Print the cost estimate of the partitioned program.
    Simulate {
        #[command(flatten)]
        input: Input,
    },
    /// Print collective counts after each tactic.
    Collectives {
        #[command(flatten)]
        input: Input,
    },
    /// Write a generated model as textual IR.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct Input {
    /// Textual IR file.
    #[arg(long)]
    module: PathBuf,
    /// Mesh such as `B:4,M:2`. Overrides the module's mesh header.
    #[arg(long)]
    mesh: Option<String>,
    /// JSON list of tactics. Without one the module stays unpartitioned.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Builtin device name or path to a device spec file.
    #[arg(long, default_value = "tpu-v3-core")]
    spec: String,
    /// Print JSON instead of tables.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenerateArgs {
    /// chain, mlp_train, mini_transformer_train or transpose_diag.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
    #[arg(long)]
    d_out: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the model's cookbook schedules here, one JSON file each.
    #[arg(long)]
    schedules_dir: Option<PathBuf>,
}

enum Status {
    Ok,
    Conflicts,
    Divergence,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Partition { input, dump_dir } => partition(&input, dump_dir),
        Cmd::Verify {
            input,
            trials,
            seed,
            corrupt_fusion,
        } => verify(&input, trials, seed, corrupt_fusion),
        Cmd::Simulate { input } => simulate(&input),
        Cmd::Collectives { input } => collectives(&input),
        Cmd::Generate(args) => generate(&args),
    };
    match r {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Conflicts) => ExitCode::from(2),
        Ok(Status::Divergence) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn partition(input: &Input, dump_dir: Option<PathBuf>) -> Result<Status> {
    let l = Loaded::from_input(input)?;
    let out = l.run(&FuseOptions::default())?;
    let p = &out.partitioner;
    let rows = report::rows(&l.initial()?, p);
    let (counts, cost, _) = p.cost();
    let remaining = p.state.clone().propagate();
    if let Some(dir) = &dump_dir {
        report::dump(dir, &out)?;
    }
    if input.json {
        let v = json!({
            "tactics": p.reports,
            "collectives": counts,
            "cost": cost,
            "conflicts": remaining.conflicts,
            "blocked": remaining.blocked,
            "sharding": out.device.spec,
            "spmd": print_module(&out.device.module),
        });
        outln!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        out!("{}", report::table(&rows));
        outln!();
        outln!("{cost}");
        report::print_problems(&remaining.conflicts, &remaining.blocked);
    }
    Ok(if remaining.conflicts.is_empty() { Status::Ok } else { Status::Conflicts })
}

fn verify(input: &Input, trials: usize, seed: u64, corrupt: bool) -> Result<Status> {
    let l = Loaded::from_input(input)?;
    let fuse = FuseOptions {
        drop_first_all_reduce: corrupt,
    };
    let out = l.run(&fuse)?;
    if trials == 0 {
        eprintln!("warning: --trials 0, nothing was checked");
    }
    let (err, why) = match differential_check(&l.module, &out.device, trials, seed) {
        Ok(r) => (r.max_rel_err, None),
        Err(e) => (f64::INFINITY, Some(e.to_string())),
    };
    let ok = err < TOLERANCE;
    if input.json {
        let v = json!({
            "trials": trials,
            "seed": seed,
            "max_rel_err": if err.is_finite() { json!(err) } else { json!(null) },
            "tolerance": TOLERANCE,
            "ok": ok,
            "error": why,
        });
        outln!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        match &why {
            Some(w) => outln!("divergence: {w}"),
            None => outln!("trials {trials}, seed {seed}, max relative error {err:.3e} (tolerance {TOLERANCE:e})"),
        }
        if why.is_none() && !ok {
            outln!("divergence: error above tolerance");
        }
    }
    Ok(if ok { Status::Ok } else { Status::Divergence })
}

fn simulate(input: &Input) -> Result<Status> {
    let l = Loaded::from_input(input)?;
    let out = l.run(&FuseOptions::default())?;
    let (_, cost, _) = out.partitioner.cost();
    if input.json {
        outln!("{}", serde_json::to_string_pretty(&cost)?);
    } else {
        outln!("device {}, {} devices", l.spec.name, out.partitioner.state.mesh.device_count());
        outln!("{cost}");
    }
    Ok(Status::Ok)
}

fn collectives(input: &Input) -> Result<Status> {
    let l = Loaded::from_input(input)?;
    let out = l.run(&FuseOptions::default())?;
    let rows = report::rows(&l.initial()?, &out.partitioner);
    if input.json {
        outln!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        out!("{}", report::table(&rows));
    }
    Ok(Status::Ok)
}

fn generate(args: &GenerateArgs) -> Result<Status> {
    let kind: ModelKind = args.kind.parse()?;
    let mut cfg = ZooConfig::for_kind(kind);
    let set = |field: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *field = v;
        }
    };
    set(&mut cfg.layers, args.layers);
    set(&mut cfg.blocks, args.blocks);
    set(&mut cfg.batch, args.batch);
    set(&mut cfg.d_in, args.d_in);
    set(&mut cfg.d_hidden, args.d_hidden);
    set(&mut cfg.d_out, args.d_out);
    let m = generate_model(kind, &cfg)?;
    let text = print_module(&m.module);
    match &args.out {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => out!("{text}"),
    }
    if let Some(dir) = &args.schedules_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (name, tactics) in cookbook(&m) {
            let p = dir.join(format!("{name}.json"));
            fs::write(&p, serde_json::to_string_pretty(&tactics)? + "\n").with_context(|| format!("writing {}", p.display()))?;
        }
    }
    Ok(Status::Ok)
}

impl Loaded {
    fn run(&self, fuse: &FuseOptions) -> Result<tilepart::schedule::ScheduleOutcome> {
        Ok(run_schedule_with(&self.module, self.mesh.clone(), &self.schedule, &self.spec, fuse)?)
    }

    /// The partitioner before any tactic.
    fn initial(&self) -> Result<Partitioner> {
        Ok(Partitioner::new(&self.module, self.mesh.clone(), self.spec.clone())?)
    }
}
