use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ptplace_core::config::{describe, ConfigError};
use ptplace_core::{run_scenario, PtPolicy, Report, RunConfig};

#[derive(Parser)]
#[command(name = "ptplace", version, about = "Page-table placement simulator for tiered memory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every table policy with and without leaf migration.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write each cell's report under this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_OOM: u8 = 3;

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn load(path: &Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut c = RunConfig::load(path).map_err(|e: ConfigError| Failure::Config(e.into()))?;
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c.effective())
}

fn execute(c: &RunConfig) -> Result<Report, Failure> {
    run_scenario(&c.engine_config(), &c.scenario, c.seed).map_err(|e| match e {
        ptplace_core::EngineError::Config(m) => Failure::Config(anyhow::anyhow!(m)),
        other => Failure::Runtime(other.into()),
    })
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<u8, Failure> {
    let mut c = load(config, seed)?;
    if out.is_some() {
        c.output_dir = out;
    }
    let dir = c.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let report = execute(&c)?;
    report
        .write_to(&dir, &c.to_toml())
        .with_context(|| format!("writing report to {}", dir.display()))
        .map_err(Failure::Runtime)?;
    let g = &report.global;
    println!(
        "{} seed={} total_cycles={} walk_cycles={} stall_cycles={} tlb_misses={} l4_success={}",
        report.scenario,
        report.seed,
        g.total_cycles,
        g.walk_cycles,
        g.stall_cycles,
        g.tlb_misses,
        report.migration.l4_success
    );
    println!("report: {}", dir.display());
    Ok(if report.primary_oom_killed() { EXIT_OOM } else { 0 })
}

struct Cell {
    name: String,
    report: Result<Report, String>,
}

fn matrix(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<u8, Failure> {
    let base = load(config, seed)?;
    let mut cells = Vec::new();
    for pt in [PtPolicy::FollowData, PtPolicy::BindAll, PtPolicy::BindHigh] {
        for mig in [false, true] {
            let mut c = base.clone();
            c.policy.pt_policy = pt;
            c.policy.pte_migration = mig;
            let name = format!("{}{}", policy_name(pt), if mig { "+mig" } else { "" });
            cells.push((name, c));
        }
    }
    let results: Vec<Cell> = thread::scope(|s| {
        let handles: Vec<_> = cells
            .iter()
            .map(|(name, c)| {
                s.spawn(move || Cell {
                    name: name.clone(),
                    report: run_scenario(&c.engine_config(), &c.scenario, c.seed).map_err(|e| e.to_string()),
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("matrix cell panicked")).collect()
    });

    if let Some(dir) = &out {
        for (cell, (_, c)) in results.iter().zip(&cells) {
            if let Ok(r) = &cell.report {
                let d = dir.join(cell.name.replace('+', "_"));
                r.write_to(&d, &c.to_toml())
                    .with_context(|| format!("writing {}", d.display()))
                    .map_err(Failure::Runtime)?;
            }
        }
    }

    let baseline = results[0].report.as_ref().ok().and_then(|r| r.primary()).map(|p| p.accounting.clone());
    println!(
        "{:<18} {:>14} {:>14} {:>14} {:>8} {:>8} {:>8}  status",
        "policy", "total_cycles", "walk_cycles", "stall_cycles", "total", "walk", "stall"
    );
    let norm = |v: u64, b: Option<u64>| match b {
        Some(b) if b > 0 => format!("{:.3}", v as f64 / b as f64),
        _ => "-".into(),
    };
    let mut failed = false;
    for cell in &results {
        match &cell.report {
            Ok(r) => {
                let Some(p) = r.primary() else { continue };
                let a = &p.accounting;
                let b = baseline.as_ref();
                let status = if r.primary_oom_killed() { "oom_killed" } else { "ok" };
                println!(
                    "{:<18} {:>14} {:>14} {:>14} {:>8} {:>8} {:>8}  {status}",
                    cell.name,
                    a.total_cycles,
                    a.walk_cycles,
                    a.stall_cycles,
                    norm(a.total_cycles, b.map(|b| b.total_cycles)),
                    norm(a.walk_cycles, b.map(|b| b.walk_cycles)),
                    norm(a.stall_cycles, b.map(|b| b.stall_cycles)),
                );
            }
            Err(e) => {
                failed = true;
                println!("{:<18} error: {e}", cell.name);
            }
        }
    }
    Ok(if failed { EXIT_RUNTIME } else { 0 })
}

fn policy_name(p: PtPolicy) -> &'static str {
    match p {
        PtPolicy::FollowData => "follow_data",
        PtPolicy::BindAll => "bind_all",
        PtPolicy::BindHigh => "bind_high",
    }
}

fn validate(config: &Path) -> Result<u8, Failure> {
    let c = load(config, None)?;
    println!("ok: scenario {}", c.scenario.kind);
    for line in describe(&c.topology) {
        println!("  {line}");
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run { config, seed, out } => run(&config, seed, out),
        Cmd::Matrix { config, seed, out } => matrix(&config, seed, out),
        Cmd::Validate { config } => validate(&config),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
