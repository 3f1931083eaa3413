//! Synthetic access streams, the evaluation scenarios built from them, and
//! a line-oriented trace format.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::addr::{NodeId, VirtAddr, PAGE_SIZE};
use crate::engine::{Engine, EngineConfig, EngineError, ExitCond, ProcessPlan, StartCond, ThreadPlan};
use crate::page_table::PageSizeMode;
use crate::report::Report;
use crate::topology::{Tier, Topology};

/// Start of every generated address space.
pub const HEAP_BASE: u64 = 0x7f00_0000_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Populate,
    Access,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Access { va: VirtAddr, write: bool, phase: Phase },
    /// Instructions with no memory traffic.
    Compute(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    Zipfian,
    Uniform,
}

fn default_true() -> bool {
    true
}
fn default_theta() -> f64 {
    0.99
}
fn default_read_ratio() -> f64 {
    0.95
}
fn default_threads() -> usize {
    1
}
fn default_dist() -> Distribution {
    Distribution::Zipfian
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub footprint_bytes: u64,
    /// Touch every page once, in address order, before the access phase.
    #[serde(default = "default_true")]
    pub populate: bool,
    #[serde(default = "default_dist")]
    pub distribution: Distribution,
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Spread popular ranks over the footprint instead of packing them at
    /// the start.
    #[serde(default = "default_true")]
    pub scramble: bool,
    #[serde(default = "default_read_ratio")]
    pub read_ratio: f64,
    #[serde(default)]
    pub op_count: u64,
    #[serde(default)]
    pub compute_gap: u64,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

impl WorkloadSpec {
    pub fn new(footprint_bytes: u64, op_count: u64) -> Self {
        WorkloadSpec {
            footprint_bytes,
            populate: true,
            distribution: Distribution::Zipfian,
            theta: default_theta(),
            scramble: true,
            read_ratio: default_read_ratio(),
            op_count,
            compute_gap: 0,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.footprint_bytes == 0 {
            return Err("footprint_bytes must be positive".into());
        }
        if self.footprint_bytes > 1 << 46 {
            return Err("footprint_bytes exceeds the address-space budget".into());
        }
        if self.distribution == Distribution::Zipfian && !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(format!("theta must be in (0, 1), got {}", self.theta));
        }
        if !(0.0..=1.0).contains(&self.read_ratio) {
            return Err(format!("read_ratio must be in [0, 1], got {}", self.read_ratio));
        }
        if self.threads == 0 {
            return Err("threads must be at least 1".into());
        }
        Ok(())
    }

    pub fn pages(&self, mode: PageSizeMode) -> u64 {
        self.footprint_bytes.div_ceil(mode.page_bytes())
    }
}

/// Zipf sampler over ranks `0..n` by inverse CDF.
#[derive(Clone, Debug)]
pub struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    pub fn new(n: usize, theta: f64) -> Self {
        assert!(n > 0);
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        for k in 1..=n {
            acc += (k as f64).powf(-theta);
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        Zipf { cdf }
    }

    pub fn len(&self) -> usize {
        self.cdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cdf.is_empty()
    }

    pub fn pmf(&self, rank: usize) -> f64 {
        if rank == 0 {
            self.cdf[0]
        } else {
            self.cdf[rank] - self.cdf[rank - 1]
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

/// Page chooser shared by the threads of one process.
#[derive(Debug)]
pub struct PagePicker {
    zipf: Option<Zipf>,
    pages: u64,
    /// rank -> page index
    order: Option<Vec<u32>>,
}

impl PagePicker {
    pub fn new(spec: &WorkloadSpec, pages: u64, seed: u64) -> Self {
        let zipf = (spec.distribution == Distribution::Zipfian).then(|| Zipf::new(pages as usize, spec.theta));
        let order = (zipf.is_some() && spec.scramble).then(|| {
            let mut v: Vec<u32> = (0..pages as u32).collect();
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_5c4a));
            v
        });
        PagePicker { zipf, pages, order }
    }

    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match &self.zipf {
            None => rng.random_range(0..self.pages),
            Some(z) => {
                let r = z.sample(rng);
                match &self.order {
                    Some(o) => o[r] as u64,
                    None => r as u64,
                }
            }
        }
    }
}

/// Op stream of one thread: a populate pass over `populate`, then
/// `accesses` draws from the picker.
pub struct Generator {
    base: u64,
    page_bytes: u64,
    populate: std::ops::Range<u64>,
    accesses: u64,
    picker: Arc<PagePicker>,
    rng: ChaCha8Rng,
    read_ratio: f64,
    compute_gap: u64,
    gap_due: bool,
}

impl Generator {
    fn va(&self, page: u64) -> VirtAddr {
        VirtAddr::new(self.base + page * self.page_bytes).expect("heap fits in 48 bits")
    }
}

impl Iterator for Generator {
    type Item = Op;

    fn next(&mut self) -> Option<Op> {
        if let Some(p) = self.populate.next() {
            return Some(Op::Access {
                va: self.va(p),
                write: true,
                phase: Phase::Populate,
            });
        }
        if self.gap_due {
            self.gap_due = false;
            return Some(Op::Compute(self.compute_gap));
        }
        if self.accesses == 0 {
            return None;
        }
        self.accesses -= 1;
        let page = self.picker.pick(&mut self.rng);
        let write = self.rng.random::<f64>() >= self.read_ratio;
        self.gap_due = self.compute_gap > 0;
        Some(Op::Access {
            va: self.va(page),
            write,
            phase: Phase::Access,
        })
    }
}

/// Per-thread generators for `spec`. Thread `t` populates the `t`-th
/// contiguous slice of the footprint and performs its share of the access
/// phase.
pub fn generate(spec: &WorkloadSpec, mode: PageSizeMode, seed: u64) -> Vec<Generator> {
    let pages = spec.pages(mode);
    let picker = Arc::new(PagePicker::new(spec, pages, seed));
    let t = spec.threads as u64;
    (0..t)
        .map(|i| {
            let populate = if spec.populate {
                (i * pages / t)..((i + 1) * pages / t)
            } else {
                0..0
            };
            let accesses = spec.op_count / t + u64::from(i < spec.op_count % t);
            Generator {
                base: HEAP_BASE,
                page_bytes: mode.page_bytes(),
                populate,
                accesses,
                picker: Arc::clone(&picker),
                rng: ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i + 1)),
                read_ratio: spec.read_ratio,
                compute_gap: spec.compute_gap,
                gap_due: false,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// One benchmark on the whole machine.
    FullSystem,
    /// A filler occupies DRAM, the benchmark starts on the leftover, the
    /// filler leaves partway through.
    MultiTenant,
    /// Interleaved data placement, no hot-page promotion.
    Interleaved,
    /// Populate only.
    Startup,
    /// Full system with 2 MiB pages.
    Thp,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::FullSystem => "full_system",
            ScenarioKind::MultiTenant => "multi_tenant",
            ScenarioKind::Interleaved => "interleaved",
            ScenarioKind::Startup => "startup",
            ScenarioKind::Thp => "thp",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_dwell() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub workload: WorkloadSpec,
    /// MultiTenant only. Unset: fill every DRAM node down to just above
    /// its low watermark.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filler_bytes: Option<u64>,
    /// MultiTenant only: the filler exits once the benchmark has finished
    /// this fraction of its access phase.
    #[serde(default = "default_dwell")]
    pub filler_dwell: f64,
}

impl ScenarioConfig {
    pub fn new(kind: ScenarioKind, workload: WorkloadSpec) -> Self {
        ScenarioConfig {
            kind,
            workload,
            filler_bytes: None,
            filler_dwell: default_dwell(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.workload.validate()?;
        if !(0.0..=1.0).contains(&self.filler_dwell) {
            return Err(format!("filler_dwell must be in [0, 1], got {}", self.filler_dwell));
        }
        Ok(())
    }

    /// Settings a scenario fixes regardless of the rest of the config.
    pub fn apply(&mut self, engine: &mut EngineConfig) {
        match self.kind {
            ScenarioKind::Interleaved => {
                engine.policy.data_policy = crate::topology::DataPolicy::Interleave;
                engine.policy.autonuma = false;
            }
            ScenarioKind::Startup => {
                engine.policy.data_policy = crate::topology::DataPolicy::FirstTouch;
                self.workload.populate = true;
                self.workload.op_count = 0;
            }
            ScenarioKind::Thp => engine.policy.thp = true,
            ScenarioKind::FullSystem | ScenarioKind::MultiTenant => {}
        }
    }
}

/// CPUs of `node` first, then the rest, in engine CPU order.
fn cpus_for(engine: &Engine, node: NodeId, n: usize) -> Vec<usize> {
    let cpus = engine.cpu_nodes();
    let mut order: Vec<usize> = (0..cpus.len()).filter(|&c| cpus[c] == node).collect();
    order.extend((0..cpus.len()).filter(|&c| cpus[c] != node));
    (0..n).map(|i| order[i % order.len()]).collect()
}

fn filler_pages_per_node(topo: &Topology, total_bytes: Option<u64>) -> Vec<(NodeId, u64)> {
    let dram: Vec<_> = topo
        .nodes()
        .iter()
        .filter(|n| n.tier == Tier::Dram && n.local_cpu_count > 0)
        .collect();
    match total_bytes {
        Some(b) => {
            let pages = b.div_ceil(PAGE_SIZE);
            let k = dram.len() as u64;
            dram.iter()
                .enumerate()
                .map(|(i, n)| (n.id, pages / k + u64::from((i as u64) < pages % k)))
                .collect()
        }
        None => dram
            .iter()
            .map(|n| {
                let room = n.free_pages.saturating_sub(n.low_watermark + 1);
                // leave room for the filler's own table pages
                let data = room * 511 / 512;
                (n.id, data.saturating_sub(8))
            })
            .collect(),
    }
}

/// Builds the processes of a scenario into `engine`.
pub fn build_scenario(engine: &mut Engine, scenario: &ScenarioConfig, seed: u64) -> Result<(), EngineError> {
    scenario.validate().map_err(EngineError::Config)?;
    let mode = engine.config().page_size_mode();
    let home = engine.cpu_nodes()[0];
    let bench = |engine: &mut Engine, start: StartCond| {
        let spec = &scenario.workload;
        let gens = generate(spec, mode, seed);
        let cpus = cpus_for(engine, home, spec.threads);
        let threads = gens
            .into_iter()
            .zip(cpus)
            .map(|(g, cpu)| ThreadPlan::new(cpu, g))
            .collect();
        engine.add_process(ProcessPlan {
            name: "bench".into(),
            home,
            threads,
            migrators: Vec::new(),
            start,
            exit: ExitCond::WhenDone,
            primary: true,
            access_ops_total: spec.op_count,
        })
    };
    match scenario.kind {
        ScenarioKind::MultiTenant => {
            let shares = filler_pages_per_node(engine.topology(), scenario.filler_bytes);
            let mut threads = Vec::new();
            let mut offset = 0;
            for (node, pages) in shares {
                let cpu = cpus_for(engine, node, 1)[0];
                let g = Generator {
                    base: HEAP_BASE,
                    page_bytes: PAGE_SIZE,
                    populate: offset..offset + pages,
                    accesses: 0,
                    picker: Arc::new(PagePicker {
                        zipf: None,
                        pages: 1,
                        order: None,
                    }),
                    rng: ChaCha8Rng::seed_from_u64(seed),
                    read_ratio: 1.0,
                    compute_gap: 0,
                    gap_due: false,
                };
                offset += pages;
                threads.push(ThreadPlan::new(cpu, g));
            }
            let filler = engine.add_process(ProcessPlan {
                name: "filler".into(),
                home,
                threads,
                migrators: Vec::new(),
                start: StartCond::Immediately,
                exit: ExitCond::WhenDone,
                primary: false,
                access_ops_total: 0,
            })?;
            let b = bench(engine, StartCond::AfterPopulated(filler))?;
            engine.set_exit(
                filler,
                ExitCond::AfterProgress {
                    of: b,
                    fraction: scenario.filler_dwell,
                },
            );
        }
        _ => {
            bench(engine, StartCond::Immediately)?;
        }
    }
    Ok(())
}

/// Builds the engine, the scenario's processes, and runs to completion.
pub fn run_scenario(config: &EngineConfig, scenario: &ScenarioConfig, seed: u64) -> Result<Report, EngineError> {
    let mut config = config.clone();
    let mut scenario = scenario.clone();
    scenario.apply(&mut config);
    let mut engine = Engine::new(config, seed)?;
    engine.set_label(scenario.kind.name());
    build_scenario(&mut engine, &scenario, seed)?;
    engine.run()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub write: bool,
    pub va: u64,
    pub cpu: usize,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = if self.write { 'W' } else { 'R' };
        write!(f, "{op} {:#x} {}", self.va, self.cpu)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl std::str::FromStr for TraceRecord {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut it = s.split_whitespace();
        let (Some(op), Some(va), Some(cpu), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err("expected `<R|W> <hex va> <cpu>`".into());
        };
        let write = match op {
            "R" => false,
            "W" => true,
            o => return Err(format!("bad op {o:?}")),
        };
        let hex = va.strip_prefix("0x").ok_or_else(|| format!("va {va:?} lacks 0x"))?;
        let va = u64::from_str_radix(hex, 16).map_err(|e| format!("va {va:?}: {e}"))?;
        let cpu = cpu.parse().map_err(|e| format!("cpu {cpu:?}: {e}"))?;
        Ok(TraceRecord { write, va, cpu })
    }
}

pub fn write_trace<W: Write>(mut w: W, records: impl IntoIterator<Item = TraceRecord>) -> io::Result<()> {
    for r in records {
        writeln!(w, "{r}")?;
    }
    w.flush()
}

/// Parses a trace; blank lines are skipped, line numbers start at 1.
pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(line.parse().map_err(|msg| TraceError::Parse { line: i + 1, msg })?);
    }
    Ok(out)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    read_trace(io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_trace_file(path: &Path, records: &[TraceRecord]) -> io::Result<()> {
    write_trace(io::BufWriter::new(std::fs::File::create(path)?), records.iter().copied())
}

/// Replays a trace as one process, one thread per distinct CPU id.
pub fn trace_plan(name: &str, home: NodeId, records: &[TraceRecord]) -> Result<ProcessPlan, String> {
    let mut by_cpu: std::collections::BTreeMap<usize, Vec<Op>> = Default::default();
    for r in records {
        let va = VirtAddr::new(r.va).map_err(|e| e.to_string())?;
        by_cpu.entry(r.cpu).or_default().push(Op::Access {
            va,
            write: r.write,
            phase: Phase::Access,
        });
    }
    let total = records.len() as u64;
    Ok(ProcessPlan {
        name: name.into(),
        home,
        threads: by_cpu
            .into_iter()
            .map(|(cpu, ops)| ThreadPlan::new(cpu, ops.into_iter()))
            .collect(),
        migrators: Vec::new(),
        start: StartCond::Immediately,
        exit: ExitCond::WhenDone,
        primary: true,
        access_ops_total: total,
    })
}
