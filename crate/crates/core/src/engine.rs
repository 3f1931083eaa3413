//! Discrete simulation of CPUs running access streams against one machine.
//!
//! Concurrency is simulated: every agent (workload thread, migration daemon,
//! explicit migrator) advances one step at a time, and a seeded RNG picks
//! the next agent uniformly from the runnable set. A step is one memory
//! access (with its fault, if any), one compute segment, or one migration
//! sub-step. Agents waiting on a page-table lock leave the runnable set
//! until the lock is released.
//!
//! Each agent keeps its own cycle clock. The wall clock is the furthest any
//! workload thread has advanced; the daemon wakes when it crosses an epoch
//! boundary.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::addr::{Level, NodeId, Pfn, Pid, VirtAddr};
use crate::machine::{content_tag, Machine};
use crate::migration::{autonuma_tick, demotion_candidates, residency_violations, DataMigration, Hint, HotnessConfig, Step};
use crate::mmu::{AccessFault, AccessKind, MmuConfig};
use crate::page_table::{PageSizeMode, Placement, PtError};
use crate::report::{CycleAccounting, Event, ProcessReport, ProcessStatus, PtSnapshot, Report, WalkPoint};
use crate::topology::{DataPolicy, PageKind, PtPolicy, Tier, Topology, TopologyConfig};
use crate::workloads::{Op, Phase};

fn default_true() -> bool {
    true
}
fn default_reclaim_batch() -> usize {
    64
}
fn default_window() -> u64 {
    10_000
}
fn default_cpi() -> u64 {
    1
}
fn default_data_policy() -> DataPolicy {
    DataPolicy::FirstTouch
}
fn default_pt_policy() -> PtPolicy {
    PtPolicy::FollowData
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default = "default_data_policy")]
    pub data_policy: DataPolicy,
    #[serde(default = "default_pt_policy")]
    pub pt_policy: PtPolicy,
    /// Hot NVMM pages are promoted to DRAM once per epoch.
    #[serde(default = "default_true")]
    pub autonuma: bool,
    /// Move a leaf table page after the data page it maps.
    #[serde(default)]
    pub pte_migration: bool,
    #[serde(default)]
    pub thp: bool,
    /// Demote cold DRAM pages once per epoch when a DRAM node is below its
    /// low watermark.
    #[serde(default)]
    pub demotion: bool,
    /// Demote data to make room when a DRAM-bound upper table page cannot
    /// be allocated under BindHigh.
    #[serde(default = "default_true")]
    pub reclaim: bool,
    #[serde(default = "default_reclaim_batch")]
    pub reclaim_batch: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            data_policy: default_data_policy(),
            pt_policy: default_pt_policy(),
            autonuma: true,
            pte_migration: false,
            thp: false,
            demotion: false,
            reclaim: true,
            reclaim_batch: default_reclaim_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineParams {
    /// Accesses per walk-latency sample window.
    #[serde(default = "default_window")]
    pub window_accesses: u64,
    #[serde(default = "default_cpi")]
    pub cpi_base: u64,
}

impl Default for EngineParams {
    fn default() -> Self {
        EngineParams {
            window_accesses: default_window(),
            cpi_base: default_cpi(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig {
    pub topology: TopologyConfig,
    pub mmu: MmuConfig,
    pub policy: PolicyConfig,
    pub hotness: HotnessConfig,
    pub params: EngineParams,
}

impl EngineConfig {
    pub fn new(topology: TopologyConfig) -> Self {
        EngineConfig {
            topology,
            mmu: MmuConfig::default(),
            policy: PolicyConfig::default(),
            hotness: HotnessConfig::default(),
            params: EngineParams::default(),
        }
    }

    pub fn page_size_mode(&self) -> PageSizeMode {
        if self.policy.thp {
            PageSizeMode::Thp2M
        } else {
            PageSizeMode::Base4K
        }
    }

    pub fn placement(&self) -> Placement {
        Placement {
            data_policy: self.policy.data_policy,
            pt_policy: self.policy.pt_policy,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.params.window_accesses == 0 {
            return Err("window_accesses must be positive".into());
        }
        if !(self.mmu.stall_fraction >= 0.0 && self.mmu.stall_fraction.is_finite()) {
            return Err("stall_fraction must be a non-negative number".into());
        }
        if self.hotness.epoch_cycles == 0 {
            return Err("epoch_cycles must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{blocked} agents blocked with nothing runnable")]
    Deadlock { blocked: usize },
    #[error("internal: {0}")]
    Internal(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StartCond {
    Immediately,
    /// Once every thread of process `.0` has finished populating.
    AfterPopulated(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExitCond {
    WhenDone,
    /// After its own threads are done and process `of` has completed
    /// `fraction` of its access phase (or is gone).
    AfterProgress { of: usize, fraction: f64 },
}

pub struct ThreadPlan {
    pub cpu: usize,
    pub ops: Box<dyn Iterator<Item = Op> + Send>,
}

impl ThreadPlan {
    pub fn new(cpu: usize, ops: impl Iterator<Item = Op> + Send + 'static) -> Self {
        ThreadPlan { cpu, ops: Box::new(ops) }
    }
}

pub struct ProcessPlan {
    pub name: String,
    pub home: NodeId,
    pub threads: Vec<ThreadPlan>,
    /// Each entry is one agent migrating (va, destination) pairs in order.
    pub migrators: Vec<Vec<(VirtAddr, NodeId)>>,
    pub start: StartCond,
    pub exit: ExitCond,
    pub primary: bool,
    pub access_ops_total: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    NotStarted,
    Running,
    Exiting { oom: bool },
    Gone { oom: bool },
}

struct ProcState {
    name: String,
    home: NodeId,
    pid: Option<Pid>,
    status: Status,
    start: StartCond,
    exit: ExitCond,
    primary: bool,
    agents: Vec<usize>,
    populated_threads: usize,
    threads: usize,
    access_ops_done: u64,
    access_ops_total: u64,
    acct: CycleAccounting,
    snapshots: Vec<PtSnapshot>,
}

enum Kind {
    Worker {
        proc: usize,
        cpu: usize,
        ops: Box<dyn Iterator<Item = Op> + Send>,
        pending: Option<Op>,
        populated: bool,
    },
    Migrator {
        proc: usize,
        queue: VecDeque<(VirtAddr, NodeId)>,
        current: Option<DataMigration>,
    },
    Daemon {
        queue: VecDeque<Hint>,
        current: Option<DataMigration>,
        next_epoch: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Ready,
    /// Waiting for a lock in `pid`'s table.
    Blocked { pid: Pid, pfn: Pfn },
    Done,
}

struct Agent {
    kind: Kind,
    state: State,
    clock: u64,
}

#[derive(Default)]
struct Delta {
    instructions: u64,
    walk: u64,
    data: u64,
    alloc: u64,
    wait: u64,
    tlb_misses: u64,
    tlb_hits: u64,
    faults: u64,
}

#[derive(Default)]
struct Window {
    start: u64,
    accesses: u64,
    misses: u64,
    walk: u64,
}

pub struct Engine {
    cfg: EngineConfig,
    machine: Machine,
    cpu_nodes: Vec<NodeId>,
    cpu_acct: Vec<CycleAccounting>,
    procs: Vec<ProcState>,
    agents: Vec<Agent>,
    rng: ChaCha8Rng,
    seed: u64,
    label: String,
    wall: u64,
    window: Window,
    series: Vec<WalkPoint>,
    events: Vec<Event>,
    walk_cost: BTreeMap<u64, u64>,
    walk_depth: BTreeMap<usize, u64>,
    divergences: u64,
    freed_reads: u64,
    kernel_cycles: u64,
    steps: u64,
    residency_violations: u64,
    audit_failures: Vec<String>,
}

impl Engine {
    pub fn new(cfg: EngineConfig, seed: u64) -> Result<Engine, EngineError> {
        cfg.validate().map_err(EngineError::Config)?;
        let topology = Topology::build(&cfg.topology).map_err(|e| EngineError::Config(e.to_string()))?;
        let cpu_nodes: Vec<NodeId> = topology
            .nodes()
            .iter()
            .flat_map(|n| std::iter::repeat_n(n.id, n.local_cpu_count as usize))
            .collect();
        if cpu_nodes.is_empty() {
            return Err(EngineError::Config("topology has no CPUs".into()));
        }
        let machine = Machine::new(
            topology,
            cpu_nodes.len(),
            &cfg.mmu,
            cfg.hotness.clone(),
            cfg.policy.pte_migration,
        );
        let mut agents = Vec::new();
        if cfg.policy.autonuma || cfg.policy.demotion {
            agents.push(Agent {
                kind: Kind::Daemon {
                    queue: VecDeque::new(),
                    current: None,
                    next_epoch: cfg.hotness.epoch_cycles,
                },
                state: State::Ready,
                clock: 0,
            });
        }
        Ok(Engine {
            cpu_acct: vec![CycleAccounting::default(); cpu_nodes.len()],
            cpu_nodes,
            machine,
            procs: Vec::new(),
            agents,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            label: String::new(),
            wall: 0,
            window: Window::default(),
            series: Vec::new(),
            events: Vec::new(),
            walk_cost: BTreeMap::new(),
            walk_depth: BTreeMap::new(),
            divergences: 0,
            freed_reads: 0,
            kernel_cycles: 0,
            steps: 0,
            residency_violations: 0,
            audit_failures: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &Topology {
        &self.machine.topology
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    /// Local node of each CPU, by CPU index.
    pub fn cpu_nodes(&self) -> &[NodeId] {
        &self.cpu_nodes
    }

    pub fn set_label(&mut self, label: &str) {
        self.label = label.into();
    }

    pub fn set_exit(&mut self, proc: usize, exit: ExitCond) {
        self.procs[proc].exit = exit;
    }

    /// Adds a process; returns its index for start/exit conditions.
    pub fn add_process(&mut self, plan: ProcessPlan) -> Result<usize, EngineError> {
        let idx = self.procs.len();
        if self.machine.topology.node(plan.home).is_err() {
            return Err(EngineError::Config(format!("unknown home node {}", plan.home)));
        }
        let check = |c: StartCond| match c {
            StartCond::AfterPopulated(p) if p >= idx => Err(EngineError::Config(format!("process {p} does not exist yet"))),
            _ => Ok(()),
        };
        check(plan.start)?;
        let mut agents = Vec::new();
        let threads = plan.threads.len();
        for t in plan.threads {
            if t.cpu >= self.cpu_nodes.len() {
                return Err(EngineError::Config(format!("cpu {} does not exist", t.cpu)));
            }
            agents.push(self.agents.len());
            self.agents.push(Agent {
                kind: Kind::Worker {
                    proc: idx,
                    cpu: t.cpu,
                    ops: t.ops,
                    pending: None,
                    populated: false,
                },
                state: State::Ready,
                clock: 0,
            });
        }
        for m in plan.migrators {
            agents.push(self.agents.len());
            self.agents.push(Agent {
                kind: Kind::Migrator {
                    proc: idx,
                    queue: m.into(),
                    current: None,
                },
                state: State::Ready,
                clock: 0,
            });
        }
        self.procs.push(ProcState {
            name: plan.name,
            home: plan.home,
            pid: None,
            status: Status::NotStarted,
            start: plan.start,
            exit: plan.exit,
            primary: plan.primary,
            agents,
            populated_threads: 0,
            threads,
            access_ops_done: 0,
            access_ops_total: plan.access_ops_total,
            acct: CycleAccounting::default(),
            snapshots: Vec::new(),
        });
        Ok(idx)
    }

    fn workers_active(&self) -> bool {
        self.agents
            .iter()
            .any(|a| matches!(a.kind, Kind::Worker { .. }) && a.state != State::Done)
    }

    fn runnable(&self, a: usize) -> bool {
        let agent = &self.agents[a];
        if agent.state != State::Ready {
            return false;
        }
        match &agent.kind {
            Kind::Worker { proc, .. } | Kind::Migrator { proc, .. } => self.procs[*proc].status == Status::Running,
            Kind::Daemon {
                queue,
                current,
                next_epoch,
            } => current.is_some() || !queue.is_empty() || (self.wall >= *next_epoch && self.workers_active()),
        }
    }

    /// Runs every agent to completion.
    pub fn run(mut self) -> Result<Report, EngineError> {
        let mut runnable = Vec::new();
        loop {
            self.update_processes()?;
            runnable.clear();
            runnable.extend((0..self.agents.len()).filter(|&a| self.runnable(a)));
            if runnable.is_empty() {
                let blocked = self
                    .agents
                    .iter()
                    .filter(|a| matches!(a.state, State::Blocked { .. }))
                    .count();
                if blocked > 0 {
                    return Err(EngineError::Deadlock { blocked });
                }
                if self
                    .procs
                    .iter()
                    .any(|p| matches!(p.status, Status::Running | Status::Exiting { .. }))
                    && self.agents.iter().any(|a| a.state != State::Done && !matches!(a.kind, Kind::Daemon { .. }))
                {
                    return Err(EngineError::Internal("processes stalled".into()));
                }
                break;
            }
            let a = runnable[self.rng.random_range(0..runnable.len())];
            self.steps += 1;
            match self.agents[a].kind {
                Kind::Worker { .. } => self.step_worker(a)?,
                Kind::Migrator { .. } | Kind::Daemon { .. } => self.step_migrating(a)?,
            }
            self.wake(a);
        }
        self.finish_leftovers()?;
        Ok(self.report())
    }

    fn update_processes(&mut self) -> Result<(), EngineError> {
        for p in 0..self.procs.len() {
            match self.procs[p].status {
                Status::NotStarted => {
                    let ready = match self.procs[p].start {
                        StartCond::Immediately => true,
                        StartCond::AfterPopulated(q) => {
                            let q = &self.procs[q];
                            q.populated_threads >= q.threads || matches!(q.status, Status::Gone { .. })
                        }
                    };
                    if ready {
                        self.start_process(p)?;
                    }
                }
                Status::Running => {
                    let done = self.procs[p].agents.iter().all(|&a| self.agents[a].state == State::Done);
                    let cond = match self.procs[p].exit {
                        ExitCond::WhenDone => true,
                        ExitCond::AfterProgress { of, fraction } => {
                            let q = &self.procs[of];
                            matches!(q.status, Status::Gone { .. })
                                || (q.status != Status::NotStarted
                                    && q.access_ops_done as f64 >= fraction * q.access_ops_total as f64)
                        }
                    };
                    if done && cond {
                        self.procs[p].status = Status::Exiting { oom: false };
                    }
                }
                Status::Exiting { oom } => {
                    let pid = self.procs[p].pid.expect("running processes have a pid");
                    if self.machine.table(pid).is_some_and(|t| t.held_locks() == 0) {
                        self.snapshot(p, "final");
                        self.residency_violations += residency_violations(&self.machine, pid);
                        if let Err(e) = self.machine.audit() {
                            self.audit_failures.push(e);
                        }
                        self.machine.kill(pid).map_err(|e| EngineError::Internal(e.to_string()))?;
                        self.procs[p].status = Status::Gone { oom };
                        self.events.push(Event::Exit {
                            cycle: self.wall,
                            pid,
                            name: self.procs[p].name.clone(),
                        });
                    }
                }
                Status::Gone { .. } => {}
            }
        }
        Ok(())
    }

    fn start_process(&mut self, p: usize) -> Result<(), EngineError> {
        let mode = self.cfg.page_size_mode();
        let placement = self.cfg.placement();
        let (name, home) = (self.procs[p].name.clone(), self.procs[p].home);
        match self.machine.spawn(name.clone(), mode, placement, home) {
            Ok((pid, latency)) => {
                self.procs[p].pid = Some(pid);
                self.procs[p].status = Status::Running;
                self.procs[p].acct.alloc_latency_sum += latency;
                for i in 0..self.procs[p].agents.len() {
                    let a = self.procs[p].agents[i];
                    self.agents[a].clock = self.wall;
                }
                self.events.push(Event::Start {
                    cycle: self.wall,
                    pid,
                    name,
                });
                if self.procs[p].threads == 0 {
                    self.snapshot(p, "populated");
                }
                Ok(())
            }
            Err(PtError::OutOfMemory { kind }) => {
                self.events.push(Event::OomKill {
                    cycle: self.wall,
                    pid: None,
                    name,
                    failed: kind_name(kind),
                    nvmm_free_pages: self.machine.topology.total_free(Tier::Nvmm),
                });
                self.procs[p].status = Status::Gone { oom: true };
                for i in 0..self.procs[p].agents.len() {
                    let a = self.procs[p].agents[i];
                    self.agents[a].state = State::Done;
                }
                Ok(())
            }
            Err(e) => Err(EngineError::Internal(e.to_string())),
        }
    }

    fn snapshot(&mut self, p: usize, label: &str) {
        let Some(pid) = self.procs[p].pid else { return };
        if let Some(t) = self.machine.table(pid) {
            let free = self.machine.topology.nodes().iter().map(|n| (n.id, n.free_pages)).collect();
            let snap = PtSnapshot::new(label, self.wall, &t.pt_distribution(), free);
            self.procs[p].snapshots.push(snap);
        }
    }

    fn mark_populated(&mut self, a: usize) {
        let Kind::Worker { proc, populated, .. } = &mut self.agents[a].kind else {
            return;
        };
        if *populated {
            return;
        }
        *populated = true;
        let p = *proc;
        self.procs[p].populated_threads += 1;
        if self.procs[p].populated_threads == self.procs[p].threads {
            self.snapshot(p, "populated");
        }
    }

    fn charge(&mut self, a: usize, d: Delta) {
        let stall_walk = (d.walk as f64 * self.cfg.mmu.stall_fraction).ceil() as u64;
        let stall = stall_walk + d.data + d.alloc + d.wait;
        let acct = CycleAccounting {
            instructions: d.instructions,
            total_cycles: d.instructions * self.cfg.params.cpi_base + stall,
            walk_cycles: d.walk,
            stall_cycles: stall,
            data_cycles: d.data,
            wait_cycles: d.wait,
            tlb_misses: d.tlb_misses,
            tlb_hits: d.tlb_hits,
            faults: d.faults,
            alloc_latency_sum: d.alloc,
        };
        let Kind::Worker { proc, cpu, .. } = self.agents[a].kind else {
            return;
        };
        self.agents[a].clock += acct.total_cycles;
        self.wall = self.wall.max(self.agents[a].clock);
        self.cpu_acct[cpu].add(&acct);
        self.procs[proc].acct.add(&acct);
    }

    fn record_window(&mut self, miss: bool, walk: u64) {
        let w = &mut self.window;
        w.accesses += 1;
        if miss {
            w.misses += 1;
            w.walk += walk;
        }
        if w.accesses >= self.cfg.params.window_accesses {
            if w.misses > 0 {
                self.series.push(WalkPoint {
                    window_start_cycle: w.start,
                    mean_walk_cycles: w.walk as f64 / w.misses as f64,
                    tlb_miss_count: w.misses,
                });
            }
            self.window = Window {
                start: self.wall,
                ..Window::default()
            };
        }
    }

    fn step_worker(&mut self, a: usize) -> Result<(), EngineError> {
        let Kind::Worker {
            proc,
            cpu,
            ops,
            pending,
            ..
        } = &mut self.agents[a].kind
        else {
            unreachable!()
        };
        let (p, cpu) = (*proc, *cpu);
        let Some(op) = pending.take().or_else(|| ops.next()) else {
            self.mark_populated(a);
            self.agents[a].state = State::Done;
            return Ok(());
        };
        match op {
            Op::Compute(n) => {
                self.charge(
                    a,
                    Delta {
                        instructions: n,
                        ..Delta::default()
                    },
                );
                Ok(())
            }
            Op::Access { va, write, phase } => {
                if phase == Phase::Access {
                    self.mark_populated(a);
                }
                self.access(a, p, cpu, op, va, write, phase)
            }
        }
    }

    fn set_pending(&mut self, a: usize, op: Op) {
        if let Kind::Worker { pending, .. } = &mut self.agents[a].kind {
            *pending = Some(op);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn access(&mut self, a: usize, p: usize, cpu: usize, op: Op, va: VirtAddr, write: bool, phase: Phase) -> Result<(), EngineError> {
        let pid = self.procs[p].pid.expect("running processes have a pid");
        let kind = if write { AccessKind::Write } else { AccessKind::Read };
        let res = {
            let Machine {
                mmus,
                processes,
                topology,
                ..
            } = &mut self.machine;
            mmus[cpu].access(&processes[&pid].table, topology, va, kind)
        };
        match res {
            Ok(o) => {
                let mode = self.machine.table(pid).unwrap().mode();
                if self.machine.content(o.data_pfn) != Some(content_tag(pid, va, mode)) {
                    self.divergences += 1;
                }
                if self.cfg.policy.autonuma || self.cfg.policy.demotion {
                    self.machine.tracker.record_access(o.data_pfn, self.cpu_nodes[cpu]);
                }
                if !o.tlb_hit {
                    *self.walk_cost.entry(o.walk_cycles).or_default() += 1;
                    *self.walk_depth.entry(o.walk_levels.len()).or_default() += 1;
                }
                if phase == Phase::Access {
                    self.procs[p].access_ops_done += 1;
                }
                self.charge(
                    a,
                    Delta {
                        instructions: 1,
                        walk: o.walk_cycles,
                        data: o.data_cycles,
                        tlb_misses: u64::from(!o.tlb_hit),
                        tlb_hits: u64::from(o.tlb_hit),
                        ..Delta::default()
                    },
                );
                self.record_window(!o.tlb_hit, o.walk_cycles);
                Ok(())
            }
            Err(AccessFault::PageFault { walk_cycles, .. }) => {
                self.charge(
                    a,
                    Delta {
                        walk: walk_cycles,
                        ..Delta::default()
                    },
                );
                self.set_pending(a, op);
                self.fault(a, p, cpu, va)
            }
            Err(AccessFault::FreedFrame { .. }) => {
                self.freed_reads += 1;
                self.machine.mmus[cpu].flush_all();
                self.set_pending(a, op);
                Ok(())
            }
        }
    }

    /// Resolves a fault on `va`; the access itself is retried next step.
    fn fault(&mut self, a: usize, p: usize, cpu: usize, va: VirtAddr) -> Result<(), EngineError> {
        let pid = self.procs[p].pid.unwrap();
        let table = self.machine.table(pid).unwrap();
        let tables = table.tables_for(va);
        let leaf = table.mode().leaf_level().depth();
        // inserting into the leaf needs it unlocked; creating it needs its parent
        let target = if tables[leaf].is_some() { tables[leaf] } else { tables[leaf - 1] };
        if let Some(pfn) = target.filter(|&t| table.lock_holder(t).is_some()) {
            self.agents[a].state = State::Blocked { pid, pfn };
            return Ok(());
        }
        let local = self.cpu_nodes[cpu];
        match self.machine.map(pid, va, local) {
            Ok(out) => {
                self.charge(
                    a,
                    Delta {
                        alloc: out.alloc_latency,
                        faults: 1,
                        ..Delta::default()
                    },
                );
                Ok(())
            }
            Err(PtError::OutOfMemory { kind }) => self.out_of_memory(a, p, cpu, va, kind),
            Err(e) => Err(EngineError::Internal(e.to_string())),
        }
    }

    fn out_of_memory(&mut self, a: usize, p: usize, cpu: usize, va: VirtAddr, kind: PageKind) -> Result<(), EngineError> {
        let reclaimable = self.cfg.policy.pt_policy == PtPolicy::BindHigh
            && self.cfg.policy.reclaim
            && matches!(kind, PageKind::Pt(l) if l.is_high());
        if !reclaimable {
            self.oom_kill(p, kind);
            return Ok(());
        }
        let local = self.cpu_nodes[cpu];
        let cycles = self.reclaim(a as u32, local);
        self.charge(
            a,
            Delta {
                alloc: cycles,
                ..Delta::default()
            },
        );
        let pid = self.procs[p].pid.unwrap();
        match self.machine.map(pid, va, local) {
            Ok(out) => {
                self.charge(
                    a,
                    Delta {
                        alloc: out.alloc_latency,
                        faults: 1,
                        ..Delta::default()
                    },
                );
                Ok(())
            }
            Err(PtError::OutOfMemory { kind }) => {
                self.oom_kill(p, kind);
                Ok(())
            }
            Err(e) => Err(EngineError::Internal(e.to_string())),
        }
    }

    /// Demotes up to `reclaim_batch` cold data pages off the DRAM nodes
    /// nearest `local`. Returns the cycles spent.
    fn reclaim(&mut self, holder: u32, local: NodeId) -> u64 {
        let mut left = self.cfg.policy.reclaim_batch;
        let mut cycles = 0;
        let nodes = self.machine.topology.nearest(local, Tier::Dram);
        for node in nodes {
            if left == 0 {
                break;
            }
            for h in demotion_candidates(&self.machine, node, left) {
                let mut m = DataMigration::new(h.pid, h.va, h.dest, holder);
                loop {
                    match m.step(&mut self.machine) {
                        Step::Pending { cycles: c } => cycles += c,
                        // locked by a concurrent migration: leave this one
                        Step::Blocked { .. } => break,
                        Step::Done { cycles: c, value } => {
                            cycles += c;
                            if value.is_ok() {
                                left -= 1;
                            }
                            break;
                        }
                    }
                }
            }
        }
        cycles
    }

    fn oom_kill(&mut self, p: usize, kind: PageKind) {
        self.events.push(Event::OomKill {
            cycle: self.wall,
            pid: self.procs[p].pid,
            name: self.procs[p].name.clone(),
            failed: kind_name(kind),
            nvmm_free_pages: self.machine.topology.total_free(Tier::Nvmm),
        });
        self.procs[p].status = Status::Exiting { oom: true };
        for i in 0..self.procs[p].agents.len() {
            let a = self.procs[p].agents[i];
            if matches!(self.agents[a].kind, Kind::Worker { .. }) {
                self.mark_populated(a);
                self.agents[a].state = State::Done;
            }
        }
    }

    /// One step of a migrator or the daemon.
    fn step_migrating(&mut self, a: usize) -> Result<(), EngineError> {
        let holder = a as u32;
        let current = match &mut self.agents[a].kind {
            Kind::Migrator { current, .. } | Kind::Daemon { current, .. } => current.take(),
            Kind::Worker { .. } => unreachable!(),
        };
        let mut m = match current {
            Some(m) => m,
            None => match self.next_migration(a, holder) {
                Some(m) => m,
                None => return Ok(()),
            },
        };
        let before = self.agents[a].clock;
        let keep = match m.step(&mut self.machine) {
            Step::Pending { cycles } => {
                self.agents[a].clock += cycles;
                true
            }
            Step::Blocked { pid, pfn } => {
                self.agents[a].state = State::Blocked { pid, pfn };
                true
            }
            Step::Done { cycles, .. } => {
                self.agents[a].clock += cycles;
                false
            }
        };
        if matches!(self.agents[a].kind, Kind::Daemon { .. }) {
            self.kernel_cycles += self.agents[a].clock - before;
        }
        if keep {
            match &mut self.agents[a].kind {
                Kind::Migrator { current, .. } | Kind::Daemon { current, .. } => *current = Some(m),
                Kind::Worker { .. } => unreachable!(),
            }
        }
        Ok(())
    }

    /// Pops the next request, running the epoch tick first when the daemon
    /// has nothing queued.
    fn next_migration(&mut self, a: usize, holder: u32) -> Option<DataMigration> {
        if let Kind::Migrator { proc, queue, .. } = &mut self.agents[a].kind {
            let proc = *proc;
            return match queue.pop_front() {
                Some((va, dest)) => {
                    let pid = self.procs[proc].pid?;
                    Some(DataMigration::new(pid, va, dest, holder))
                }
                None => {
                    self.agents[a].state = State::Done;
                    None
                }
            };
        }
        let Kind::Daemon { queue, .. } = &mut self.agents[a].kind else {
            unreachable!()
        };
        if let Some(h) = queue.pop_front() {
            return Some(DataMigration::new(h.pid, h.va, h.dest, holder));
        }
        self.tick(a);
        let Kind::Daemon { queue, .. } = &mut self.agents[a].kind else {
            unreachable!()
        };
        queue
            .pop_front()
            .map(|h| DataMigration::new(h.pid, h.va, h.dest, holder))
    }

    fn tick(&mut self, a: usize) {
        let mut hints = Vec::new();
        if self.cfg.policy.autonuma {
            hints.extend(autonuma_tick(&self.machine));
        }
        if self.cfg.policy.demotion {
            let budget = self.cfg.hotness.promotion_budget;
            // A node that cannot take one more frame above its low watermark
            // is reclaimed, otherwise huge frames could never be promoted.
            let frame = self.cfg.page_size_mode().frame_pages() as u64;
            let low: Vec<NodeId> = self
                .machine
                .topology
                .nodes()
                .iter()
                .filter(|n| n.tier == Tier::Dram && n.free_pages < n.low_watermark + frame)
                .map(|n| n.id)
                .collect();
            for node in low {
                hints.extend(demotion_candidates(&self.machine, node, budget.min(self.cfg.policy.reclaim_batch)));
            }
        }
        self.machine.tracker.roll_epoch();
        let epoch = self.cfg.hotness.epoch_cycles;
        let wall = self.wall;
        let agent = &mut self.agents[a];
        agent.clock = agent.clock.max(wall);
        if let Kind::Daemon { queue, next_epoch, .. } = &mut agent.kind {
            queue.extend(hints);
            *next_epoch = (wall / epoch + 1) * epoch;
        }
    }

    /// Makes runnable every agent waiting on a lock released by `waker`.
    fn wake(&mut self, waker: usize) {
        let released = self.machine.take_released();
        if released.is_empty() {
            return;
        }
        let waker_clock = self.agents[waker].clock;
        for a in 0..self.agents.len() {
            let State::Blocked { pid, pfn } = self.agents[a].state else {
                continue;
            };
            if !released.contains(&(pid, pfn)) {
                continue;
            }
            self.agents[a].state = State::Ready;
            let wait = waker_clock.saturating_sub(self.agents[a].clock);
            if matches!(self.agents[a].kind, Kind::Worker { .. }) {
                self.charge(
                    a,
                    Delta {
                        wait,
                        ..Delta::default()
                    },
                );
            } else {
                self.agents[a].clock += wait;
            }
        }
    }

    /// Tears down anything still alive once no agent can run.
    fn finish_leftovers(&mut self) -> Result<(), EngineError> {
        for p in 0..self.procs.len() {
            if let Status::Running | Status::Exiting { .. } = self.procs[p].status {
                let oom = matches!(self.procs[p].status, Status::Exiting { oom: true });
                self.procs[p].status = Status::Exiting { oom };
            }
        }
        self.update_processes()?;
        if self.procs.iter().any(|p| matches!(p.status, Status::Exiting { .. })) {
            return Err(EngineError::Internal("process exited with table locks held".into()));
        }
        Ok(())
    }

    fn report(self) -> Report {
        let mut global = CycleAccounting::default();
        for c in &self.cpu_acct {
            global.add(c);
        }
        let processes = self
            .procs
            .iter()
            .map(|p| ProcessReport {
                name: p.name.clone(),
                pid: p.pid,
                status: match p.status {
                    Status::NotStarted => ProcessStatus::NotStarted,
                    Status::Running | Status::Exiting { .. } => ProcessStatus::Running,
                    Status::Gone { oom: false } => ProcessStatus::Exited,
                    Status::Gone { oom: true } => ProcessStatus::OomKilled,
                },
                primary: p.primary,
                mpki: p.acct.mpki(),
                accounting: p.acct.clone(),
                pt_snapshots: p.snapshots.clone(),
            })
            .collect();
        Report {
            scenario: self.label,
            seed: self.seed,
            wall_cycles: self.wall,
            kernel_cycles: self.kernel_cycles,
            steps: self.steps,
            global,
            cpus: self.cpu_acct,
            processes,
            migration: self.machine.stats.clone(),
            walk_latency: self.series,
            walk_cost_histogram: self.walk_cost,
            walk_depth_histogram: self.walk_depth,
            events: self.events,
            divergences: self.divergences,
            freed_reads: self.freed_reads,
            residency_violations: self.residency_violations,
            audit_failures: self.audit_failures,
        }
    }
}

fn kind_name(kind: PageKind) -> String {
    match kind {
        PageKind::Data => "data".into(),
        PageKind::Pt(l) => format!("pt_{}", Level::name(l).to_lowercase()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::NodeConfig;

    fn small_topology(dram: u64, nvmm: u64) -> TopologyConfig {
        TopologyConfig::with_nodes(vec![
            NodeConfig::new(0, Tier::Dram, dram, 1),
            NodeConfig::new(1, Tier::Dram, dram, 1),
            NodeConfig::new(2, Tier::Nvmm, nvmm, 0),
            NodeConfig::new(3, Tier::Nvmm, nvmm, 0),
        ])
    }

    fn cfg() -> EngineConfig {
        let mut c = EngineConfig::new(small_topology(20_000, 80_000));
        c.policy.autonuma = false;
        c.mmu.pwc_enabled = false;
        c.params.window_accesses = 100;
        c
    }

    fn va(x: u64) -> VirtAddr {
        VirtAddr::new(x).unwrap()
    }

    fn reads(vas: &[u64]) -> Vec<Op> {
        vas.iter()
            .map(|&x| Op::Access {
                va: va(x),
                write: false,
                phase: Phase::Access,
            })
            .collect()
    }

    fn plan(ops: Vec<Op>) -> ProcessPlan {
        let n = ops.len() as u64;
        ProcessPlan {
            name: "t".into(),
            home: NodeId(0),
            threads: vec![ThreadPlan::new(0, ops.into_iter())],
            migrators: Vec::new(),
            start: StartCond::Immediately,
            exit: ExitCond::WhenDone,
            primary: true,
            access_ops_total: n,
        }
    }

    #[test]
    fn empty_run_has_zero_counters() {
        let r = Engine::new(cfg(), 1).unwrap().run().unwrap();
        assert_eq!(r.global, CycleAccounting::default());
        assert!(r.walk_latency.is_empty());
        assert_eq!(r.steps, 0);
    }

    #[test]
    fn fault_then_hit() {
        let mut e = Engine::new(cfg(), 1).unwrap();
        e.add_process(plan(reads(&[0x1000, 0x1000]))).unwrap();
        let r = e.run().unwrap();
        let g = &r.global;
        assert_eq!(g.faults, 1);
        assert_eq!(g.tlb_misses, 1);
        assert_eq!(g.tlb_hits, 1);
        assert_eq!(g.instructions, 2);
        // faulting partial walk (L1 only, fresh table) + full walk
        assert_eq!(g.walk_cycles, 100 + 400);
        assert_eq!(r.walk_cost_histogram, BTreeMap::from([(400, 1)]));
        assert_eq!(g.total_cycles, g.instructions + g.stall_cycles);
        assert_eq!(r.divergences, 0);
        assert_eq!(r.processes[0].status, ProcessStatus::Exited);
    }

    #[test]
    fn all_dram_window_mean_is_400() {
        let mut c = cfg();
        c.params.window_accesses = 4;
        let mut e = Engine::new(c, 1).unwrap();
        e.add_process(plan(reads(&[0x1000, 0x2000, 0x3000, 0x4000]))).unwrap();
        let r = e.run().unwrap();
        assert_eq!(r.walk_latency.len(), 1);
        assert_eq!(r.walk_latency[0].mean_walk_cycles, 400.0);
        assert_eq!(r.walk_latency[0].tlb_miss_count, 4);
    }

    #[test]
    fn zero_miss_window_is_omitted() {
        let mut c = cfg();
        c.params.window_accesses = 2;
        let mut e = Engine::new(c, 1).unwrap();
        e.add_process(plan(reads(&[0x1000, 0x1000, 0x1000, 0x1000]))).unwrap();
        let r = e.run().unwrap();
        assert_eq!(r.walk_latency.len(), 1);
    }

    #[test]
    fn accounting_identity_and_closure() {
        let mut c = cfg();
        c.mmu.stall_fraction = 0.3;
        let mut e = Engine::new(c, 5).unwrap();
        let ops: Vec<Op> = (0..500u64)
            .flat_map(|i| [reads(&[(i % 97) * 4096])[0], Op::Compute(3)])
            .collect();
        e.add_process(plan(ops)).unwrap();
        let r = e.run().unwrap();
        let g = &r.global;
        assert_eq!(g.total_cycles, g.instructions + g.stall_cycles);
        assert!(g.stall_cycles as f64 >= g.walk_cycles as f64 * 0.3);
        let mut sum = CycleAccounting::default();
        for p in &r.processes {
            sum.add(&p.accounting);
        }
        assert_eq!(sum.instructions, g.instructions);
        assert_eq!(sum.total_cycles, g.total_cycles);
        assert_eq!(g.instructions, 500 + 500 * 3);
    }

    #[test]
    fn same_seed_same_report() {
        let run = |seed| {
            let mut e = Engine::new(cfg(), seed).unwrap();
            for _ in 0..2 {
                let ops = reads(&(0..300u64).map(|i| (i * 7919 % 1000) * 4096).collect::<Vec<_>>());
                e.add_process(plan(ops)).unwrap();
            }
            e.run().unwrap().summary_json()
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn fault_waits_for_locked_leaf() {
        let mut e = Engine::new(cfg(), 2).unwrap();
        let mut p = plan(reads(&[0x1000, 0x2000, 0x1000]));
        p.migrators = vec![vec![(va(0x1000), NodeId(2))]; 2];
        e.add_process(p).unwrap();
        let r = e.run().unwrap();
        assert_eq!(r.divergences, 0);
        assert_eq!(r.freed_reads, 0);
    }

    #[test]
    fn bind_all_ooms_when_dram_is_full() {
        let mut c = cfg();
        c.topology = small_topology(300, 80_000);
        c.policy.pt_policy = PtPolicy::BindAll;
        let mut e = Engine::new(c, 1).unwrap();
        let ops = reads(&(0..3000u64).map(|i| i * 512 * 4096).collect::<Vec<_>>());
        e.add_process(plan(ops)).unwrap();
        let r = e.run().unwrap();
        assert!(r.primary_oom_killed());
        assert!(matches!(&r.events[1], Event::OomKill { failed, .. } if failed == "pt_l4"));
    }

    #[test]
    fn bind_high_reclaims_instead() {
        let mut c = cfg();
        c.topology = small_topology(300, 80_000);
        c.policy.pt_policy = PtPolicy::BindHigh;
        let mut e = Engine::new(c.clone(), 1).unwrap();
        // two pages in each of 150 separate 1 GiB regions: 600 pages of
        // first-touch DRAM demand, 300 of them table pages
        let vas: Vec<u64> = (0..150u64).flat_map(|i| [i << 30, (i << 30) + 4096]).collect();
        let ops = reads(&vas);
        e.add_process(plan(ops)).unwrap();
        let r = e.run().unwrap();
        assert!(!r.oom_killed(), "{:?}", r.events);
        assert!(r.migration.data_demotions > 0);

        c.policy.reclaim = false;
        let mut e = Engine::new(c, 1).unwrap();
        e.add_process(plan(reads(&vas))).unwrap();
        assert!(e.run().unwrap().primary_oom_killed());
    }

    #[test]
    fn follow_data_spills_without_oom() {
        let mut c = cfg();
        c.topology = small_topology(300, 80_000);
        let mut e = Engine::new(c, 1).unwrap();
        let ops = reads(&(0..3000u64).map(|i| i * 512 * 4096).collect::<Vec<_>>());
        e.add_process(plan(ops)).unwrap();
        let r = e.run().unwrap();
        assert!(!r.oom_killed());
        let f = r.primary().unwrap().snapshot("final").unwrap();
        assert!(f.pages_where(|_, n| n.0 >= 2) > 0);
    }

    #[test]
    fn unknown_cpu_is_config_error() {
        let mut e = Engine::new(cfg(), 1).unwrap();
        let mut p = plan(Vec::new());
        p.threads[0].cpu = 9;
        assert!(matches!(e.add_process(p), Err(EngineError::Config(_))));
    }
}
