//! Data-page migration, epoch-based hot-page detection, and leaf page-table
//! (L4) migration triggered by successful data migrations.
//!
//! Both migrations are explicit state machines. Each [`step`] is one
//! scheduler-visible unit of work, so the engine can interleave them with
//! faults and walks from other simulated CPUs; the synchronous entry points
//! ([`migrate_data`], [`migrate_l4`], [`move_pages`]) simply run a machine to
//! completion.
//!
//! L4 migration, given the frame a data page just moved to:
//!
//! 1. find the L4 and L3 pages mapping it; skip if the L4 already sits on
//!    the destination node or in the destination tier;
//! 2. when demoting, skip while the L4 still maps any DRAM-resident page;
//! 3. try-lock L3 then L4, skipping on contention;
//! 4. allocate the new L4 on the destination node;
//! 5. in one indivisible step flush every MMU, copy the entries and repoint
//!    the L3 entry;
//! 6. unlock and free the old frame.
//!
//! [`step`]: DataMigration::step

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::addr::{Level, NodeId, Pfn, Pid, VirtAddr};
use crate::machine::Machine;
use crate::page_table::PageSizeMode;
use crate::topology::{PageKind, Tier};

/// Lock holder id used by the synchronous entry points.
pub const SYNC_HOLDER: u32 = u32::MAX;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationStats {
    pub data_migrations: u64,
    pub data_promotions: u64,
    pub data_demotions: u64,
    pub data_failures: u64,
    pub l4_success: u64,
    pub l4_already_in_destination: u64,
    pub l4_same_tier_skip: u64,
    pub l4_dram_guard_skip: u64,
    /// Includes allocation failures, which are also counted in
    /// `l4_nomem_skip`.
    pub l4_trylock_skip: u64,
    pub l4_nomem_skip: u64,
}

impl MigrationStats {
    pub fn l4_total(&self) -> u64 {
        self.l4_success
            + self.l4_already_in_destination
            + self.l4_same_tier_skip
            + self.l4_dram_guard_skip
            + self.l4_trylock_skip
    }

    fn record(&mut self, outcome: L4Outcome) {
        match outcome {
            L4Outcome::Success => self.l4_success += 1,
            L4Outcome::AlreadyInDestination => self.l4_already_in_destination += 1,
            L4Outcome::SameTierSkip => self.l4_same_tier_skip += 1,
            L4Outcome::DramGuardSkip => self.l4_dram_guard_skip += 1,
            L4Outcome::TrylockSkip => self.l4_trylock_skip += 1,
            L4Outcome::NoMemSkip => {
                self.l4_trylock_skip += 1;
                self.l4_nomem_skip += 1;
            }
        }
    }

    /// Counter name/value pairs in a fixed order.
    pub fn rows(&self) -> [(&'static str, u64); 10] {
        [
            ("data_migrations", self.data_migrations),
            ("data_promotions", self.data_promotions),
            ("data_demotions", self.data_demotions),
            ("data_failures", self.data_failures),
            ("l4_success", self.l4_success),
            ("l4_already_in_destination", self.l4_already_in_destination),
            ("l4_same_tier_skip", self.l4_same_tier_skip),
            ("l4_dram_guard_skip", self.l4_dram_guard_skip),
            ("l4_trylock_skip", self.l4_trylock_skip),
            ("l4_nomem_skip", self.l4_nomem_skip),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum L4Outcome {
    Success,
    AlreadyInDestination,
    SameTierSkip,
    DramGuardSkip,
    TrylockSkip,
    NoMemSkip,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MigrateError {
    #[error("{0} is not mapped")]
    NotMapped(VirtAddr),
    #[error("out of memory on destination node {0}")]
    OutOfMemory(NodeId),
    #[error("table page {0} is locked")]
    SourceLocked(Pfn),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataOutcome {
    Moved { old: Pfn, new: Pfn },
    /// The page already lives on the destination node.
    AlreadyOnNode,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MigrateReport {
    pub data: DataOutcome,
    /// Present exactly when the data page moved and leaf page-table
    /// migration is enabled for a base-page table.
    pub l4: Option<L4Outcome>,
    pub cycles: u64,
}

/// Result of one state-machine step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step<T> {
    Pending { cycles: u64 },
    /// Waiting for `pfn` in `pid`'s table to be unlocked.
    Blocked { pid: Pid, pfn: Pfn },
    Done { cycles: u64, value: T },
}

fn copy_cost(machine: &Machine, from: NodeId, to: NodeId, pages: u32) -> u64 {
    let t = &machine.topology;
    let r = t.node(from).map(|n| n.read_latency).unwrap_or(0);
    let w = t.node(to).map(|n| n.write_latency).unwrap_or(0);
    (r + w) * pages as u64
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum L4State {
    LockedL3 { l3: Pfn, l4: Pfn },
    LockedBoth { l3: Pfn, l4: Pfn },
    Allocated { l3: Pfn, l4: Pfn, new: Pfn },
    Switched { l3: Pfn, l4: Pfn },
    Finished,
}

/// L4 migration in progress.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct L4Migration {
    pid: Pid,
    dest: NodeId,
    holder: u32,
    state: L4State,
}

fn guard_blocks(machine: &Machine, pid: Pid, l4: Pfn, dest: NodeId) -> bool {
    machine.topology.tier(dest) == Tier::Nvmm
        && machine
            .table(pid)
            .and_then(|t| t.page(l4))
            .is_some_and(|p| p.dram_child_count > 0)
}

impl L4Migration {
    /// Evaluates the skip conditions for the frame `data_pfn_new` just
    /// moved to `dest` and try-locks the L3 page. Either finishes with a
    /// skip outcome or returns the started migration.
    pub fn begin(
        machine: &mut Machine,
        pid: Pid,
        data_pfn_new: Pfn,
        dest: NodeId,
        holder: u32,
    ) -> Result<L4Migration, L4Outcome> {
        let outcome = (|| {
            let table = machine.table(pid).ok_or(L4Outcome::TrylockSkip)?;
            let (l4, l3) = table
                .get_pt_entries(data_pfn_new)
                .map_err(|_| L4Outcome::TrylockSkip)?;
            let l4_node = machine
                .topology
                .node_of(l4)
                .map_err(|_| L4Outcome::TrylockSkip)?;
            if l4_node == dest {
                return Err(L4Outcome::AlreadyInDestination);
            }
            if machine.topology.tier(l4_node) == machine.topology.tier(dest) {
                return Err(L4Outcome::SameTierSkip);
            }
            if guard_blocks(machine, pid, l4, dest) {
                return Err(L4Outcome::DramGuardSkip);
            }
            let table = machine.table_mut(pid).unwrap();
            if !table.try_lock(l3, holder).unwrap_or(false) {
                return Err(L4Outcome::TrylockSkip);
            }
            Ok(L4Migration {
                pid,
                dest,
                holder,
                state: L4State::LockedL3 { l3, l4 },
            })
        })();
        if let Err(o) = outcome {
            machine.stats.record(o);
        }
        outcome
    }

    fn finish(&mut self, machine: &mut Machine, outcome: L4Outcome, cycles: u64) -> Step<L4Outcome> {
        self.state = L4State::Finished;
        machine.stats.record(outcome);
        Step::Done {
            cycles,
            value: outcome,
        }
    }

    pub fn step(&mut self, machine: &mut Machine) -> Step<L4Outcome> {
        let (pid, dest, holder) = (self.pid, self.dest, self.holder);
        match self.state.clone() {
            L4State::LockedL3 { l3, l4 } => {
                let table = machine.table_mut(pid).expect("locked tables outlive their locks");
                if !table.try_lock(l4, holder).unwrap_or(false) {
                    machine.unlock(pid, l3, holder);
                    return self.finish(machine, L4Outcome::TrylockSkip, 0);
                }
                // a data page may have been promoted under us before we got L4
                if guard_blocks(machine, pid, l4, dest) {
                    machine.unlock(pid, l4, holder);
                    machine.unlock(pid, l3, holder);
                    return self.finish(machine, L4Outcome::DramGuardSkip, 0);
                }
                self.state = L4State::LockedBoth { l3, l4 };
                Step::Pending { cycles: 0 }
            }
            L4State::LockedBoth { l3, l4 } => {
                match machine.topology.alloc_page(&[dest], PageKind::Pt(Level::L4)) {
                    Ok(out) => {
                        self.state = L4State::Allocated { l3, l4, new: out.pfn };
                        Step::Pending { cycles: out.latency }
                    }
                    Err(_) => {
                        machine.unlock(pid, l4, holder);
                        machine.unlock(pid, l3, holder);
                        self.finish(machine, L4Outcome::NoMemSkip, 0)
                    }
                }
            }
            L4State::Allocated { l3, l4, new } => {
                // flush, copy and L3 update are one indivisible step
                machine.flush_all_mmus();
                let from = l4.home_node();
                machine
                    .table_mut(pid)
                    .unwrap()
                    .switch_l4(l3, l4, new, dest)
                    .expect("locked L3/L4 pair is consistent");
                self.state = L4State::Switched { l3, l4 };
                Step::Pending {
                    cycles: copy_cost(machine, from, dest, 1),
                }
            }
            L4State::Switched { l3, l4 } => {
                machine.unlock(pid, l4, holder);
                machine.unlock(pid, l3, holder);
                machine.topology.free_page(l4).expect("old L4 frame is live");
                self.finish(machine, L4Outcome::Success, 0)
            }
            L4State::Finished => panic!("stepped a finished L4 migration"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum DataState {
    Start,
    Locked { table: Pfn },
    Allocated { table: Pfn, new: Pfn },
    L4 { old: Pfn, new: Pfn, m: L4Migration },
    Finished,
}

/// Data-page migration in progress, followed by its L4 migration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataMigration {
    pub pid: Pid,
    pub va: VirtAddr,
    pub dest: NodeId,
    holder: u32,
    cycles: u64,
    state: DataState,
}

impl DataMigration {
    pub fn new(pid: Pid, va: VirtAddr, dest: NodeId, holder: u32) -> Self {
        DataMigration {
            pid,
            va,
            dest,
            holder,
            cycles: 0,
            state: DataState::Start,
        }
    }

    fn done(&mut self, cycles: u64, value: Result<MigrateReport, MigrateError>) -> Step<Result<MigrateReport, MigrateError>> {
        self.state = DataState::Finished;
        Step::Done { cycles, value }
    }

    pub fn step(&mut self, machine: &mut Machine) -> Step<Result<MigrateReport, MigrateError>> {
        let (pid, va, dest, holder) = (self.pid, self.va, self.dest, self.holder);
        match self.state.clone() {
            DataState::Start => {
                if machine.topology.node(dest).is_err() {
                    return self.done(0, Err(MigrateError::UnknownNode(dest)));
                }
                let Some(table) = machine.table_mut(pid) else {
                    return self.done(0, Err(MigrateError::NotMapped(va)));
                };
                let leaf = table.mode().leaf_level();
                let Some(leaf_table) = table.tables_for(va)[leaf.depth()] else {
                    return self.done(0, Err(MigrateError::NotMapped(va)));
                };
                let Some(data) = table.page(leaf_table).and_then(|p| p.entry(va.index(leaf))) else {
                    return self.done(0, Err(MigrateError::NotMapped(va)));
                };
                if data.home_node() == dest {
                    let report = MigrateReport {
                        data: DataOutcome::AlreadyOnNode,
                        l4: None,
                        cycles: 0,
                    };
                    return self.done(0, Ok(report));
                }
                if !table.try_lock(leaf_table, holder).unwrap_or(false) {
                    return Step::Blocked { pid, pfn: leaf_table };
                }
                self.state = DataState::Locked { table: leaf_table };
                Step::Pending { cycles: 0 }
            }
            DataState::Locked { table } => {
                let pages = machine.table(pid).unwrap().mode().frame_pages();
                match machine.topology.alloc_pages(&[dest], PageKind::Data, pages) {
                    Ok(out) => {
                        self.cycles += out.latency;
                        self.state = DataState::Allocated { table, new: out.pfn };
                        Step::Pending { cycles: out.latency }
                    }
                    Err(_) => {
                        machine.unlock(pid, table, holder);
                        machine.stats.data_failures += 1;
                        self.done(0, Err(MigrateError::OutOfMemory(dest)))
                    }
                }
            }
            DataState::Allocated { table, new } => {
                let pt = machine.table_mut(pid).unwrap();
                let mode = pt.mode();
                let old = {
                    let topo = &machine.topology;
                    machine
                        .processes
                        .get_mut(&pid)
                        .unwrap()
                        .table
                        .replace_data(topo, va, new)
                        .expect("locked leaf keeps its entry")
                };
                machine.move_content(old, new);
                machine.flush_all_mmus();
                let from = old.home_node();
                machine.topology.free_page(old).expect("old data frame is live");
                machine.tracker.rename(old, new);
                machine.unlock(pid, table, holder);
                machine.stats.data_migrations += 1;
                match (machine.topology.tier(from), machine.topology.tier(dest)) {
                    (Tier::Nvmm, Tier::Dram) => machine.stats.data_promotions += 1,
                    (Tier::Dram, Tier::Nvmm) => machine.stats.data_demotions += 1,
                    _ => {}
                }
                let cost = copy_cost(machine, from, dest, mode.frame_pages());
                self.cycles += cost;
                if !(machine.pte_migration && mode == PageSizeMode::Base4K) {
                    let report = MigrateReport {
                        data: DataOutcome::Moved { old, new },
                        l4: None,
                        cycles: self.cycles,
                    };
                    return self.done(cost, Ok(report));
                }
                match L4Migration::begin(machine, pid, new, dest, holder) {
                    Ok(m) => {
                        self.state = DataState::L4 { old, new, m };
                        Step::Pending { cycles: cost }
                    }
                    Err(outcome) => {
                        let report = MigrateReport {
                            data: DataOutcome::Moved { old, new },
                            l4: Some(outcome),
                            cycles: self.cycles,
                        };
                        self.done(cost, Ok(report))
                    }
                }
            }
            DataState::L4 { old, new, mut m } => {
                let s = m.step(machine);
                match s {
                    Step::Pending { cycles } => {
                        self.cycles += cycles;
                        self.state = DataState::L4 { old, new, m };
                        Step::Pending { cycles }
                    }
                    Step::Blocked { pid, pfn } => Step::Blocked { pid, pfn },
                    Step::Done { cycles, value } => {
                        self.cycles += cycles;
                        let report = MigrateReport {
                            data: DataOutcome::Moved { old, new },
                            l4: Some(value),
                            cycles: self.cycles,
                        };
                        self.done(cycles, Ok(report))
                    }
                }
            }
            DataState::Finished => panic!("stepped a finished data migration"),
        }
    }

    /// True while the migration holds a page-table lock.
    pub fn holds_locks(&self) -> bool {
        matches!(
            self.state,
            DataState::Locked { .. } | DataState::Allocated { .. } | DataState::L4 { .. }
        )
    }
}

fn run_to_end<T>(mut f: impl FnMut() -> Step<T>) -> Result<T, Pfn> {
    loop {
        match f() {
            Step::Pending { .. } => continue,
            Step::Blocked { pfn, .. } => return Err(pfn),
            Step::Done { value, .. } => return Ok(value),
        }
    }
}

/// Migrates the data frame `data_pfn` of `pid` to `dest`, then its L4 page
/// when leaf migration is enabled.
pub fn migrate_data(
    machine: &mut Machine,
    pid: Pid,
    data_pfn: Pfn,
    dest: NodeId,
) -> Result<MigrateReport, MigrateError> {
    let va = machine
        .table(pid)
        .and_then(|t| t.va_of(data_pfn))
        .ok_or(MigrateError::NotMapped(VirtAddr::new(0).unwrap()))?;
    let mut m = DataMigration::new(pid, va, dest, SYNC_HOLDER);
    run_to_end(|| m.step(machine)).unwrap_or_else(|pfn| Err(MigrateError::SourceLocked(pfn)))
}

/// Runs the L4 migration for a frame that was just moved to `dest`.
pub fn migrate_l4(machine: &mut Machine, pid: Pid, data_pfn_new: Pfn, dest: NodeId) -> L4Outcome {
    match L4Migration::begin(machine, pid, data_pfn_new, dest, SYNC_HOLDER) {
        Err(outcome) => outcome,
        Ok(mut m) => run_to_end(|| m.step(machine)).unwrap_or(L4Outcome::TrylockSkip),
    }
}

/// Batch migration of addresses; failures are reported per entry.
pub fn move_pages(
    machine: &mut Machine,
    pid: Pid,
    vas: &[VirtAddr],
    dest: NodeId,
) -> Vec<Result<MigrateReport, MigrateError>> {
    vas.iter()
        .map(|&va| {
            let mut m = DataMigration::new(pid, va, dest, SYNC_HOLDER);
            run_to_end(|| m.step(machine)).unwrap_or_else(|pfn| Err(MigrateError::SourceLocked(pfn)))
        })
        .collect()
}

fn default_true() -> bool {
    true
}
fn default_epoch() -> u64 {
    1_000_000
}
fn default_threshold() -> u32 {
    4
}
fn default_budget() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HotnessConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_epoch")]
    pub epoch_cycles: u64,
    #[serde(default = "default_threshold")]
    pub hot_threshold: u32,
    #[serde(default = "default_budget")]
    pub promotion_budget: usize,
}

impl Default for HotnessConfig {
    fn default() -> Self {
        HotnessConfig {
            enabled: true,
            epoch_cycles: default_epoch(),
            hot_threshold: default_threshold(),
            promotion_budget: default_budget(),
        }
    }
}

#[derive(Clone, Debug, Default)]
struct FrameHeat {
    total: u32,
    /// Accesses per accessor node, few entries.
    by_node: Vec<(NodeId, u32)>,
}

/// Exact per-frame access counters for the current epoch.
#[derive(Clone, Debug)]
pub struct HotnessTracker {
    config: HotnessConfig,
    heat: HashMap<Pfn, FrameHeat>,
    epoch: u64,
}

/// A migration request: move `pid`'s page at `va` (currently `pfn`) to `dest`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hint {
    pub pfn: Pfn,
    pub pid: Pid,
    pub va: VirtAddr,
    pub dest: NodeId,
    pub count: u32,
}

impl HotnessTracker {
    pub fn new(config: HotnessConfig) -> Self {
        HotnessTracker {
            config,
            heat: HashMap::new(),
            epoch: 0,
        }
    }

    pub fn config(&self) -> &HotnessConfig {
        &self.config
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn record_access(&mut self, pfn: Pfn, accessor: NodeId) {
        let h = self.heat.entry(pfn).or_default();
        h.total += 1;
        match h.by_node.iter_mut().find(|(n, _)| *n == accessor) {
            Some((_, c)) => *c += 1,
            None => h.by_node.push((accessor, 1)),
        }
    }

    pub fn count(&self, pfn: Pfn) -> u32 {
        self.heat.get(&pfn).map_or(0, |h| h.total)
    }

    /// Starts a new epoch; all counters drop to zero.
    pub fn roll_epoch(&mut self) {
        self.heat.clear();
        self.epoch += 1;
    }

    pub(crate) fn rename(&mut self, old: Pfn, new: Pfn) {
        if let Some(h) = self.heat.remove(&old) {
            self.heat.insert(new, h);
        }
    }

    pub(crate) fn forget(&mut self, pfn: Pfn) {
        self.heat.remove(&pfn);
    }

    fn top_accessor(&self, pfn: Pfn) -> Option<NodeId> {
        let h = self.heat.get(&pfn)?;
        h.by_node
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(n, _)| *n)
    }
}

/// Promotion hints for the epoch that just ended: hot NVMM frames, hottest
/// first (ties by lower frame number), each sent to the DRAM node of its
/// most frequent accessor, or the nearest DRAM node with room. A node
/// accepts promotions only down to its low watermark.
pub fn autonuma_tick(machine: &Machine) -> Vec<Hint> {
    let tracker = &machine.tracker;
    let topo = &machine.topology;
    let cfg = tracker.config();
    let mut headroom: Vec<(NodeId, u64)> = topo
        .nodes()
        .iter()
        .filter(|n| n.tier == Tier::Dram)
        .map(|n| (n.id, n.free_pages.saturating_sub(n.low_watermark)))
        .collect();
    if headroom.iter().all(|(_, h)| *h == 0) {
        return Vec::new();
    }
    let mut hot: Vec<(u32, Pfn)> = tracker
        .heat
        .iter()
        .filter(|(pfn, h)| {
            h.total >= cfg.hot_threshold
                && topo.is_allocated(**pfn)
                && topo.tier(pfn.home_node()) == Tier::Nvmm
        })
        .map(|(pfn, h)| (h.total, *pfn))
        .collect();
    hot.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut hints = Vec::new();
    for (count, pfn) in hot {
        if hints.len() >= cfg.promotion_budget {
            break;
        }
        let Some((pid, va)) = machine.owner_of(pfn) else {
            continue;
        };
        let pages = topo.frame_pages(pfn).unwrap_or(1) as u64;
        let preferred = tracker.top_accessor(pfn).filter(|n| topo.tier(*n) == Tier::Dram);
        let order: Vec<NodeId> = match preferred {
            Some(p) => std::iter::once(p)
                .chain(topo.nearest(p, Tier::Dram).into_iter().filter(|n| *n != p))
                .collect(),
            None => headroom.iter().map(|(n, _)| *n).collect(),
        };
        let Some(dest) = order
            .into_iter()
            .find(|n| headroom.iter().any(|(id, h)| id == n && *h >= pages))
        else {
            continue;
        };
        for (id, h) in headroom.iter_mut() {
            if *id == dest {
                *h -= pages;
            }
        }
        hints.push(Hint {
            pfn,
            pid,
            va,
            dest,
            count,
        });
    }
    hints
}

/// Up to `max` coldest data frames on the DRAM node `node` (fewest accesses
/// this epoch, ties by lower frame number), each paired with the nearest
/// NVMM node that can take it.
pub fn demotion_candidates(machine: &Machine, node: NodeId, max: usize) -> Vec<Hint> {
    let topo = &machine.topology;
    let mut frames: Vec<(u32, Pfn, Pid, VirtAddr)> = machine
        .processes
        .values()
        .flat_map(|p| {
            p.table
                .rmap()
                .filter(|(pfn, _)| pfn.home_node() == node)
                .map(move |(pfn, va)| (pfn, va, p.pid))
        })
        .map(|(pfn, va, pid)| (machine.tracker.count(pfn), pfn, pid, va))
        .collect();
    frames.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let targets = topo.nearest(node, Tier::Nvmm);
    let mut room: Vec<(NodeId, u64)> = targets
        .iter()
        .map(|&n| {
            let nn = topo.node(n).unwrap();
            (n, nn.free_pages.saturating_sub(nn.min_watermark + 1))
        })
        .collect();
    let mut out = Vec::new();
    for (count, pfn, pid, va) in frames {
        if out.len() >= max {
            break;
        }
        let pages = topo.frame_pages(pfn).unwrap_or(1) as u64;
        let Some(slot) = room.iter_mut().find(|(_, r)| *r >= pages) else {
            break;
        };
        slot.1 -= pages;
        out.push(Hint {
            pfn,
            pid,
            va,
            dest: slot.0,
            count,
        });
    }
    out
}

/// Leaf table pages of `pid` that map a DRAM-resident page but sit on
/// NVMM.
pub fn residency_violations(machine: &Machine, pid: Pid) -> u64 {
    let Some(t) = machine.table(pid) else { return 0 };
    t.pages()
        .filter(|p| p.level == Level::L4 && p.dram_child_count > 0)
        .filter(|p| machine.topology.tier(p.node) != Tier::Dram)
        .count() as u64
}
