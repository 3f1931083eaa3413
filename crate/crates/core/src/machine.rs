//! Mutable state of one simulated machine: memory, processes, per-CPU MMUs,
//! migration bookkeeping.
//!
//! Data frames carry a content tag naming the (process, page) they were
//! created for. Migration copies the tag; an access that lands on a frame
//! with the wrong tag is a translation divergence.

use std::collections::{BTreeMap, HashMap};

use crate::addr::{NodeId, Pfn, Pid, VirtAddr};
use crate::migration::{HotnessConfig, HotnessTracker, MigrationStats};
use crate::mmu::{Mmu, MmuConfig};
use crate::page_table::{MapOutcome, PageSizeMode, PageTable, Placement, PtError};
use crate::topology::Topology;

pub struct Process {
    pub pid: Pid,
    pub name: String,
    pub table: PageTable,
    /// DRAM node whose CPUs run this process.
    pub home: NodeId,
}

pub struct Machine {
    pub topology: Topology,
    pub processes: BTreeMap<Pid, Process>,
    pub mmus: Vec<Mmu>,
    pub stats: MigrationStats,
    pub tracker: HotnessTracker,
    pub pte_migration: bool,
    contents: HashMap<Pfn, u64>,
    released: Vec<(Pid, Pfn)>,
    next_pid: u32,
}

/// Tag a data frame is expected to hold when it backs `va` in `pid`.
pub fn content_tag(pid: Pid, va: VirtAddr, mode: PageSizeMode) -> u64 {
    (pid.0 as u64) << 48 | va.align_down(mode.page_shift()).get()
}

impl Machine {
    pub fn new(
        topology: Topology,
        cpus: usize,
        mmu: &MmuConfig,
        hotness: HotnessConfig,
        pte_migration: bool,
    ) -> Self {
        Machine {
            topology,
            processes: BTreeMap::new(),
            mmus: (0..cpus).map(|_| Mmu::new(mmu)).collect(),
            stats: MigrationStats::default(),
            tracker: HotnessTracker::new(hotness),
            pte_migration,
            contents: HashMap::new(),
            released: Vec::new(),
            next_pid: 1,
        }
    }

    /// Creates a process with an empty table. Returns the root allocation
    /// latency alongside the pid.
    pub fn spawn(
        &mut self,
        name: impl Into<String>,
        mode: PageSizeMode,
        placement: Placement,
        home: NodeId,
    ) -> Result<(Pid, u64), PtError> {
        let pid = Pid(self.next_pid);
        let (table, latency) = PageTable::new(pid, mode, placement, &mut self.topology, home)?;
        self.next_pid += 1;
        self.processes.insert(
            pid,
            Process {
                pid,
                name: name.into(),
                table,
                home,
            },
        );
        Ok((pid, latency))
    }

    pub fn process(&self, pid: Pid) -> Option<&Process> {
        self.processes.get(&pid)
    }

    pub fn table(&self, pid: Pid) -> Option<&PageTable> {
        self.processes.get(&pid).map(|p| &p.table)
    }

    pub fn table_mut(&mut self, pid: Pid) -> Option<&mut PageTable> {
        self.processes.get_mut(&pid).map(|p| &mut p.table)
    }

    pub fn map(&mut self, pid: Pid, va: VirtAddr, local: NodeId) -> Result<MapOutcome, PtError> {
        let proc = self
            .processes
            .get_mut(&pid)
            .ok_or(PtError::NotMapped(va))?;
        let mode = proc.table.mode();
        let out = proc.table.map(&mut self.topology, va, local)?;
        self.contents.insert(out.data_pfn, content_tag(pid, va, mode));
        Ok(out)
    }

    pub fn unmap(&mut self, pid: Pid, va: VirtAddr) -> Result<Pfn, PtError> {
        let proc = self
            .processes
            .get_mut(&pid)
            .ok_or(PtError::NotMapped(va))?;
        let out = proc.table.unmap(&mut self.topology, va)?;
        self.contents.remove(&out.data_pfn);
        self.tracker.forget(out.data_pfn);
        self.flush_all_mmus();
        Ok(out.data_pfn)
    }

    /// Tears the process down and releases all of its frames.
    pub fn kill(&mut self, pid: Pid) -> Result<(), PtError> {
        let Some(mut proc) = self.processes.remove(&pid) else {
            return Ok(());
        };
        let frames: Vec<Pfn> = proc.table.rmap().map(|(p, _)| p).collect();
        for pfn in frames {
            self.contents.remove(&pfn);
            self.tracker.forget(pfn);
        }
        proc.table.teardown(&mut self.topology)?;
        self.flush_all_mmus();
        Ok(())
    }

    pub fn flush_all_mmus(&mut self) {
        for m in &mut self.mmus {
            m.flush_all();
        }
    }

    pub fn content(&self, pfn: Pfn) -> Option<u64> {
        self.contents.get(&pfn).copied()
    }

    /// Copies the content tag of `from` into `to` and drops `from`'s.
    pub(crate) fn move_content(&mut self, from: Pfn, to: Pfn) {
        if let Some(tag) = self.contents.remove(&from) {
            self.contents.insert(to, tag);
        }
    }

    /// Owner and address of a mapped data frame.
    pub fn owner_of(&self, data_pfn: Pfn) -> Option<(Pid, VirtAddr)> {
        self.processes
            .values()
            .find_map(|p| p.table.va_of(data_pfn).map(|va| (p.pid, va)))
    }

    pub fn unlock(&mut self, pid: Pid, pfn: Pfn, holder: u32) {
        if let Some(t) = self.table_mut(pid) {
            if t.unlock(pfn, holder) {
                self.released.push((pid, pfn));
            }
        }
    }

    /// Locks released since the last call.
    pub fn take_released(&mut self) -> Vec<(Pid, Pfn)> {
        std::mem::take(&mut self.released)
    }

    /// Audits every table. Used by tests and debug runs.
    pub fn audit(&self) -> Result<(), String> {
        for p in self.processes.values() {
            p.table.audit(&self.topology).map_err(|e| format!("pid {}: {e}", p.pid))?;
            for (pfn, va) in p.table.rmap() {
                if self.contents.get(&pfn) != Some(&content_tag(p.pid, va, p.table.mode())) {
                    return Err(format!("pid {}: frame {pfn} lost content of {va}", p.pid));
                }
            }
        }
        Ok(())
    }
}
