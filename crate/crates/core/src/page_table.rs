//! Per-process four-level radix page table.
//!
//! Every table page occupies one frame obtained from the [`Topology`]; its
//! contents live here keyed by that frame number. A walk reads pages by frame
//! number only, so a stale pointer to a freed page is detected instead of
//! silently resolving.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::addr::{
    Level, NodeId, NonCanonical, Pfn, Pid, VirtAddr, HUGE_PAGE_SHIFT, HUGE_PAGE_SIZE, PAGE_SHIFT,
    PAGE_SIZE, PT_ENTRIES,
};
use crate::topology::{
    AllocPath, DataPolicy, InterleaveCursor, PageKind, PtPolicy, Tier, Topology, TopologyError,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PageSizeMode {
    Base4K,
    Thp2M,
}

impl PageSizeMode {
    pub fn leaf_level(self) -> Level {
        match self {
            PageSizeMode::Base4K => Level::L4,
            PageSizeMode::Thp2M => Level::L3,
        }
    }

    pub fn page_shift(self) -> u32 {
        match self {
            PageSizeMode::Base4K => PAGE_SHIFT,
            PageSizeMode::Thp2M => HUGE_PAGE_SHIFT,
        }
    }

    pub fn page_bytes(self) -> u64 {
        1 << self.page_shift()
    }

    /// Base pages per data frame.
    pub fn frame_pages(self) -> u32 {
        (self.page_bytes() / PAGE_SIZE) as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PtError {
    #[error(transparent)]
    NonCanonical(#[from] NonCanonical),
    #[error("{0} is not mapped")]
    NotMapped(VirtAddr),
    #[error("{0} is already mapped")]
    AlreadyMapped(VirtAddr),
    #[error("frame {0} is not mapped by this table")]
    UnknownFrame(Pfn),
    #[error("out of memory allocating {kind:?}")]
    OutOfMemory { kind: PageKind },
    #[error("frame {0} is not a lockable L3/L4 page")]
    NotLockable(Pfn),
    #[error("huge mappings have no L4 page")]
    HugeMapping,
    #[error(transparent)]
    Topology(TopologyError),
}

impl From<TopologyError> for PtError {
    fn from(e: TopologyError) -> Self {
        match e {
            TopologyError::OutOfMemory { kind, .. } => PtError::OutOfMemory { kind },
            other => PtError::Topology(other),
        }
    }
}

/// One page-table page.
#[derive(Clone, Debug)]
pub struct PtPage {
    pub pfn: Pfn,
    pub level: Level,
    pub node: NodeId,
    entries: Box<[Option<Pfn>; PT_ENTRIES]>,
    pub present_count: u16,
    /// Leaf pages only: mapped data frames currently resident on DRAM.
    pub dram_child_count: u16,
}

impl PtPage {
    fn new(pfn: Pfn, level: Level, node: NodeId) -> Self {
        PtPage {
            pfn,
            level,
            node,
            entries: Box::new([None; PT_ENTRIES]),
            present_count: 0,
            dram_child_count: 0,
        }
    }

    pub fn entry(&self, index: usize) -> Option<Pfn> {
        self.entries[index]
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, Pfn)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.map(|p| (i, p)))
    }

    fn set(&mut self, index: usize, value: Option<Pfn>) {
        match (self.entries[index], value) {
            (None, Some(_)) => self.present_count += 1,
            (Some(_), None) => self.present_count -= 1,
            _ => {}
        }
        self.entries[index] = value;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Touch {
    pub level: Level,
    pub node: NodeId,
    pub pfn: Pfn,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WalkResult {
    pub data_pfn: Pfn,
    pub offset: u64,
    /// Table pages read, root first.
    pub touched: Vec<Touch>,
}

/// Why a walk could not produce a translation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WalkFault {
    /// Empty entry at `level`; the pages read up to that point are listed.
    NotPresent { level: Level, touched: Vec<Touch> },
    /// The walk was pointed at a frame that is not a live page of this
    /// table at the expected level.
    Stale { level: Level, pfn: Pfn },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MapOutcome {
    pub data_pfn: Pfn,
    pub data_node: NodeId,
    pub new_pt_pages: Vec<(Level, NodeId)>,
    pub alloc_latency: u64,
    pub slow_allocs: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnmapOutcome {
    pub data_pfn: Pfn,
    /// Table pages released by eager reclaim, if enabled.
    pub freed_pt: Vec<Pfn>,
}

/// Location of the entry that maps one data frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LeafSlot {
    pub va: VirtAddr,
    pub table: Pfn,
    pub level: Level,
    pub index: usize,
    /// Parent of `table` (L3 for an L4 leaf, L2 for a huge mapping).
    pub parent: Pfn,
}

/// Page-table page counts per (level, node).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PtDistribution {
    pub pages: BTreeMap<(Level, NodeId), u64>,
}

impl PtDistribution {
    pub fn total(&self) -> u64 {
        self.pages.values().sum()
    }

    pub fn bytes(&self, level: Level, node: NodeId) -> u64 {
        self.pages.get(&(level, node)).copied().unwrap_or(0) * PAGE_SIZE
    }

    pub fn count_where(&self, mut f: impl FnMut(Level, NodeId) -> bool) -> u64 {
        self.pages
            .iter()
            .filter(|((l, n), _)| f(*l, *n))
            .map(|(_, c)| c)
            .sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = (Level, NodeId, u64, u64)> + '_ {
        self.pages
            .iter()
            .map(|(&(l, n), &c)| (l, n, c, c * PAGE_SIZE))
    }
}

/// Analytic page-table size for a contiguous, fully populated footprint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PtSizeEstimate {
    /// Pages per level, L1 first.
    pub pages: [u64; 4],
}

impl PtSizeEstimate {
    pub fn bytes(&self, level: Level) -> u64 {
        self.pages[level.depth()] * PAGE_SIZE
    }

    pub fn upper_bytes(&self) -> u64 {
        self.bytes(Level::L1) + self.bytes(Level::L2) + self.bytes(Level::L3)
    }

    pub fn total_pages(&self) -> u64 {
        self.pages.iter().sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_pages() * PAGE_SIZE
    }
}

pub fn pt_size_estimate(footprint_bytes: u64, mode: PageSizeMode) -> PtSizeEstimate {
    let fan = PT_ENTRIES as u64;
    let (l4, l3) = match mode {
        PageSizeMode::Base4K => {
            let l4 = footprint_bytes.div_ceil(PAGE_SIZE).div_ceil(fan);
            (l4, l4.div_ceil(fan))
        }
        PageSizeMode::Thp2M => (0, footprint_bytes.div_ceil(HUGE_PAGE_SIZE).div_ceil(fan)),
    };
    let l2 = l3.div_ceil(fan);
    PtSizeEstimate {
        pages: [1, l2, l3, l4],
    }
}

/// Placement inputs for one process.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub data_policy: DataPolicy,
    pub pt_policy: PtPolicy,
}

pub struct PageTable {
    pid: Pid,
    mode: PageSizeMode,
    placement: Placement,
    cursor: InterleaveCursor,
    root: Pfn,
    pages: HashMap<Pfn, PtPage>,
    rmap: HashMap<Pfn, VirtAddr>,
    locks: HashMap<Pfn, u32>,
    eager_reclaim: bool,
}

impl PageTable {
    /// Creates a table with its root page placed by the PT policy.
    pub fn new(
        pid: Pid,
        mode: PageSizeMode,
        placement: Placement,
        topology: &mut Topology,
        local: NodeId,
    ) -> Result<(PageTable, u64), PtError> {
        let mut cursor = InterleaveCursor::default();
        let kind = PageKind::Pt(Level::L1);
        let cand = topology.select_node(kind, placement.data_policy, placement.pt_policy, local, &mut cursor)?;
        let out = topology.alloc_page(&cand, kind)?;
        let mut pages = HashMap::new();
        pages.insert(out.pfn, PtPage::new(out.pfn, Level::L1, out.node));
        Ok((
            PageTable {
                pid,
                mode,
                placement,
                cursor,
                root: out.pfn,
                pages,
                rmap: HashMap::new(),
                locks: HashMap::new(),
                eager_reclaim: false,
            },
            out.latency,
        ))
    }

    pub fn set_eager_reclaim(&mut self, on: bool) {
        self.eager_reclaim = on;
    }

    pub fn pid(&self) -> Pid {
        self.pid
    }

    pub fn mode(&self) -> PageSizeMode {
        self.mode
    }

    pub fn placement(&self) -> Placement {
        self.placement
    }

    pub fn root(&self) -> Pfn {
        self.root
    }

    pub fn page(&self, pfn: Pfn) -> Option<&PtPage> {
        self.pages.get(&pfn)
    }

    pub fn pages(&self) -> impl Iterator<Item = &PtPage> {
        self.pages.values()
    }

    pub fn mapped_frames(&self) -> usize {
        self.rmap.len()
    }

    /// Reverse-map lookup: the address mapping a data frame.
    pub fn va_of(&self, data_pfn: Pfn) -> Option<VirtAddr> {
        self.rmap.get(&data_pfn).copied()
    }

    pub fn rmap(&self) -> impl Iterator<Item = (Pfn, VirtAddr)> + '_ {
        self.rmap.iter().map(|(p, v)| (*p, *v))
    }

    fn page_base(&self, va: VirtAddr) -> VirtAddr {
        va.align_down(self.mode.page_shift())
    }

    fn alloc_pt(
        &mut self,
        topology: &mut Topology,
        level: Level,
        local: NodeId,
    ) -> Result<(Pfn, NodeId, AllocPath, u64), PtError> {
        let kind = PageKind::Pt(level);
        let cand = topology.select_node(
            kind,
            self.placement.data_policy,
            self.placement.pt_policy,
            local,
            &mut self.cursor,
        )?;
        let out = topology.alloc_page(&cand, kind)?;
        self.pages.insert(out.pfn, PtPage::new(out.pfn, level, out.node));
        Ok((out.pfn, out.node, out.path, out.latency))
    }

    /// Table pages on the path to `va`, root first; `None` past the first
    /// missing entry. Index 3 is always `None` for huge mappings.
    pub fn tables_for(&self, va: VirtAddr) -> [Option<Pfn>; 4] {
        let mut out = [None; 4];
        let mut cur = Some(self.root);
        for level in Level::ALL {
            let Some(pfn) = cur else { break };
            out[level.depth()] = Some(pfn);
            if level == self.mode.leaf_level() {
                break;
            }
            cur = self.pages.get(&pfn).and_then(|p| p.entry(va.index(level)));
        }
        out
    }

    /// Installs a translation for `va`, allocating any missing table pages
    /// and the data frame. Pages allocated before a failure stay linked.
    pub fn map(
        &mut self,
        topology: &mut Topology,
        va: VirtAddr,
        local: NodeId,
    ) -> Result<MapOutcome, PtError> {
        let va = self.page_base(va);
        let leaf = self.mode.leaf_level();
        let mut new_pt_pages = Vec::new();
        let mut alloc_latency = 0;
        let mut slow_allocs = 0;
        let mut cur = self.root;
        let mut level = Level::L1;
        while level != leaf {
            let idx = va.index(level);
            let child_level = level.child().expect("leaf level reached first");
            let next = match self.pages[&cur].entry(idx) {
                Some(p) => p,
                None => {
                    let (pfn, node, path, lat) = self.alloc_pt(topology, child_level, local)?;
                    alloc_latency += lat;
                    slow_allocs += u32::from(path == AllocPath::Slow);
                    new_pt_pages.push((child_level, node));
                    self.pages.get_mut(&cur).unwrap().set(idx, Some(pfn));
                    pfn
                }
            };
            cur = next;
            level = child_level;
        }
        let idx = va.index(leaf);
        if self.pages[&cur].entry(idx).is_some() {
            return Err(PtError::AlreadyMapped(va));
        }
        let cand = topology.select_node(
            PageKind::Data,
            self.placement.data_policy,
            self.placement.pt_policy,
            local,
            &mut self.cursor,
        )?;
        let out = topology.alloc_pages(&cand, PageKind::Data, self.mode.frame_pages())?;
        alloc_latency += out.latency;
        slow_allocs += u32::from(out.path == AllocPath::Slow);
        let on_dram = topology.tier(out.node) == Tier::Dram;
        let page = self.pages.get_mut(&cur).unwrap();
        page.set(idx, Some(out.pfn));
        if on_dram && leaf == Level::L4 {
            page.dram_child_count += 1;
        }
        self.rmap.insert(out.pfn, va);
        Ok(MapOutcome {
            data_pfn: out.pfn,
            data_node: out.node,
            new_pt_pages,
            alloc_latency,
            slow_allocs,
        })
    }

    /// Removes the translation for `va` and frees its data frame. Empty table
    /// pages stay allocated unless eager reclaim is on.
    pub fn unmap(&mut self, topology: &mut Topology, va: VirtAddr) -> Result<UnmapOutcome, PtError> {
        let va = self.page_base(va);
        let tables = self.tables_for(va);
        let leaf = self.mode.leaf_level();
        let table = tables[leaf.depth()].ok_or(PtError::NotMapped(va))?;
        let idx = va.index(leaf);
        let page = self.pages.get_mut(&table).expect("path pages are live");
        let data_pfn = page.entry(idx).ok_or(PtError::NotMapped(va))?;
        page.set(idx, None);
        if leaf == Level::L4 && topology.tier(data_pfn.home_node()) == Tier::Dram {
            page.dram_child_count -= 1;
        }
        self.rmap.remove(&data_pfn);
        topology.free_page(data_pfn)?;
        let mut freed_pt = Vec::new();
        if self.eager_reclaim {
            let mut level = leaf;
            while level != Level::L1 {
                let pfn = tables[level.depth()].unwrap();
                if self.pages[&pfn].present_count > 0 || self.locks.contains_key(&pfn) {
                    break;
                }
                let parent_level = level.parent().unwrap();
                let parent = tables[parent_level.depth()].unwrap();
                self.pages.get_mut(&parent).unwrap().set(va.index(parent_level), None);
                self.pages.remove(&pfn);
                topology.free_page(pfn)?;
                freed_pt.push(pfn);
                level = parent_level;
            }
        }
        Ok(UnmapOutcome { data_pfn, freed_pt })
    }

    /// Frees every data frame and table page. The table is unusable after.
    pub fn teardown(&mut self, topology: &mut Topology) -> Result<(usize, usize), PtError> {
        let mut data: Vec<Pfn> = self.rmap.keys().copied().collect();
        data.sort();
        for &pfn in &data {
            topology.free_page(pfn)?;
        }
        let mut pt: Vec<Pfn> = self.pages.keys().copied().collect();
        pt.sort();
        for &pfn in &pt {
            topology.free_page(pfn)?;
        }
        self.rmap.clear();
        self.pages.clear();
        self.locks.clear();
        Ok((data.len(), pt.len()))
    }

    /// Software walk starting at `start` (a page of level `level`).
    pub fn walk_from(&self, level: Level, start: Pfn, va: VirtAddr) -> Result<WalkResult, WalkFault> {
        let leaf = self.mode.leaf_level();
        let mut touched = Vec::with_capacity(4);
        let mut cur = start;
        let mut level = level;
        loop {
            let page = match self.pages.get(&cur) {
                Some(p) if p.level == level => p,
                _ => return Err(WalkFault::Stale { level, pfn: cur }),
            };
            touched.push(Touch {
                level,
                node: page.node,
                pfn: cur,
            });
            let Some(next) = page.entry(va.index(level)) else {
                return Err(WalkFault::NotPresent { level, touched });
            };
            if level == leaf {
                let offset = va.get() & (self.mode.page_bytes() - 1);
                return Ok(WalkResult {
                    data_pfn: next,
                    offset,
                    touched,
                });
            }
            cur = next;
            level = level.child().unwrap();
        }
    }

    pub fn walk_sw(&self, va: VirtAddr) -> Result<WalkResult, PtError> {
        self.walk_from(Level::L1, self.root, va)
            .map_err(|_| PtError::NotMapped(self.page_base(va)))
    }

    /// Slot of the entry that maps `data_pfn`.
    pub fn leaf_slot(&self, data_pfn: Pfn) -> Result<LeafSlot, PtError> {
        let va = *self.rmap.get(&data_pfn).ok_or(PtError::UnknownFrame(data_pfn))?;
        let tables = self.tables_for(va);
        let leaf = self.mode.leaf_level();
        let table = tables[leaf.depth()].ok_or(PtError::UnknownFrame(data_pfn))?;
        let parent = tables[leaf.parent().unwrap().depth()].unwrap();
        Ok(LeafSlot {
            va,
            table,
            level: leaf,
            index: va.index(leaf),
            parent,
        })
    }

    /// The L4 page holding `data_pfn`'s entry and its parent L3.
    pub fn get_pt_entries(&self, data_pfn: Pfn) -> Result<(Pfn, Pfn), PtError> {
        if self.mode == PageSizeMode::Thp2M {
            return Err(PtError::HugeMapping);
        }
        let slot = self.leaf_slot(data_pfn)?;
        Ok((slot.table, slot.parent))
    }

    /// Points the entry for `va` at `new_pfn`, keeping the reverse map and
    /// the DRAM child count in step. Returns the previous frame.
    pub fn replace_data(&mut self, topology: &Topology, va: VirtAddr, new_pfn: Pfn) -> Result<Pfn, PtError> {
        let va = self.page_base(va);
        let leaf = self.mode.leaf_level();
        let table = self.tables_for(va)[leaf.depth()].ok_or(PtError::NotMapped(va))?;
        let idx = va.index(leaf);
        let page = self.pages.get_mut(&table).unwrap();
        let old = page.entry(idx).ok_or(PtError::NotMapped(va))?;
        page.set(idx, Some(new_pfn));
        if leaf == Level::L4 {
            let was = topology.tier(old.home_node()) == Tier::Dram;
            let now = topology.tier(new_pfn.home_node()) == Tier::Dram;
            match (was, now) {
                (true, false) => page.dram_child_count -= 1,
                (false, true) => page.dram_child_count += 1,
                _ => {}
            }
        }
        self.rmap.remove(&old);
        self.rmap.insert(new_pfn, va);
        Ok(old)
    }

    /// Copies the L4 page `old` into the freshly allocated frame `new_pfn`
    /// on `new_node` and repoints its L3 entry. The old page's contents are
    /// dropped here; its frame still belongs to the caller to free.
    pub fn switch_l4(
        &mut self,
        l3: Pfn,
        old: Pfn,
        new_pfn: Pfn,
        new_node: NodeId,
    ) -> Result<(), PtError> {
        let l3_page = self.pages.get(&l3).ok_or(PtError::UnknownFrame(l3))?;
        let idx = l3_page
            .entries()
            .find(|(_, p)| *p == old)
            .map(|(i, _)| i)
            .ok_or(PtError::UnknownFrame(old))?;
        let mut copy = self.pages.remove(&old).ok_or(PtError::UnknownFrame(old))?;
        copy.pfn = new_pfn;
        copy.node = new_node;
        self.pages.insert(new_pfn, copy);
        self.pages.get_mut(&l3).unwrap().set(idx, Some(new_pfn));
        Ok(())
    }

    fn lockable(&self, pfn: Pfn) -> Result<(), PtError> {
        match self.pages.get(&pfn) {
            Some(p) if matches!(p.level, Level::L3 | Level::L4) => Ok(()),
            _ => Err(PtError::NotLockable(pfn)),
        }
    }

    /// Non-blocking exclusive acquire. Re-acquiring a held lock fails even
    /// for the same holder.
    pub fn try_lock(&mut self, pfn: Pfn, holder: u32) -> Result<bool, PtError> {
        self.lockable(pfn)?;
        if self.locks.contains_key(&pfn) {
            return Ok(false);
        }
        self.locks.insert(pfn, holder);
        Ok(true)
    }

    /// Releases `pfn` if `holder` owns it. The page may already be gone.
    pub fn unlock(&mut self, pfn: Pfn, holder: u32) -> bool {
        if self.locks.get(&pfn) == Some(&holder) {
            self.locks.remove(&pfn);
            true
        } else {
            false
        }
    }

    pub fn lock_holder(&self, pfn: Pfn) -> Option<u32> {
        self.locks.get(&pfn).copied()
    }

    pub fn held_locks(&self) -> usize {
        self.locks.len()
    }

    pub fn pt_distribution(&self) -> PtDistribution {
        let mut d = PtDistribution::default();
        for p in self.pages.values() {
            *d.pages.entry((p.level, p.node)).or_default() += 1;
        }
        d
    }

    /// Structural audit: levels by depth, no shared frames, present and
    /// DRAM-child counters, reverse-map bijectivity, all frames live.
    pub fn audit(&self, topology: &Topology) -> Result<(), String> {
        let leaf = self.mode.leaf_level();
        let mut seen = HashSet::new();
        let mut reached = 0usize;
        let mut data_seen = 0usize;
        let mut stack = vec![(self.root, Level::L1, 0u64)];
        while let Some((pfn, level, prefix)) = stack.pop() {
            if !seen.insert(pfn) {
                return Err(format!("frame {pfn} reachable twice"));
            }
            let page = self
                .pages
                .get(&pfn)
                .ok_or_else(|| format!("dangling table frame {pfn} at {level}"))?;
            reached += 1;
            if page.level != level {
                return Err(format!("page {pfn} has level {} at depth {level}", page.level));
            }
            if topology.node_of(pfn) != Ok(page.node) {
                return Err(format!("page {pfn} not live on node {}", page.node));
            }
            let present = page.entries().count();
            if present != page.present_count as usize {
                return Err(format!("page {pfn} present_count {} != {present}", page.present_count));
            }
            if level == leaf {
                let mut dram = 0;
                for (i, data) in page.entries() {
                    if !seen.insert(data) {
                        return Err(format!("data frame {data} mapped twice"));
                    }
                    data_seen += 1;
                    let va = (prefix << 9 | i as u64) << level.shift();
                    if self.rmap.get(&data).map(|v| v.get()) != Some(va) {
                        return Err(format!("rmap disagrees for {data} at {va:#x}"));
                    }
                    if !topology.is_allocated(data) {
                        return Err(format!("data frame {data} is freed"));
                    }
                    dram += u16::from(topology.tier(data.home_node()) == Tier::Dram);
                }
                if level == Level::L4 && dram != page.dram_child_count {
                    return Err(format!(
                        "page {pfn} dram_child_count {} != {dram}",
                        page.dram_child_count
                    ));
                }
            } else {
                let child = level.child().unwrap();
                for (i, c) in page.entries() {
                    stack.push((c, child, prefix << 9 | i as u64));
                }
            }
        }
        if reached != self.pages.len() {
            return Err(format!("{} table pages unreachable", self.pages.len() - reached));
        }
        if data_seen != self.rmap.len() {
            return Err(format!("rmap has {} entries, tree maps {data_seen}", self.rmap.len()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{NodeConfig, TopologyConfig};
    use proptest::prelude::*;

    const MIB: u64 = 1 << 20;
    const GIB: u64 = 1 << 30;
    const TIB: u64 = 1 << 40;

    fn topo() -> Topology {
        Topology::build(&TopologyConfig::with_nodes(vec![
            NodeConfig::new(0, Tier::Dram, 20_000, 2),
            NodeConfig::new(1, Tier::Dram, 20_000, 2),
            NodeConfig::new(2, Tier::Nvmm, 80_000, 0),
            NodeConfig::new(3, Tier::Nvmm, 80_000, 0),
        ]))
        .unwrap()
    }

    fn table(t: &mut Topology, mode: PageSizeMode, data: DataPolicy, pt: PtPolicy) -> PageTable {
        PageTable::new(
            Pid(1),
            mode,
            Placement {
                data_policy: data,
                pt_policy: pt,
            },
            t,
            NodeId(0),
        )
        .unwrap()
        .0
    }

    fn va(x: u64) -> VirtAddr {
        VirtAddr::new(x).unwrap()
    }

    #[test]
    fn first_map_allocates_every_level() {
        let mut t = topo();
        let mut pt = table(&mut t, PageSizeMode::Base4K, DataPolicy::FirstTouch, PtPolicy::FollowData);
        let o = pt.map(&mut t, va(0), NodeId(0)).unwrap();
        assert_eq!(
            o.new_pt_pages,
            vec![(Level::L2, NodeId(0)), (Level::L3, NodeId(0)), (Level::L4, NodeId(0))]
        );
        assert_eq!(o.data_node, NodeId(0));
        assert_eq!(o.alloc_latency, 4 * 500);
        let o = pt.map(&mut t, va(0x1000), NodeId(0)).unwrap();
        assert!(o.new_pt_pages.is_empty());
        let o = pt.map(&mut t, va(0x20_0000), NodeId(0)).unwrap();
        assert_eq!(o.new_pt_pages, vec![(Level::L4, NodeId(0))]);
        assert_eq!(pt.map(&mut t, va(0x20_0000), NodeId(0)), Err(PtError::AlreadyMapped(va(0x20_0000))));
        pt.audit(&t).unwrap();
    }

    #[test]
    fn unmap_keeps_empty_table_pages() {
        let mut t = topo();
        let mut pt = table(&mut t, PageSizeMode::Base4K, DataPolicy::FirstTouch, PtPolicy::FollowData);
        pt.map(&mut t, va(0), NodeId(0)).unwrap();
        let l4 = pt.tables_for(va(0))[3].unwrap();
        let out = pt.unmap(&mut t, va(0)).unwrap();
        assert!(out.freed_pt.is_empty());
        assert_eq!(pt.page(l4).unwrap().present_count, 0);
        assert!(t.is_allocated(l4));
        assert!(!t.is_allocated(out.data_pfn));
        assert_eq!(pt.unmap(&mut t, va(0)), Err(PtError::NotMapped(va(0))));
        pt.audit(&t).unwrap();
    }

    #[test]
    fn eager_reclaim_frees_empty_pages() {
        let mut t = topo();
        let mut pt = table(&mut t, PageSizeMode::Base4K, DataPolicy::FirstTouch, PtPolicy::FollowData);
        pt.set_eager_reclaim(true);
        pt.map(&mut t, va(0), NodeId(0)).unwrap();
        let out = pt.unmap(&mut t, va(0)).unwrap();
        assert_eq!(out.freed_pt.len(), 3);
        assert_eq!(pt.pages().count(), 1);
        pt.audit(&t).unwrap();
    }

    #[test]
    fn teardown_releases_everything() {
        let mut t = topo();
        let before: Vec<u64> = t.nodes().iter().map(|n| n.free_pages).collect();
        let mut pt = table(&mut t, PageSizeMode::Base4K, DataPolicy::FirstTouch, PtPolicy::FollowData);
        for x in [0, 0x1000, 0x4000_0000] {
            pt.map(&mut t, va(x), NodeId(0)).unwrap();
        }
        let (data, pages) = pt.teardown(&mut t).unwrap();
        assert_eq!(data, 3);
        assert_eq!(pages, 1 + 1 + 2 + 2);
        let after: Vec<u64> = t.nodes().iter().map(|n| n.free_pages).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn bind_high_walk_touches_dram_upper_levels() {
        let mut t = topo();
        let mut pt = table(&mut t, PageSizeMode::Base4K, DataPolicy::FirstTouch, PtPolicy::BindHigh);
        // place data and L4 on NVMM by asking from an NVMM "local" node
        let o = pt.map(&mut t, va(0), NodeId(2)).unwrap();
        assert_eq!(o.data_node, NodeId(2));
        let w = pt.walk_sw(va(0x10)).unwrap();
        let touched: Vec<(Level, NodeId)> = w.touched.iter().map(|x| (x.level, x.node)).collect();
        assert_eq!(
            touched,
            vec![(Level::L1, NodeId(0)), (Level::L2, NodeId(0)), (Level::L3, NodeId(0)), (Level::L4, NodeId(2))]
        );
        assert_eq!(w.data_pfn, o.data_pfn);
        assert_eq!(w.offset, 0x10);
        assert_eq!(pt.walk_sw(va(0x5000)), Err(PtError::NotMapped(va(0x5000))));
    }

    #[test]
    fn thp_walk_has_three_levels() {
        let mut t = topo();
        let mut pt = table(&mut t, PageSizeMode::Thp2M, DataPolicy::FirstTouch, PtPolicy::FollowData);
        let o = pt.map(&mut t, va(0x20_1234), NodeId(0)).unwrap();
        assert_eq!(o.new_pt_pages.len(), 2);
        assert_eq!(t.frame_pages(o.data_pfn), Some(512));
        let w = pt.walk_sw(va(0x3f_ffff)).unwrap();
        assert_eq!(w.touched.len(), 3);
        assert_eq!(w.offset, 0x1f_ffff);
        assert!(pt.pages().all(|p| p.level != Level::L4));
        assert_eq!(pt.get_pt_entries(o.data_pfn), Err(PtError::HugeMapping));
        pt.audit(&t).unwrap();
    }

    #[test]
    fn pt_entries_layout() {
        let mut t = topo();
        let mut pt = table(&mut t, PageSizeMode::Base4K, DataPolicy::FirstTouch, PtPolicy::FollowData);
        let a = pt.map(&mut t, va(0), NodeId(0)).unwrap().data_pfn;
        let b = pt.map(&mut t, va(0x1000), NodeId(0)).unwrap().data_pfn;
        let c = pt.map(&mut t, va(0x20_0000), NodeId(0)).unwrap().data_pfn;
        let (l4a, l3a) = pt.get_pt_entries(a).unwrap();
        assert_eq!(pt.get_pt_entries(b).unwrap(), (l4a, l3a));
        let (l4c, l3c) = pt.get_pt_entries(c).unwrap();
        assert_ne!(l4a, l4c);
        assert_eq!(l3a, l3c);
        let unknown = t.alloc_page(&[NodeId(0)], PageKind::Data).unwrap().pfn;
        assert_eq!(pt.get_pt_entries(unknown), Err(PtError::UnknownFrame(unknown)));
    }

    #[test]
    fn distribution_of_fresh_table() {
        let mut t = topo();
        let pt = table(&mut t, PageSizeMode::Base4K, DataPolicy::FirstTouch, PtPolicy::FollowData);
        let d = pt.pt_distribution();
        assert_eq!(d.pages.len(), 1);
        assert_eq!(d.pages[&(Level::L1, NodeId(0))], 1);
        assert_eq!(d.bytes(Level::L1, NodeId(0)), 4096);
    }

    #[test]
    fn replace_data_tracks_dram_children() {
        let mut t = topo();
        let mut pt = table(&mut t, PageSizeMode::Base4K, DataPolicy::FirstTouch, PtPolicy::FollowData);
        pt.map(&mut t, va(0), NodeId(0)).unwrap();
        pt.map(&mut t, va(0x1000), NodeId(0)).unwrap();
        let l4 = pt.tables_for(va(0))[3].unwrap();
        assert_eq!(pt.page(l4).unwrap().dram_child_count, 2);
        let nv = t.alloc_page(&[NodeId(2)], PageKind::Data).unwrap().pfn;
        let old = pt.replace_data(&t, va(0), nv).unwrap();
        t.free_page(old).unwrap();
        assert_eq!(pt.page(l4).unwrap().dram_child_count, 1);
        assert_eq!(pt.va_of(nv), Some(va(0)));
        assert_eq!(pt.va_of(old), None);
        pt.audit(&t).unwrap();
    }

    #[test]
    fn locks_only_on_l3_l4() {
        let mut t = topo();
        let mut pt = table(&mut t, PageSizeMode::Base4K, DataPolicy::FirstTouch, PtPolicy::FollowData);
        pt.map(&mut t, va(0), NodeId(0)).unwrap();
        let [l1, _, l3, l4] = pt.tables_for(va(0)).map(Option::unwrap);
        assert_eq!(pt.try_lock(l1, 7), Err(PtError::NotLockable(l1)));
        assert_eq!(pt.try_lock(l3, 7), Ok(true));
        assert_eq!(pt.try_lock(l3, 8), Ok(false));
        assert_eq!(pt.try_lock(l4, 8), Ok(true));
        assert!(!pt.unlock(l3, 8));
        assert!(pt.unlock(l3, 7));
        assert_eq!(pt.lock_holder(l4), Some(8));
    }

    #[test]
    fn size_estimate_examples() {
        let e = pt_size_estimate(2 * MIB, PageSizeMode::Base4K);
        assert_eq!(e.pages, [1, 1, 1, 1]);
        let e = pt_size_estimate(TIB, PageSizeMode::Base4K);
        assert_eq!(e.bytes(Level::L4), 2 * GIB);
        let e = pt_size_estimate(2 * TIB, PageSizeMode::Base4K);
        // 2048 L3 + 4 L2 + 1 L1 pages
        assert_eq!(e.upper_bytes(), (2048 + 4 + 1) * 4096);
        let ratio = e.upper_bytes() as f64 / e.total_bytes() as f64;
        assert!(ratio < 0.002, "{ratio}");
        let e = pt_size_estimate(2 * GIB, PageSizeMode::Thp2M);
        assert_eq!(e.pages, [1, 1, 2, 0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn estimate_matches_sequential_population(pages in 1u64..3000) {
            let mut t = topo();
            let mut pt = table(&mut t, PageSizeMode::Base4K, DataPolicy::FirstTouch, PtPolicy::FollowData);
            for p in 0..pages {
                pt.map(&mut t, va(p * PAGE_SIZE), NodeId(0)).unwrap();
            }
            let e = pt_size_estimate(pages * PAGE_SIZE, PageSizeMode::Base4K);
            let d = pt.pt_distribution();
            for level in Level::ALL {
                prop_assert_eq!(d.count_where(|l, _| l == level), e.pages[level.depth()]);
            }
        }

        #[test]
        fn shadow_map_agrees_with_walks(ops in proptest::collection::vec((0u64..4096, any::<bool>(), 0u16..4), 1..300)) {
            let mut t = topo();
            let mut pt = table(&mut t, PageSizeMode::Base4K, DataPolicy::FirstTouch, PtPolicy::BindHigh);
            let mut shadow: BTreeMap<u64, Pfn> = BTreeMap::new();
            for (page, unmap, node) in ops {
                // spread pages over several L4/L3 regions
                let addr = va((page * 0x7_3000 % (1 << 36)) & !0xfff);
                if unmap {
                    let r = pt.unmap(&mut t, addr);
                    match shadow.remove(&addr.get()) {
                        Some(p) => prop_assert_eq!(r.unwrap().data_pfn, p),
                        None => prop_assert_eq!(r, Err(PtError::NotMapped(addr))),
                    }
                } else if let std::collections::btree_map::Entry::Vacant(e) = shadow.entry(addr.get()) {
                    let o = pt.map(&mut t, addr, NodeId(node)).unwrap();
                    e.insert(o.data_pfn);
                } else {
                    prop_assert_eq!(pt.map(&mut t, addr, NodeId(node)), Err(PtError::AlreadyMapped(addr)));
                }
                pt.audit(&t).unwrap();
            }
            for (&a, &p) in &shadow {
                prop_assert_eq!(pt.walk_sw(va(a)).unwrap().data_pfn, p);
            }
            prop_assert!(pt.pages().all(|p| p.level == Level::L4 || t.tier(p.node) == Tier::Dram));
        }
    }
}
