//! Translation caches and the walk-cost model.
//!
//! A TLB miss walks the page table through [`PageTable::walk_from`], starting
//! below the deepest page-walk-cache hit. Each table page read costs the read
//! latency of the node hosting it.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::addr::{Level, NodeId, Pfn, Pid, VirtAddr};
use crate::page_table::{PageSizeMode, PageTable, WalkFault};
use crate::topology::Topology;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
}

/// Fully associative LRU map.
#[derive(Clone, Debug)]
pub struct LruCache<K, V> {
    capacity: usize,
    map: HashMap<K, (V, u64)>,
    order: BTreeMap<u64, K>,
    tick: u64,
}

impl<K: Copy + Eq + Hash, V: Copy> LruCache<K, V> {
    pub fn new(capacity: usize) -> Self {
        LruCache {
            capacity,
            map: HashMap::with_capacity(capacity),
            order: BTreeMap::new(),
            tick: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&mut self, key: &K) -> Option<V> {
        let (value, stamp) = self.map.get_mut(key)?;
        self.order.remove(stamp);
        self.tick += 1;
        *stamp = self.tick;
        self.order.insert(self.tick, *key);
        Some(*value)
    }

    pub fn insert(&mut self, key: K, value: V) {
        if self.capacity == 0 {
            return;
        }
        self.tick += 1;
        if let Some((v, stamp)) = self.map.get_mut(&key) {
            self.order.remove(stamp);
            *v = value;
            *stamp = self.tick;
        } else {
            if self.map.len() == self.capacity {
                let (_, victim) = self.order.pop_first().expect("full cache has entries");
                self.map.remove(&victim);
            }
            self.map.insert(key, (value, self.tick));
        }
        self.order.insert(self.tick, key);
    }

    pub fn clear(&mut self) {
        self.map.clear();
        self.order.clear();
    }
}

fn default_tlb_entries() -> usize {
    1536
}
fn default_pwc_entries() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_stall_fraction() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmuConfig {
    #[serde(default = "default_tlb_entries")]
    pub tlb_entries: usize,
    #[serde(default = "default_tlb_entries")]
    pub tlb_entries_2m: usize,
    #[serde(default = "default_pwc_entries")]
    pub pwc_entries: usize,
    #[serde(default = "default_true")]
    pub pwc_enabled: bool,
    /// Share of walk cycles that stall the pipeline.
    #[serde(default = "default_stall_fraction")]
    pub stall_fraction: f64,
}

impl Default for MmuConfig {
    fn default() -> Self {
        MmuConfig {
            tlb_entries: default_tlb_entries(),
            tlb_entries_2m: default_tlb_entries(),
            pwc_entries: default_pwc_entries(),
            pwc_enabled: true,
            stall_fraction: default_stall_fraction(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LevelCost {
    pub level: Level,
    pub node: NodeId,
    pub cycles: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessOutcome {
    pub data_pfn: Pfn,
    pub tlb_hit: bool,
    pub walk_levels: Vec<LevelCost>,
    pub walk_cycles: u64,
    pub data_cycles: u64,
    pub total_cycles: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AccessFault {
    /// No translation. The partial walk that discovered it is still paid.
    PageFault { walk_levels: Vec<LevelCost>, walk_cycles: u64 },
    /// A walk or cached translation reached a frame that is no longer live.
    FreedFrame { pfn: Pfn, level: Option<Level> },
}

/// Per-CPU translation hardware.
#[derive(Clone, Debug)]
pub struct Mmu {
    tlb_4k: LruCache<(Pid, u64), Pfn>,
    tlb_2m: LruCache<(Pid, u64), Pfn>,
    pwc: LruCache<(Pid, Level, u64), Pfn>,
    pwc_enabled: bool,
}

impl Mmu {
    pub fn new(config: &MmuConfig) -> Self {
        Mmu {
            tlb_4k: LruCache::new(config.tlb_entries),
            tlb_2m: LruCache::new(config.tlb_entries_2m),
            pwc: LruCache::new(if config.pwc_enabled { config.pwc_entries } else { 0 }),
            pwc_enabled: config.pwc_enabled && config.pwc_entries > 0,
        }
    }

    pub fn tlb_len(&self) -> usize {
        self.tlb_4k.len() + self.tlb_2m.len()
    }

    pub fn pwc_len(&self) -> usize {
        self.pwc.len()
    }

    pub fn flush_all(&mut self) {
        self.tlb_4k.clear();
        self.tlb_2m.clear();
        self.pwc.clear();
    }

    fn tlb(&mut self, mode: PageSizeMode) -> &mut LruCache<(Pid, u64), Pfn> {
        match mode {
            PageSizeMode::Base4K => &mut self.tlb_4k,
            PageSizeMode::Thp2M => &mut self.tlb_2m,
        }
    }

    fn costs(topology: &Topology, touched: &[crate::page_table::Touch]) -> (Vec<LevelCost>, u64) {
        let levels: Vec<LevelCost> = touched
            .iter()
            .map(|t| LevelCost {
                level: t.level,
                node: t.node,
                cycles: topology.node(t.node).map(|n| n.read_latency).unwrap_or(0),
            })
            .collect();
        let sum = levels.iter().map(|l| l.cycles).sum();
        (levels, sum)
    }

    fn data_cycles(topology: &Topology, pfn: Pfn, kind: AccessKind) -> u64 {
        let node = topology.node(pfn.home_node()).expect("live frames belong to known nodes");
        match kind {
            AccessKind::Read => node.read_latency,
            AccessKind::Write => node.write_latency,
        }
    }

    /// Translates `va` and accesses the data it maps.
    pub fn access(
        &mut self,
        pt: &PageTable,
        topology: &Topology,
        va: VirtAddr,
        kind: AccessKind,
    ) -> Result<AccessOutcome, AccessFault> {
        let pid = pt.pid();
        let mode = pt.mode();
        let vpn = va.get() >> mode.page_shift();
        if let Some(pfn) = self.tlb(mode).get(&(pid, vpn)) {
            if !topology.is_allocated(pfn) {
                return Err(AccessFault::FreedFrame { pfn, level: None });
            }
            let data_cycles = Self::data_cycles(topology, pfn, kind);
            return Ok(AccessOutcome {
                data_pfn: pfn,
                tlb_hit: true,
                walk_levels: Vec::new(),
                walk_cycles: 0,
                data_cycles,
                total_cycles: data_cycles,
            });
        }

        let leaf = mode.leaf_level();
        let mut start = (Level::L1, pt.root());
        if self.pwc_enabled {
            for level in [Level::L3, Level::L2, Level::L1] {
                if level >= leaf {
                    continue;
                }
                if let Some(next) = self.pwc.get(&(pid, level, va.prefix(level))) {
                    start = (level.child().unwrap(), next);
                    break;
                }
            }
        }

        let result = pt.walk_from(start.0, start.1, va);
        let touched = match &result {
            Ok(w) => &w.touched,
            Err(WalkFault::NotPresent { touched, .. }) => touched,
            Err(WalkFault::Stale { level, pfn }) => {
                return Err(AccessFault::FreedFrame {
                    pfn: *pfn,
                    level: Some(*level),
                })
            }
        };
        if self.pwc_enabled {
            for pair in touched.windows(2) {
                if pair[0].level < leaf {
                    self.pwc
                        .insert((pid, pair[0].level, va.prefix(pair[0].level)), pair[1].pfn);
                }
            }
        }
        let (walk_levels, walk_cycles) = Self::costs(topology, touched);
        match result {
            Ok(w) => {
                if !topology.is_allocated(w.data_pfn) {
                    return Err(AccessFault::FreedFrame {
                        pfn: w.data_pfn,
                        level: None,
                    });
                }
                self.tlb(mode).insert((pid, vpn), w.data_pfn);
                let data_cycles = Self::data_cycles(topology, w.data_pfn, kind);
                Ok(AccessOutcome {
                    data_pfn: w.data_pfn,
                    tlb_hit: false,
                    walk_levels,
                    walk_cycles,
                    data_cycles,
                    total_cycles: walk_cycles + data_cycles,
                })
            }
            Err(_) => Err(AccessFault::PageFault {
                walk_levels,
                walk_cycles,
            }),
        }
    }
}

/// TLB misses per thousand instructions; `None` without instructions.
pub fn mpki(tlb_misses: u64, instructions: u64) -> Option<f64> {
    (instructions > 0).then(|| 1000.0 * tlb_misses as f64 / instructions as f64)
}
