//! NUMA nodes across the DRAM and NVMM tiers, watermark-aware frame
//! allocation, and placement of data and page-table pages.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::addr::{Level, NodeId, Pfn, PAGE_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Dram,
    Nvmm,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Dram => "dram",
            Tier::Nvmm => "nvmm",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataPolicy {
    FirstTouch,
    Interleave,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PtPolicy {
    /// Page-table pages are placed exactly like data pages.
    FollowData,
    /// Every page-table level is restricted to DRAM.
    BindAll,
    /// L1-L3 are restricted to DRAM, L4 follows the data policy.
    BindHigh,
}

impl PtPolicy {
    pub fn binds(self, level: Level) -> bool {
        match self {
            PtPolicy::FollowData => false,
            PtPolicy::BindAll => true,
            PtPolicy::BindHigh => level.is_high(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PageKind {
    Data,
    Pt(Level),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AllocPath {
    Fast,
    Slow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AllocOutcome {
    pub pfn: Pfn,
    pub node: NodeId,
    pub path: AllocPath,
    pub latency: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("invalid topology: {0}")]
    Config(String),
    #[error("out of memory allocating {kind:?} on nodes {candidates:?}")]
    OutOfMemory { kind: PageKind, candidates: Vec<NodeId> },
    #[error("frame {0} is not allocated")]
    DoubleFree(Pfn),
    #[error("frame {0} is not allocated")]
    UnknownFrame(Pfn),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

fn default_dram_latency() -> u64 {
    100
}
fn default_nvmm_latency() -> u64 {
    300
}
fn default_fast_path() -> u64 {
    500
}
fn default_slow_path() -> u64 {
    50_000
}
fn default_low_pct() -> f64 {
    2.0
}
fn default_min_pct() -> f64 {
    0.5
}

/// One node in the topology section of a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: u16,
    pub tier: Tier,
    /// Capacity in MiB. Exactly one of `capacity_mib` / `capacity_pages`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_mib: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_pages: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub read_latency: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub write_latency: Option<u64>,
    #[serde(default)]
    pub cpus: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_watermark_pages: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_watermark_pages: Option<u64>,
}

impl NodeConfig {
    pub fn new(id: u16, tier: Tier, capacity_pages: u64, cpus: u32) -> Self {
        NodeConfig {
            id,
            tier,
            capacity_mib: None,
            capacity_pages: Some(capacity_pages),
            read_latency: None,
            write_latency: None,
            cpus,
            low_watermark_pages: None,
            min_watermark_pages: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub nodes: Vec<NodeConfig>,
    /// Optional node-to-node distance ranks, in `nodes` order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<Vec<Vec<u32>>>,
    #[serde(default = "default_dram_latency")]
    pub dram_read_latency: u64,
    #[serde(default = "default_nvmm_latency")]
    pub nvmm_read_latency: u64,
    /// Defaults to the tier's read latency.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dram_write_latency: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nvmm_write_latency: Option<u64>,
    #[serde(default = "default_fast_path")]
    pub fast_path_latency: u64,
    #[serde(default = "default_slow_path")]
    pub slow_path_latency: u64,
    #[serde(default = "default_low_pct")]
    pub low_watermark_pct: f64,
    #[serde(default = "default_min_pct")]
    pub min_watermark_pct: f64,
}

impl TopologyConfig {
    pub fn with_nodes(nodes: Vec<NodeConfig>) -> Self {
        TopologyConfig {
            nodes,
            distance: None,
            dram_read_latency: default_dram_latency(),
            nvmm_read_latency: default_nvmm_latency(),
            dram_write_latency: None,
            nvmm_write_latency: None,
            fast_path_latency: default_fast_path(),
            slow_path_latency: default_slow_path(),
            low_watermark_pct: default_low_pct(),
            min_watermark_pct: default_min_pct(),
        }
    }

    /// Two DRAM sockets with CPUs and two CPU-less NVMM nodes, 1:4 capacity.
    pub fn two_socket(dram_mib: u64, nvmm_mib: u64, cpus_per_socket: u32) -> Self {
        let dram = |id| NodeConfig {
            capacity_mib: Some(dram_mib),
            capacity_pages: None,
            ..NodeConfig::new(id, Tier::Dram, 0, cpus_per_socket)
        };
        let (d0, d1) = (dram(0), dram(1));
        let nvmm = |id| NodeConfig {
            capacity_mib: Some(nvmm_mib),
            capacity_pages: None,
            ..NodeConfig::new(id, Tier::Nvmm, 0, 0)
        };
        TopologyConfig::with_nodes(vec![d0, d1, nvmm(2), nvmm(3)])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NumaNode {
    pub id: NodeId,
    pub tier: Tier,
    pub capacity_pages: u64,
    pub free_pages: u64,
    pub read_latency: u64,
    pub write_latency: u64,
    pub low_watermark: u64,
    pub min_watermark: u64,
    pub local_cpu_count: u32,
}

impl NumaNode {
    pub fn allocated_pages(&self) -> u64 {
        self.capacity_pages - self.free_pages
    }

    pub fn above_low_watermark(&self) -> bool {
        self.free_pages >= self.low_watermark
    }
}

#[derive(Clone, Copy, Debug)]
struct FrameMeta {
    pages: u32,
    kind: PageKind,
}

/// Per-node frame identities. Fresh indices are handed out before recycled
/// ones, and recycled ones come back in FIFO order, so a freed frame number
/// stays unused for as long as possible.
#[derive(Clone, Debug, Default)]
struct FrameStore {
    next_fresh: u64,
    recycled: VecDeque<u64>,
    frames: Vec<Option<FrameMeta>>,
}

impl FrameStore {
    fn take_index(&mut self, capacity: u64) -> u64 {
        if self.next_fresh < capacity {
            let i = self.next_fresh;
            self.next_fresh += 1;
            self.frames.push(None);
            i
        } else {
            self.recycled
                .pop_front()
                .expect("free pages imply a free frame identity")
        }
    }

    fn meta(&self, index: u64) -> Option<FrameMeta> {
        self.frames.get(index as usize).copied().flatten()
    }
}

/// Rotating cursors for interleaved placement. Data and page-table pages
/// rotate independently.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InterleaveCursor {
    pub data: usize,
    pub pt: usize,
}

#[derive(Clone, Debug)]
pub struct Topology {
    nodes: Vec<NumaNode>,
    distance: Vec<Vec<u32>>,
    stores: Vec<FrameStore>,
    fast_path_latency: u64,
    slow_path_latency: u64,
}

impl Topology {
    pub fn build(config: &TopologyConfig) -> Result<Topology, TopologyError> {
        let err = |m: String| Err(TopologyError::Config(m));
        if config.nodes.is_empty() {
            return err("topology needs at least one node".into());
        }
        if !(0.0..100.0).contains(&config.low_watermark_pct)
            || !(0.0..100.0).contains(&config.min_watermark_pct)
        {
            return err("watermark percentages must be in [0, 100)".into());
        }
        let mut nodes = Vec::with_capacity(config.nodes.len());
        for nc in &config.nodes {
            if nodes.iter().any(|n: &NumaNode| n.id.0 == nc.id) {
                return err(format!("duplicate node id {}", nc.id));
            }
            let capacity_pages = match (nc.capacity_mib, nc.capacity_pages) {
                (Some(mib), None) => mib * (1 << 20) / PAGE_SIZE,
                (None, Some(p)) => p,
                _ => {
                    return err(format!(
                        "node {}: give exactly one of capacity_mib or capacity_pages",
                        nc.id
                    ))
                }
            };
            if capacity_pages == 0 {
                return err(format!("node {} has zero capacity", nc.id));
            }
            if nc.tier == Tier::Nvmm && nc.cpus > 0 {
                return err(format!("NVMM node {} cannot have local CPUs", nc.id));
            }
            let (tier_read, tier_write) = match nc.tier {
                Tier::Dram => (
                    config.dram_read_latency,
                    config.dram_write_latency.unwrap_or(config.dram_read_latency),
                ),
                Tier::Nvmm => (
                    config.nvmm_read_latency,
                    config.nvmm_write_latency.unwrap_or(config.nvmm_read_latency),
                ),
            };
            let pct = |p: f64| (capacity_pages as f64 * p / 100.0).floor() as u64;
            let min_watermark = nc
                .min_watermark_pages
                .unwrap_or_else(|| pct(config.min_watermark_pct).max(1));
            let low_watermark = nc
                .low_watermark_pages
                .unwrap_or_else(|| pct(config.low_watermark_pct).max(min_watermark + 1));
            if !(min_watermark < low_watermark && low_watermark < capacity_pages) {
                return err(format!(
                    "node {}: watermarks must satisfy min ({min_watermark}) < low ({low_watermark}) < capacity ({capacity_pages})",
                    nc.id
                ));
            }
            nodes.push(NumaNode {
                id: NodeId(nc.id),
                tier: nc.tier,
                capacity_pages,
                free_pages: capacity_pages,
                read_latency: nc.read_latency.unwrap_or(tier_read),
                write_latency: nc.write_latency.unwrap_or(tier_write),
                low_watermark,
                min_watermark,
                local_cpu_count: nc.cpus,
            });
        }
        let n = nodes.len();
        let distance = match &config.distance {
            Some(d) => {
                if d.len() != n || d.iter().any(|row| row.len() != n) {
                    return err(format!("distance matrix must be {n}x{n}"));
                }
                for (i, row) in d.iter().enumerate() {
                    if row[i] != 0 {
                        return err("distance matrix diagonal must be zero".into());
                    }
                    if row.iter().enumerate().any(|(j, &x)| x != d[j][i]) {
                        return err("distance matrix must be symmetric".into());
                    }
                }
                d.clone()
            }
            None => (0..n)
                .map(|i| (0..n).map(|j| u32::from(i != j)).collect())
                .collect(),
        };
        Ok(Topology {
            stores: vec![FrameStore::default(); n],
            nodes,
            distance,
            fast_path_latency: config.fast_path_latency,
            slow_path_latency: config.slow_path_latency,
        })
    }

    pub fn nodes(&self) -> &[NumaNode] {
        &self.nodes
    }

    fn pos(&self, id: NodeId) -> Result<usize, TopologyError> {
        self.nodes
            .iter()
            .position(|n| n.id == id)
            .ok_or(TopologyError::UnknownNode(id))
    }

    pub fn node(&self, id: NodeId) -> Result<&NumaNode, TopologyError> {
        Ok(&self.nodes[self.pos(id)?])
    }

    pub fn tier(&self, id: NodeId) -> Tier {
        self.node(id).map(|n| n.tier).unwrap_or(Tier::Nvmm)
    }

    pub fn has_tier(&self, tier: Tier) -> bool {
        self.nodes.iter().any(|n| n.tier == tier)
    }

    pub fn distance(&self, a: NodeId, b: NodeId) -> Result<u32, TopologyError> {
        Ok(self.distance[self.pos(a)?][self.pos(b)?])
    }

    pub fn fast_path_latency(&self) -> u64 {
        self.fast_path_latency
    }

    pub fn slow_path_latency(&self) -> u64 {
        self.slow_path_latency
    }

    /// Nodes of `tier` ordered by distance from `from`, ties by id.
    pub fn nearest(&self, from: NodeId, tier: Tier) -> Vec<NodeId> {
        let Ok(fp) = self.pos(from) else {
            return Vec::new();
        };
        let mut v: Vec<(u32, NodeId)> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.tier == tier)
            .map(|(i, n)| (self.distance[fp][i], n.id))
            .collect();
        v.sort();
        v.into_iter().map(|(_, id)| id).collect()
    }

    /// Ordered candidate nodes for one allocation.
    ///
    /// First-touch yields the local node, then same-tier peers, then the
    /// other tier, each group by ascending distance. Interleave yields a
    /// rotation starting at the cursor and advances it. Page-table levels
    /// bound by `pt_policy` keep only DRAM nodes; data is never filtered.
    pub fn select_node(
        &self,
        kind: PageKind,
        data_policy: DataPolicy,
        pt_policy: PtPolicy,
        local: NodeId,
        cursor: &mut InterleaveCursor,
    ) -> Result<Vec<NodeId>, TopologyError> {
        let local_pos = self.pos(local)?;
        let mut order: Vec<NodeId> = match data_policy {
            DataPolicy::FirstTouch => {
                let tier = self.nodes[local_pos].tier;
                let other = match tier {
                    Tier::Dram => Tier::Nvmm,
                    Tier::Nvmm => Tier::Dram,
                };
                let mut v = vec![local];
                v.extend(self.nearest(local, tier).into_iter().filter(|&n| n != local));
                v.extend(self.nearest(local, other));
                v
            }
            DataPolicy::Interleave => {
                let n = self.nodes.len();
                let slot = match kind {
                    PageKind::Data => &mut cursor.data,
                    PageKind::Pt(_) => &mut cursor.pt,
                };
                let start = *slot % n;
                *slot = (start + 1) % n;
                (0..n).map(|k| self.nodes[(start + k) % n].id).collect()
            }
        };
        if let PageKind::Pt(level) = kind {
            if pt_policy.binds(level) {
                order.retain(|&id| self.tier(id) == Tier::Dram);
            }
        }
        Ok(order)
    }

    pub fn alloc_page(
        &mut self,
        candidates: &[NodeId],
        kind: PageKind,
    ) -> Result<AllocOutcome, TopologyError> {
        self.alloc_pages(candidates, kind, 1)
    }

    /// Allocates one frame spanning `pages` base pages on the first
    /// candidate that stays at or above its min watermark afterwards.
    pub fn alloc_pages(
        &mut self,
        candidates: &[NodeId],
        kind: PageKind,
        pages: u32,
    ) -> Result<AllocOutcome, TopologyError> {
        for &id in candidates {
            let p = self.pos(id)?;
            let node = &self.nodes[p];
            if node.free_pages < node.min_watermark + pages as u64 {
                continue;
            }
            let (path, latency) = if node.free_pages >= node.low_watermark {
                (AllocPath::Fast, self.fast_path_latency)
            } else {
                (AllocPath::Slow, self.slow_path_latency)
            };
            let capacity = node.capacity_pages;
            let index = self.stores[p].take_index(capacity);
            self.stores[p].frames[index as usize] = Some(FrameMeta { pages, kind });
            self.nodes[p].free_pages -= pages as u64;
            return Ok(AllocOutcome {
                pfn: Pfn::new(id, index),
                node: id,
                path,
                latency,
            });
        }
        Err(TopologyError::OutOfMemory {
            kind,
            candidates: candidates.to_vec(),
        })
    }

    pub fn free_page(&mut self, pfn: Pfn) -> Result<(), TopologyError> {
        let p = self
            .pos(pfn.home_node())
            .map_err(|_| TopologyError::DoubleFree(pfn))?;
        let store = &mut self.stores[p];
        let Some(meta) = store.meta(pfn.index()) else {
            return Err(TopologyError::DoubleFree(pfn));
        };
        store.frames[pfn.index() as usize] = None;
        store.recycled.push_back(pfn.index());
        self.nodes[p].free_pages += meta.pages as u64;
        Ok(())
    }

    fn meta(&self, pfn: Pfn) -> Option<FrameMeta> {
        let p = self.pos(pfn.home_node()).ok()?;
        self.stores[p].meta(pfn.index())
    }

    pub fn node_of(&self, pfn: Pfn) -> Result<NodeId, TopologyError> {
        self.meta(pfn)
            .map(|_| pfn.home_node())
            .ok_or(TopologyError::UnknownFrame(pfn))
    }

    pub fn is_allocated(&self, pfn: Pfn) -> bool {
        self.meta(pfn).is_some()
    }

    pub fn kind_of(&self, pfn: Pfn) -> Option<PageKind> {
        self.meta(pfn).map(|m| m.kind)
    }

    /// Base pages covered by a live frame.
    pub fn frame_pages(&self, pfn: Pfn) -> Option<u32> {
        self.meta(pfn).map(|m| m.pages)
    }

    /// Allocated base pages on `node` recounted from the frame table.
    pub fn recount_allocated(&self, node: NodeId) -> u64 {
        let Ok(p) = self.pos(node) else { return 0 };
        self.stores[p]
            .frames
            .iter()
            .flatten()
            .map(|m| m.pages as u64)
            .sum()
    }

    pub fn total_free(&self, tier: Tier) -> u64 {
        self.nodes
            .iter()
            .filter(|n| n.tier == tier)
            .map(|n| n.free_pages)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn four_node(dram: u64, nvmm: u64) -> Topology {
        Topology::build(&TopologyConfig::with_nodes(vec![
            NodeConfig::new(0, Tier::Dram, dram, 4),
            NodeConfig::new(1, Tier::Dram, dram, 4),
            NodeConfig::new(2, Tier::Nvmm, nvmm, 0),
            NodeConfig::new(3, Tier::Nvmm, nvmm, 0),
        ]))
        .unwrap()
    }

    #[test]
    fn builds_four_node_tiered() {
        // 192 GiB : 800 GiB scaled down by 2^10 per node
        let t = Topology::build(&TopologyConfig::two_socket(192, 800, 12)).unwrap();
        assert_eq!(t.nodes().len(), 4);
        assert_eq!(t.node(NodeId(0)).unwrap().capacity_pages, 192 * 256);
        assert_eq!(t.node(NodeId(3)).unwrap().tier, Tier::Nvmm);
        for n in t.nodes() {
            assert_eq!(n.free_pages, n.capacity_pages);
            assert!(n.min_watermark < n.low_watermark && n.low_watermark < n.capacity_pages);
        }
        assert_eq!(t.node(NodeId(2)).unwrap().read_latency, 300);
        assert_eq!(t.node(NodeId(0)).unwrap().read_latency, 100);
    }

    #[test]
    fn single_dram_node_is_valid() {
        let t = Topology::build(&TopologyConfig::with_nodes(vec![NodeConfig::new(
            0,
            Tier::Dram,
            1000,
            1,
        )]))
        .unwrap();
        assert!(!t.has_tier(Tier::Nvmm));
    }

    #[test]
    fn rejects_bad_configs() {
        let dup = TopologyConfig::with_nodes(vec![
            NodeConfig::new(0, Tier::Dram, 1000, 1),
            NodeConfig::new(0, Tier::Nvmm, 1000, 0),
        ]);
        assert!(matches!(Topology::build(&dup), Err(TopologyError::Config(_))));
        let zero = TopologyConfig::with_nodes(vec![NodeConfig::new(0, Tier::Dram, 0, 1)]);
        assert!(matches!(Topology::build(&zero), Err(TopologyError::Config(_))));
        let cpu_nvmm = TopologyConfig::with_nodes(vec![NodeConfig::new(0, Tier::Nvmm, 100, 2)]);
        assert!(Topology::build(&cpu_nvmm).is_err());
        let mut asym = TopologyConfig::with_nodes(vec![
            NodeConfig::new(0, Tier::Dram, 1000, 1),
            NodeConfig::new(1, Tier::Nvmm, 1000, 0),
        ]);
        asym.distance = Some(vec![vec![0, 1], vec![2, 0]]);
        assert!(Topology::build(&asym).is_err());
    }

    #[test]
    fn interleave_round_robin() {
        let t = four_node(1000, 1000);
        let mut c = InterleaveCursor::default();
        let firsts: Vec<u16> = (0..8)
            .map(|_| {
                t.select_node(PageKind::Data, DataPolicy::Interleave, PtPolicy::FollowData, NodeId(0), &mut c)
                    .unwrap()[0]
                    .0
            })
            .collect();
        assert_eq!(firsts, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn follow_data_pt_rotates_like_data() {
        let t = four_node(1000, 1000);
        let mut c = InterleaveCursor::default();
        let pts: Vec<u16> = (0..4)
            .map(|_| {
                t.select_node(
                    PageKind::Pt(Level::L4),
                    DataPolicy::Interleave,
                    PtPolicy::FollowData,
                    NodeId(0),
                    &mut c,
                )
                .unwrap()[0]
                    .0
            })
            .collect();
        assert_eq!(pts, vec![0, 1, 2, 3]);
    }

    #[test]
    fn bind_high_filters_upper_levels() {
        let t = four_node(1000, 1000);
        let mut c = InterleaveCursor::default();
        let l3 = t
            .select_node(PageKind::Pt(Level::L3), DataPolicy::Interleave, PtPolicy::BindHigh, NodeId(0), &mut c)
            .unwrap();
        let mut sorted = l3.clone();
        sorted.sort();
        assert_eq!(sorted, vec![NodeId(0), NodeId(1)]);
        let l4 = t
            .select_node(PageKind::Pt(Level::L4), DataPolicy::FirstTouch, PtPolicy::BindHigh, NodeId(0), &mut c)
            .unwrap();
        assert_eq!(l4.len(), 4);
        let all = t
            .select_node(PageKind::Pt(Level::L4), DataPolicy::FirstTouch, PtPolicy::BindAll, NodeId(0), &mut c)
            .unwrap();
        assert_eq!(all, vec![NodeId(0), NodeId(1)]);
        let data = t
            .select_node(PageKind::Data, DataPolicy::FirstTouch, PtPolicy::BindAll, NodeId(1), &mut c)
            .unwrap();
        assert_eq!(data, vec![NodeId(1), NodeId(0), NodeId(2), NodeId(3)]);
    }

    #[test]
    fn first_touch_prefers_same_tier_before_distance() {
        let mut cfg = TopologyConfig::with_nodes(vec![
            NodeConfig::new(0, Tier::Dram, 1000, 1),
            NodeConfig::new(1, Tier::Dram, 1000, 1),
            NodeConfig::new(2, Tier::Nvmm, 1000, 0),
            NodeConfig::new(3, Tier::Nvmm, 1000, 0),
        ]);
        // node 2 sits closer to node 0 than the remote DRAM socket does
        cfg.distance = Some(vec![
            vec![0, 21, 17, 28],
            vec![21, 0, 28, 17],
            vec![17, 28, 0, 30],
            vec![28, 17, 30, 0],
        ]);
        let t = Topology::build(&cfg).unwrap();
        let order = t
            .select_node(PageKind::Data, DataPolicy::FirstTouch, PtPolicy::FollowData, NodeId(0), &mut InterleaveCursor::default())
            .unwrap();
        assert_eq!(order, vec![NodeId(0), NodeId(1), NodeId(2), NodeId(3)]);
    }

    fn watermark_topology(free_target: u64) -> Topology {
        let mut nc = NodeConfig::new(0, Tier::Dram, 1000, 1);
        nc.low_watermark_pages = Some(100);
        nc.min_watermark_pages = Some(10);
        let mut t = Topology::build(&TopologyConfig::with_nodes(vec![nc])).unwrap();
        while t.node(NodeId(0)).unwrap().free_pages > free_target {
            t.alloc_page(&[NodeId(0)], PageKind::Data).unwrap();
        }
        t
    }

    #[test]
    fn fast_path_above_low_watermark() {
        let mut t = watermark_topology(1000);
        let o = t.alloc_page(&[NodeId(0)], PageKind::Data).unwrap();
        assert_eq!(o.path, AllocPath::Fast);
        assert_eq!(o.latency, 500);
    }

    #[test]
    fn slow_path_below_low_watermark() {
        let mut t = watermark_topology(50);
        let o = t.alloc_page(&[NodeId(0)], PageKind::Data).unwrap();
        assert_eq!(o.path, AllocPath::Slow);
        assert_eq!(o.latency, 50_000);
    }

    #[test]
    fn oom_at_min_watermark() {
        let mut t = watermark_topology(10);
        let e = t.alloc_page(&[NodeId(0)], PageKind::Pt(Level::L4)).unwrap_err();
        assert!(matches!(e, TopologyError::OutOfMemory { .. }));
        assert_eq!(t.node(NodeId(0)).unwrap().free_pages, 10);
    }

    #[test]
    fn falls_back_to_next_candidate() {
        let mut t = four_node(100, 1000);
        let order = [NodeId(0), NodeId(2)];
        let min = t.node(NodeId(0)).unwrap().min_watermark;
        for _ in 0..(100 - min) {
            assert_eq!(t.alloc_page(&order, PageKind::Data).unwrap().node, NodeId(0));
        }
        assert_eq!(t.alloc_page(&order, PageKind::Data).unwrap().node, NodeId(2));
    }

    #[test]
    fn free_restores_and_rejects_double_free() {
        let mut t = four_node(1000, 1000);
        let before = t.node(NodeId(0)).unwrap().free_pages;
        let o = t.alloc_page(&[NodeId(0)], PageKind::Data).unwrap();
        t.free_page(o.pfn).unwrap();
        assert_eq!(t.node(NodeId(0)).unwrap().free_pages, before);
        assert_eq!(t.free_page(o.pfn), Err(TopologyError::DoubleFree(o.pfn)));
        assert_eq!(t.node_of(o.pfn), Err(TopologyError::UnknownFrame(o.pfn)));
    }

    #[test]
    fn alloc_three_free_two() {
        let mut t = four_node(1000, 1000);
        let a: Vec<_> = (0..3)
            .map(|_| t.alloc_page(&[NodeId(0)], PageKind::Data).unwrap().pfn)
            .collect();
        t.free_page(a[0]).unwrap();
        t.free_page(a[2]).unwrap();
        assert_eq!(t.node(NodeId(0)).unwrap().free_pages, 1000 - 1);
    }

    #[test]
    fn node_of_tracks_distinct_frames() {
        let mut t = four_node(1000, 1000);
        let old = t.alloc_page(&[NodeId(2)], PageKind::Data).unwrap().pfn;
        assert_eq!(t.node_of(old), Ok(NodeId(2)));
        let new = t.alloc_page(&[NodeId(0)], PageKind::Data).unwrap().pfn;
        assert_ne!(old, new);
        assert_eq!(t.node_of(new), Ok(NodeId(0)));
        assert_eq!(t.node_of(old), Ok(NodeId(2)));
    }

    #[test]
    fn frames_not_reused_while_allocated() {
        let mut t = four_node(1000, 50);
        let mut live = std::collections::HashSet::new();
        for round in 0..200 {
            let o = t.alloc_page(&[NodeId(0)], PageKind::Data).unwrap();
            assert!(live.insert(o.pfn));
            if round % 3 != 0 {
                let victim = *live.iter().min().unwrap();
                live.remove(&victim);
                t.free_page(victim).unwrap();
            }
        }
    }

    proptest! {
        #[test]
        fn conservation_and_watermark_rule(ops in proptest::collection::vec((0u8..4, any::<bool>()), 1..400)) {
            let mut t = four_node(200, 300);
            let mut live: Vec<Pfn> = Vec::new();
            for (node, free) in ops {
                if free && !live.is_empty() {
                    let pfn = live.swap_remove(0);
                    t.free_page(pfn).unwrap();
                } else {
                    let id = NodeId(node as u16);
                    let before = t.node(id).unwrap().clone();
                    match t.alloc_page(&[id], PageKind::Data) {
                        Ok(o) => {
                            prop_assert_eq!(o.path == AllocPath::Slow, before.free_pages < before.low_watermark);
                            live.push(o.pfn);
                        }
                        Err(_) => prop_assert!(before.free_pages <= before.min_watermark),
                    }
                }
                for n in t.nodes() {
                    prop_assert_eq!(t.recount_allocated(n.id) + n.free_pages, n.capacity_pages);
                }
            }
        }

        #[test]
        fn interleave_fairness(n in 1usize..2000) {
            let mut t = four_node(10_000, 10_000);
            let mut c = InterleaveCursor::default();
            let mut counts = [0usize; 4];
            for _ in 0..n {
                let cand = t.select_node(PageKind::Data, DataPolicy::Interleave, PtPolicy::FollowData, NodeId(0), &mut c).unwrap();
                let o = t.alloc_page(&cand, PageKind::Data).unwrap();
                counts[o.node.0 as usize] += 1;
            }
            for c in counts {
                prop_assert!(c >= n / 4 && c <= n.div_ceil(4));
            }
        }
    }
}
