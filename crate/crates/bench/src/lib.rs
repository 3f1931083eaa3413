//! Shared fixtures for the benchmarks.

use ptplace_core::machine::Machine;
use ptplace_core::migration::HotnessConfig;
use ptplace_core::mmu::MmuConfig;
use ptplace_core::topology::NodeConfig;
use ptplace_core::workloads::HEAP_BASE;
use ptplace_core::{DataPolicy, NodeId, PageSizeMode, Pid, Placement, PtPolicy, Tier, Topology, TopologyConfig, VirtAddr};

pub fn topology() -> Topology {
    Topology::build(&TopologyConfig::with_nodes(vec![
        NodeConfig::new(0, Tier::Dram, 200_000, 2),
        NodeConfig::new(1, Tier::Nvmm, 800_000, 0),
    ]))
    .unwrap()
}

/// A machine with one process and `pages` 4 KiB pages mapped from the
/// heap base, data placed on `data_node`.
pub fn populated(pages: u64, data_node: NodeId, pte_migration: bool) -> (Machine, Pid, Vec<VirtAddr>) {
    let mut m = Machine::new(topology(), 2, &MmuConfig::default(), HotnessConfig::default(), pte_migration);
    let placement = Placement {
        data_policy: DataPolicy::FirstTouch,
        pt_policy: PtPolicy::BindHigh,
    };
    let (pid, _) = m.spawn("bench", PageSizeMode::Base4K, placement, NodeId(0)).unwrap();
    let vas: Vec<VirtAddr> = (0..pages).map(|i| VirtAddr::new(HEAP_BASE + i * 4096).unwrap()).collect();
    for &va in &vas {
        m.map(pid, va, data_node).unwrap();
    }
    (m, pid, vas)
}
