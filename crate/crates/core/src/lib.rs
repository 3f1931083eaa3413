//! Simulator of page-table placement and migration on tiered DRAM/NVMM
//! NUMA machines.
//!
//! [`topology`] owns physical memory, [`page_table`] builds per-process
//! radix tables on it, [`mmu`] translates with TLB and walk caches,
//! [`migration`] moves data pages and the leaf table pages that map them,
//! and [`engine`] interleaves simulated CPUs over the [`workloads`].

pub mod addr;
pub mod config;
pub mod engine;
pub mod machine;
pub mod migration;
pub mod mmu;
pub mod page_table;
pub mod report;
pub mod topology;
pub mod workloads;

pub use addr::{Level, NodeId, Pfn, Pid, VirtAddr};
pub use config::RunConfig;
pub use engine::{Engine, EngineConfig, EngineError, PolicyConfig};
pub use migration::{L4Outcome, MigrationStats};
pub use page_table::{PageSizeMode, Placement};
pub use report::{CycleAccounting, Report};
pub use topology::{DataPolicy, PageKind, PtPolicy, Tier, Topology, TopologyConfig};
pub use workloads::{run_scenario, ScenarioConfig, ScenarioKind, WorkloadSpec};
