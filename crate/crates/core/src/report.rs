//! Run report and its on-disk forms.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::addr::{Level, NodeId, Pid};
use crate::migration::MigrationStats;
use crate::mmu::mpki;
use crate::page_table::PtDistribution;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleAccounting {
    pub instructions: u64,
    pub total_cycles: u64,
    pub walk_cycles: u64,
    pub stall_cycles: u64,
    pub data_cycles: u64,
    pub wait_cycles: u64,
    pub tlb_misses: u64,
    pub tlb_hits: u64,
    pub faults: u64,
    pub alloc_latency_sum: u64,
}

impl CycleAccounting {
    pub fn add(&mut self, o: &CycleAccounting) {
        self.instructions += o.instructions;
        self.total_cycles += o.total_cycles;
        self.walk_cycles += o.walk_cycles;
        self.stall_cycles += o.stall_cycles;
        self.data_cycles += o.data_cycles;
        self.wait_cycles += o.wait_cycles;
        self.tlb_misses += o.tlb_misses;
        self.tlb_hits += o.tlb_hits;
        self.faults += o.faults;
        self.alloc_latency_sum += o.alloc_latency_sum;
    }

    pub fn mpki(&self) -> Option<f64> {
        mpki(self.tlb_misses, self.instructions)
    }

    /// Mean cycles per completed walk.
    pub fn mean_walk(&self) -> Option<f64> {
        (self.tlb_misses > 0).then(|| self.walk_cycles as f64 / self.tlb_misses as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkPoint {
    pub window_start_cycle: u64,
    pub mean_walk_cycles: f64,
    pub tlb_miss_count: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PtRow {
    pub level: Level,
    pub node: NodeId,
    pub pages: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PtSnapshot {
    pub label: String,
    pub cycle: u64,
    pub rows: Vec<PtRow>,
    /// Free pages per node at the same moment.
    pub free_pages: Vec<(NodeId, u64)>,
}

impl PtSnapshot {
    pub fn new(label: &str, cycle: u64, d: &PtDistribution, free_pages: Vec<(NodeId, u64)>) -> Self {
        PtSnapshot {
            label: label.into(),
            cycle,
            free_pages,
            rows: d
                .rows()
                .map(|(level, node, pages, bytes)| PtRow {
                    level,
                    node,
                    pages,
                    bytes,
                })
                .collect(),
        }
    }

    pub fn pages_where(&self, mut f: impl FnMut(Level, NodeId) -> bool) -> u64 {
        self.rows.iter().filter(|r| f(r.level, r.node)).map(|r| r.pages).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessStatus {
    NotStarted,
    Running,
    Exited,
    OomKilled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessReport {
    pub name: String,
    pub pid: Option<Pid>,
    pub status: ProcessStatus,
    pub primary: bool,
    pub accounting: CycleAccounting,
    pub mpki: Option<f64>,
    pub pt_snapshots: Vec<PtSnapshot>,
}

impl ProcessReport {
    pub fn snapshot(&self, label: &str) -> Option<&PtSnapshot> {
        self.pt_snapshots.iter().find(|s| s.label == label)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Start { cycle: u64, pid: Pid, name: String },
    Exit { cycle: u64, pid: Pid, name: String },
    OomKill {
        cycle: u64,
        pid: Option<Pid>,
        name: String,
        /// Page kind whose allocation failed, e.g. `pt_l4`.
        failed: String,
        nvmm_free_pages: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub wall_cycles: u64,
    /// Cycles spent by the background migration daemon.
    pub kernel_cycles: u64,
    pub steps: u64,
    pub global: CycleAccounting,
    pub cpus: Vec<CycleAccounting>,
    pub processes: Vec<ProcessReport>,
    pub migration: MigrationStats,
    pub walk_latency: Vec<WalkPoint>,
    /// Completed walk cost -> count.
    pub walk_cost_histogram: BTreeMap<u64, u64>,
    /// Levels read by a completed walk -> count.
    pub walk_depth_histogram: BTreeMap<usize, u64>,
    pub events: Vec<Event>,
    /// Accesses whose frame held another page's contents.
    pub divergences: u64,
    /// Accesses that reached a freed frame.
    pub freed_reads: u64,
    /// Leaf table pages found on NVMM while mapping DRAM pages, counted
    /// as each process exits.
    pub residency_violations: u64,
    /// Structural audit failures, checked as each process exits.
    pub audit_failures: Vec<String>,
}

impl Report {
    pub fn primary(&self) -> Option<&ProcessReport> {
        self.processes.iter().find(|p| p.primary)
    }

    pub fn oom_killed(&self) -> bool {
        self.events.iter().any(|e| matches!(e, Event::OomKill { .. }))
    }

    pub fn primary_oom_killed(&self) -> bool {
        self.primary().is_some_and(|p| p.status == ProcessStatus::OomKilled)
    }

    pub fn max_walk_cycles(&self) -> Option<u64> {
        self.walk_cost_histogram.keys().next_back().copied()
    }

    pub fn walks(&self) -> u64 {
        self.walk_cost_histogram.values().sum()
    }

    pub fn walks_above(&self, bound: u64) -> u64 {
        self.walk_cost_histogram.range(bound + 1..).map(|(_, c)| c).sum()
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn walk_latency_csv(&self) -> String {
        let mut s = String::from("window_start_cycle,mean_walk_cycles,tlb_miss_count\n");
        for p in &self.walk_latency {
            s += &format!("{},{},{}\n", p.window_start_cycle, p.mean_walk_cycles, p.tlb_miss_count);
        }
        s
    }

    /// Final table distribution of the primary process.
    pub fn pt_distribution_csv(&self) -> String {
        let mut s = String::from("level,node,pages,bytes\n");
        if let Some(snap) = self.primary().and_then(|p| p.snapshot("final")) {
            for r in &snap.rows {
                s += &format!("{},{},{},{}\n", r.level, r.node, r.pages, r.bytes);
            }
        }
        s
    }

    pub fn migrations_csv(&self) -> String {
        let mut s = String::from("counter,value\n");
        for (k, v) in self.migration.rows() {
            s += &format!("{k},{v}\n");
        }
        s
    }

    /// Writes the report files plus `effective_config` into `dir`.
    pub fn write_to(&self, dir: &Path, effective_config: &str) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let put = |name: &str, body: &str| -> io::Result<()> {
            let mut f = fs::File::create(dir.join(name))?;
            f.write_all(body.as_bytes())
        };
        put("summary.json", &self.summary_json())?;
        put("walk_latency.csv", &self.walk_latency_csv())?;
        put("pt_distribution.csv", &self.pt_distribution_csv())?;
        put("migrations.csv", &self.migrations_csv())?;
        put("effective_config", effective_config)
    }
}
