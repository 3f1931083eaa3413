//! Run configuration file.
//!
//! ```toml
//! seed = 7
//! output_dir = "out"
//!
//! [topology]
//! nodes = [
//!   { id = 0, tier = "dram", capacity_mib = 256, cpus = 2 },
//!   { id = 1, tier = "nvmm", capacity_mib = 1024 },
//! ]
//!
//! [policy]
//! pt_policy = "bind_high"
//! pte_migration = true
//!
//! [scenario]
//! kind = "multi_tenant"
//! workload = { footprint_bytes = 536870912, op_count = 1000000 }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{EngineConfig, EngineParams, PolicyConfig};
use crate::migration::HotnessConfig;
use crate::mmu::MmuConfig;
use crate::topology::{NodeConfig, Tier, TopologyConfig};
use crate::workloads::{ScenarioConfig, ScenarioKind, WorkloadSpec};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub topology: TopologyConfig,
    #[serde(default)]
    pub mmu: MmuConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub hotness: HotnessConfig,
    #[serde(default)]
    pub engine: EngineParams,
    pub scenario: ScenarioConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let c: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        crate::topology::Topology::build(&self.topology).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.engine_config().validate().map_err(ConfigError::Invalid)?;
        self.scenario.validate().map_err(ConfigError::Invalid)
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            topology: self.topology.clone(),
            mmu: self.mmu.clone(),
            policy: self.policy.clone(),
            hotness: self.hotness.clone(),
            params: self.engine.clone(),
        }
    }

    /// The config with scenario-imposed settings applied. Running the
    /// result reproduces the original run.
    pub fn effective(&self) -> RunConfig {
        let mut c = self.clone();
        let mut engine = c.engine_config();
        c.scenario.apply(&mut engine);
        c.policy = engine.policy;
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The default desk-scale machine: two sockets of 256 MiB DRAM and
    /// 1 GiB NVMM each, two CPUs per socket.
    pub fn desk(kind: ScenarioKind) -> RunConfig {
        RunConfig {
            seed: 1,
            output_dir: None,
            topology: TopologyConfig::two_socket(256, 1024, 2),
            mmu: MmuConfig::default(),
            policy: PolicyConfig::default(),
            hotness: HotnessConfig::default(),
            engine: EngineParams::default(),
            scenario: ScenarioConfig::new(kind, WorkloadSpec {
                compute_gap: 20,
                ..WorkloadSpec::new(1 << 30, 2_000_000)
            }),
        }
    }
}

/// Node summary used by `validate` output.
pub fn describe(topology: &TopologyConfig) -> Vec<String> {
    topology
        .nodes
        .iter()
        .map(|n: &NodeConfig| {
            let cap = match (n.capacity_mib, n.capacity_pages) {
                (Some(m), _) => format!("{m} MiB"),
                (None, Some(p)) => format!("{p} pages"),
                (None, None) => "?".into(),
            };
            let tier = match n.tier {
                Tier::Dram => "dram",
                Tier::Nvmm => "nvmm",
            };
            format!("node {} {tier} {cap} cpus={}", n.id, n.cpus)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{DataPolicy, PtPolicy};

    const GOOD: &str = r#"
seed = 7

[topology]
nodes = [
  { id = 0, tier = "dram", capacity_mib = 64, cpus = 2 },
  { id = 1, tier = "nvmm", capacity_mib = 256 },
]

[policy]
pt_policy = "bind_high"
pte_migration = true

[scenario]
kind = "interleaved"
workload = { footprint_bytes = 1048576, op_count = 100 }
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let c = RunConfig::parse(GOOD).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.policy.pt_policy, PtPolicy::BindHigh);
        assert!(c.policy.autonuma);
        assert_eq!(c.mmu.tlb_entries, 1536);
        assert_eq!(c.hotness.hot_threshold, 4);
        assert_eq!(c.scenario.filler_dwell, 0.25);
        assert_eq!(c.scenario.workload.theta, 0.99);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = GOOD.replace("pte_migration = true", "pte_migration = true\nturbo = 1");
        assert!(matches!(RunConfig::parse(&bad), Err(ConfigError::Parse(_))));
        let bad = GOOD.replace("kind = \"interleaved\"", "kind = \"sideways\"");
        assert!(RunConfig::parse(&bad).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = GOOD.replace("capacity_mib = 64, cpus = 2", "capacity_mib = 0, cpus = 2");
        assert!(matches!(RunConfig::parse(&bad), Err(ConfigError::Invalid(_))));
        let bad = GOOD.replace("op_count = 100", "op_count = 100, theta = 1.5");
        assert!(matches!(RunConfig::parse(&bad), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn effective_applies_scenario_and_round_trips() {
        let c = RunConfig::parse(GOOD).unwrap();
        let e = c.effective();
        assert_eq!(e.policy.data_policy, DataPolicy::Interleave);
        assert!(!e.policy.autonuma);
        let back = RunConfig::parse(&e.to_toml()).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.effective(), e);
    }

    #[test]
    fn desk_defaults_are_valid() {
        for k in [
            ScenarioKind::FullSystem,
            ScenarioKind::MultiTenant,
            ScenarioKind::Interleaved,
            ScenarioKind::Startup,
            ScenarioKind::Thp,
        ] {
            let c = RunConfig::desk(k);
            c.validate().unwrap();
            RunConfig::parse(&c.to_toml()).unwrap();
        }
    }
}
