//! Engine-level properties over many seeded runs.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptplace_core::engine::{ExitCond, ProcessPlan, StartCond, ThreadPlan};
use ptplace_core::report::Event;
use ptplace_core::topology::NodeConfig;
use ptplace_core::workloads::{Op, Phase, HEAP_BASE};
use ptplace_core::{
    run_scenario, CycleAccounting, Engine, EngineConfig, EngineError, Level, NodeId, PtPolicy, Report,
    ScenarioConfig, ScenarioKind, Tier, TopologyConfig, VirtAddr, WorkloadSpec,
};

const MIB: u64 = 1 << 20;

fn topo() -> TopologyConfig {
    TopologyConfig::with_nodes(vec![
        NodeConfig::new(0, Tier::Dram, 2000, 1),
        NodeConfig::new(1, Tier::Dram, 2000, 1),
        NodeConfig::new(2, Tier::Nvmm, 8000, 0),
        NodeConfig::new(3, Tier::Nvmm, 8000, 0),
    ])
}

/// Two workers and two migrators over a few 2 MiB regions.
fn contended(seed: u64, pt: PtPolicy, pte_migration: bool, stall_fraction: f64) -> Result<Report, EngineError> {
    let mut cfg = EngineConfig::new(topo());
    cfg.policy.pt_policy = pt;
    cfg.policy.pte_migration = pte_migration;
    cfg.policy.autonuma = false;
    cfg.mmu.tlb_entries = 8;
    cfg.mmu.stall_fraction = stall_fraction;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regions = rng.random_range(1..=8u64);
    let addr = |rng: &mut ChaCha8Rng| {
        VirtAddr::new(HEAP_BASE + rng.random_range(0..regions) * 2 * MIB + rng.random_range(0..4u64) * 4096).unwrap()
    };
    let threads = (0..2)
        .map(|cpu| {
            let ops: Vec<Op> = (0..20)
                .flat_map(|_| {
                    [
                        Op::Access {
                            va: addr(&mut rng),
                            write: rng.random_bool(0.5),
                            phase: Phase::Access,
                        },
                        Op::Compute(rng.random_range(0..5)),
                    ]
                })
                .collect();
            ThreadPlan::new(cpu, ops.into_iter())
        })
        .collect();
    let migrators = (0..2)
        .map(|_| (0..10).map(|_| (addr(&mut rng), NodeId(rng.random_range(0..4)))).collect())
        .collect();
    let mut engine = Engine::new(cfg, seed)?;
    engine.add_process(ProcessPlan {
        name: "mix".into(),
        home: NodeId(0),
        threads,
        migrators,
        start: StartCond::Immediately,
        exit: ExitCond::WhenDone,
        primary: true,
        access_ops_total: 40,
    })?;
    engine.run()
}

#[test]
fn no_lost_wakeups() {
    let mut blocked_waits = 0;
    for seed in 0..10_000 {
        match contended(seed, PtPolicy::BindHigh, true, 1.0) {
            Ok(r) => blocked_waits += r.global.wait_cycles.min(1),
            Err(e) => panic!("seed {seed}: {e}"),
        }
    }
    assert!(blocked_waits > 0, "no schedule ever waited on a lock");
}

fn summed(cpus: &[CycleAccounting]) -> CycleAccounting {
    let mut s = CycleAccounting::default();
    for c in cpus {
        s.add(c);
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn accounting_and_consistency(
        seed in any::<u64>(),
        bind_high in any::<bool>(),
        pte_migration in any::<bool>(),
        sf in prop_oneof![Just(1.0), Just(0.5), Just(0.0)],
    ) {
        let pt = if bind_high { PtPolicy::BindHigh } else { PtPolicy::FollowData };
        let r = contended(seed, pt, pte_migration, sf).unwrap();
        prop_assert_eq!(&r.global, &summed(&r.cpus));
        for c in &r.cpus {
            prop_assert_eq!(c.total_cycles, c.instructions + c.stall_cycles);
            prop_assert!(c.stall_cycles as f64 >= c.walk_cycles as f64 * sf);
        }
        prop_assert_eq!(r.divergences, 0);
        prop_assert_eq!(r.freed_reads, 0);
        prop_assert!(r.audit_failures.is_empty(), "{:?}", r.audit_failures);
        let m = &r.migration;
        if pte_migration {
            prop_assert_eq!(m.data_migrations, m.l4_total());
        } else {
            prop_assert_eq!(m.l4_total(), 0);
        }
        if bind_high {
            for s in &r.primary().unwrap().pt_snapshots {
                prop_assert_eq!(s.pages_where(|l, n| l.is_high() && n.0 >= 2), 0);
            }
        }
    }

    #[test]
    fn same_seed_same_report(seed in any::<u64>()) {
        let a = contended(seed, PtPolicy::BindHigh, true, 1.0).unwrap();
        let b = contended(seed, PtPolicy::BindHigh, true, 1.0).unwrap();
        prop_assert_eq!(a.summary_json(), b.summary_json());
    }
}

fn dram_fill(pt: PtPolicy, reclaim: bool, seed: u64) -> Report {
    let mut cfg = EngineConfig::new(TopologyConfig::two_socket(16, 64, 1));
    cfg.policy.pt_policy = pt;
    cfg.policy.reclaim = reclaim;
    let spec = WorkloadSpec::new(48 * MIB, 5_000);
    let mut sc = ScenarioConfig::new(ScenarioKind::MultiTenant, spec);
    sc.apply(&mut cfg);
    run_scenario(&cfg, &sc, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn oom_only_under_dram_binding(seed in any::<u64>()) {
        prop_assert!(!dram_fill(PtPolicy::FollowData, true, seed).oom_killed());
        prop_assert!(!dram_fill(PtPolicy::BindHigh, true, seed).oom_killed());
        let ba = dram_fill(PtPolicy::BindAll, true, seed);
        prop_assert!(ba.oom_killed());
        let no_reclaim = dram_fill(PtPolicy::BindHigh, false, seed);
        for e in &no_reclaim.events {
            if let Event::OomKill { failed, .. } = e {
                prop_assert_ne!(failed.as_str(), "pt_l4");
            }
        }
    }
}

#[test]
fn multi_tenant_processes_are_isolated() {
    let r = dram_fill(PtPolicy::BindHigh, true, 4);
    assert_eq!(r.processes.len(), 2);
    let pids: Vec<_> = r.processes.iter().map(|p| p.pid.unwrap()).collect();
    assert_ne!(pids[0], pids[1]);
    assert_eq!(r.processes.iter().filter(|p| p.primary).count(), 1);
    // every process keeps its own table
    for p in &r.processes {
        let s = p.snapshot("final").unwrap();
        assert_eq!(s.pages_where(|l, _| l == Level::L1), 1);
    }
}
