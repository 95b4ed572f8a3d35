// SPDX-License-Identifier: Apache-2.0

use std::collections::{HashMap, HashSet};

use proptest::prelude::*;

use secscale::address_space::{MemoryLayout, PhysAddr, Region, BLOCK_SIZE, MIB, PAGE_SIZE};
use secscale::epc_manager::{EpcManager, GeometryConfig, ManagerConfig};
use secscale::epc_merkle::MerkleTreeConfig;
use secscale::mac_forest::ForestConfig;
use secscale::sim::{self, ModelKind, SimConfig, SystemConfig};
use secscale::timing::LatencyConfig;
use secscale::workload::{AccessKind, CacheConfig, TraceRecord};

fn manager(cfg: &ManagerConfig, seed: u64) -> EpcManager {
    let geometry = GeometryConfig {
        total_size: 4 * MIB,
        epc_size: 128 * 1024,
        scratch_pages: 2,
    };
    EpcManager::new(
        &geometry,
        &ForestConfig::default(),
        &MerkleTreeConfig::default(),
        cfg,
        &LatencyConfig::default(),
        seed,
    )
    .unwrap()
}

#[derive(Clone, Debug)]
struct Op {
    page: u64,
    block: usize,
    write: bool,
    byte: u8,
    gap: u64,
}

fn ops(pages: u64, max: usize) -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(
        (0..pages, 0..64usize, any::<bool>(), any::<u8>(), 1..400u64).prop_map(|(page, block, write, byte, gap)| Op {
            page,
            block,
            write,
            byte,
            gap,
        }),
        1..max,
    )
}

/// Applies `ops`, checking every read against a plain map and the ESHR
/// invariants after each step. Returns the final plaintext of every page.
fn drive(m: &mut EpcManager, ops: &[Op], pages: u64) -> Result<HashMap<u64, Vec<u8>>, TestCaseError> {
    let mut reference: HashMap<u64, Vec<u8>> = HashMap::new();
    let mut ic = 0;
    for op in ops {
        ic += op.gap;
        let vaddr = op.page * PAGE_SIZE + op.block as u64 * BLOCK_SIZE;
        let r = reference.entry(op.page).or_insert_with(|| vec![0; PAGE_SIZE as usize]);
        let span = op.block * 64..(op.block + 1) * 64;
        if op.write {
            let d = [op.byte; 64];
            m.access(1, vaddr, AccessKind::Write, ic, Some(&d)).unwrap();
            r[span].copy_from_slice(&d);
        } else {
            let got = m.access(1, vaddr, AccessKind::Read, ic, None).unwrap();
            prop_assert_eq!(&got.data.unwrap()[..], &r[span]);
        }
        let mut lpages = HashSet::new();
        for (_, e) in m.eshr_entries() {
            prop_assert!(lpages.insert(e.lpage), "two live entries load the same page");
        }
        prop_assert!(m.live_entries() <= m.config().eshr_entries);
    }
    m.finish(ic + 1).unwrap();
    let mut out = HashMap::new();
    for p in 0..pages {
        if let Some(bytes) = m.read_plain_page(1, p).unwrap() {
            out.insert(p, bytes);
        }
    }
    for (p, r) in &reference {
        prop_assert_eq!(out.get(p), Some(r));
    }
    Ok(out)
}

fn trace(ops: &[Op]) -> Vec<TraceRecord> {
    let mut ic = 0;
    ops.iter()
        .map(|o| {
            ic += o.gap;
            TraceRecord {
                icount: ic,
                enclave: 1,
                vaddr: o.page * PAGE_SIZE + o.block as u64 * BLOCK_SIZE,
                op: if o.write { AccessKind::Write } else { AccessKind::Read },
            }
        })
        .collect()
}

fn tiny_system() -> SystemConfig {
    let mut s = SystemConfig::default();
    s.geometry = GeometryConfig {
        total_size: 4 * MIB,
        epc_size: 128 * 1024,
        scratch_pages: 2,
    };
    s.cache = CacheConfig {
        l1_bytes: 1 << 10,
        l1_ways: 2,
        l2_bytes: 4 << 10,
        l2_ways: 4,
        line_bytes: BLOCK_SIZE,
    };
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn layout_regions_partition_memory(total_pages in 600u64..4000, epc_pages in 16u64..128, scratch in 0u64..8, probe in any::<u64>()) {
        let forest = ForestConfig::default();
        let g = GeometryConfig { total_size: total_pages * PAGE_SIZE, epc_size: epc_pages * PAGE_SIZE, scratch_pages: scratch };
        let Ok(l) = g.layout(&forest) else { return Ok(()); };
        let sum: u64 = Region::ALL.iter().map(|&r| l.region_pages(r)).sum();
        prop_assert_eq!(sum * PAGE_SIZE, l.total_size);
        let addr = probe % l.total_size;
        let r = l.classify(PhysAddr(addr)).unwrap();
        let (base, size) = l.region_bounds(r);
        prop_assert!(base <= addr && addr < base + size);
        prop_assert!(l.classify(PhysAddr(l.total_size)).is_err());
        prop_assert!(l.key_table_size / 16 >= l.eepc_pages());
    }

    #[test]
    fn key_table_has_one_slot_per_page(total_mib in 2u64..64) {
        let l = MemoryLayout::new(total_mib * MIB, MIB / 2, 1, 0).unwrap();
        prop_assert_eq!(l.key_table_size, l.total_pages() * 16);
    }

    #[test]
    fn overlapped_faults_match_serialized_execution(ops in ops(96, 400), seed in 0u64..1000) {
        let overlapped = drive(&mut manager(&ManagerConfig::default(), seed), &ops, 96)?;
        let serialized_cfg = ManagerConfig { eshr_entries: 1, deferred_verification: false, ..ManagerConfig::default() };
        let serialized = drive(&mut manager(&serialized_cfg, seed), &ops, 96)?;
        prop_assert_eq!(overlapped, serialized);
    }

    #[test]
    fn five_models_agree_on_memory_contents(ops in ops(80, 300), seed in 0u64..1000) {
        let t = trace(&ops);
        let mut digests = Vec::new();
        for model in ModelKind::ALL {
            let out = sim::run_detailed(&SimConfig::new(model, tiny_system(), seed), &t).unwrap();
            prop_assert!(out.report.security_event.is_none());
            digests.push(out.report.state_digest.clone().unwrap());
        }
        prop_assert!(digests.windows(2).all(|w| w[0] == w[1]), "{:?}", digests);
    }

    #[test]
    fn deferral_never_slows_a_run(ops in ops(80, 300), seed in 0u64..1000) {
        let t = trace(&ops);
        let deferred = sim::run(&SimConfig::new(ModelKind::SecScale, tiny_system(), seed), &t).unwrap();
        let mut blocking = tiny_system();
        blocking.manager.deferred_verification = false;
        let blocking = sim::run(&SimConfig::new(ModelKind::SecScale, blocking, seed), &t).unwrap();
        prop_assert!(deferred.total_cycles <= blocking.total_cycles);
        if deferred.epc_faults > 0 {
            prop_assert!(deferred.total_cycles < blocking.total_cycles);
        }
        prop_assert_eq!(deferred.state_digest, blocking.state_digest);
    }

    #[test]
    fn runs_are_deterministic_and_metrics_consistent(ops in ops(80, 200), seed in 0u64..1000, model in 0usize..5) {
        let t = trace(&ops);
        let cfg = SimConfig::new(ModelKind::ALL[model], tiny_system(), seed);
        let a = sim::run(&cfg, &t).unwrap();
        let b = sim::run(&cfg, &t).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
        prop_assert!(a.performance > 0.0);
        if a.instructions > 0 {
            let epki = a.evictions as f64 / (a.instructions as f64 / 1000.0);
            prop_assert!((a.evictions_per_kilo_instruction - epki).abs() < 1e-9);
        }
        if a.llc_requests > 0 {
            let pct = a.epc_faults as f64 * 100.0 / a.llc_requests as f64;
            prop_assert!((a.epc_miss_percent - pct).abs() < 1e-9);
        }
    }

    #[test]
    fn fault_penalty_is_monotone(ops in ops(80, 200), seed in 0u64..1000) {
        let t = trace(&ops);
        let mut last = 0;
        for penalty in [5_000u64, 10_000, 20_000, 30_000, 40_000] {
            let mut s = tiny_system();
            s.latency.sgx_fault_penalty = penalty;
            let r = sim::run(&SimConfig::new(ModelKind::SgxClient, s, seed), &t).unwrap();
            prop_assert!(r.total_cycles >= last);
            last = r.total_cycles;
        }
    }
}
