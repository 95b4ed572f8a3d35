// SPDX-License-Identifier: Apache-2.0

//! Attacker with full control of off-chip memory.
//!
//! Attacks are applied between accesses, when the manager is quiescent.
//! Every mutation goes straight to emulated DRAM; on-chip state (root
//! counters, caches, keys) is out of reach by construction.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::address_space::{EmulatedDram, PhysAddr, BLOCKS_PER_PAGE, BLOCK_SIZE, KEY_SLOT_BYTES, MIB, PAGE_SIZE};
use crate::crypto::{Block, MAC_BYTES};
use crate::epc_manager::{EpcManager, GeometryConfig, ManagerConfig};
use crate::epc_merkle::{MerkleTreeConfig, NODE_BYTES};
use crate::error::{Error, Result, SecurityViolation};
use crate::mac_forest::ForestConfig;
use crate::timing::LatencyConfig;
use crate::workload::AccessKind;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    TamperData,
    TamperLeafMac,
    TamperForestNode,
    TamperKeySlot,
    ReplayDataMacPair,
    ReplayKeyMacPair,
    SpliceRelocate,
    CrossEnclaveRead,
    CrossEnclaveWrite,
    ReplayEpcCounter,
}

impl AttackKind {
    pub const ALL: [AttackKind; 10] = [
        AttackKind::TamperData,
        AttackKind::TamperLeafMac,
        AttackKind::TamperForestNode,
        AttackKind::TamperKeySlot,
        AttackKind::ReplayDataMacPair,
        AttackKind::ReplayKeyMacPair,
        AttackKind::SpliceRelocate,
        AttackKind::CrossEnclaveRead,
        AttackKind::CrossEnclaveWrite,
        AttackKind::ReplayEpcCounter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::TamperData => "tamper-data",
            AttackKind::TamperLeafMac => "tamper-leaf-mac",
            AttackKind::TamperForestNode => "tamper-forest-node",
            AttackKind::TamperKeySlot => "tamper-key-slot",
            AttackKind::ReplayDataMacPair => "replay-data-mac-pair",
            AttackKind::ReplayKeyMacPair => "replay-key-mac-pair",
            AttackKind::SpliceRelocate => "splice-relocate",
            AttackKind::CrossEnclaveRead => "cross-enclave-read",
            AttackKind::CrossEnclaveWrite => "cross-enclave-write",
            AttackKind::ReplayEpcCounter => "replay-epc-counter",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attack kind `{s}`")))
    }
}

/// Byte-exact copy of a DRAM range, held by the attacker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub addr: PhysAddr,
    pub bytes: Vec<u8>,
}

pub fn snapshot(dram: &EmulatedDram, addr: PhysAddr, len: usize) -> Result<Snapshot> {
    Ok(Snapshot {
        addr,
        bytes: dram.peek(addr, len)?,
    })
}

pub fn restore(dram: &mut EmulatedDram, snap: &Snapshot) -> Result<()> {
    dram.poke(snap.addr, &snap.bytes)
}

fn flip_bit(dram: &mut EmulatedDram, addr: PhysAddr, len: usize, rng: &mut impl Rng) -> Result<(PhysAddr, usize)> {
    let off = rng.gen_range(0..len as u64);
    let a = addr.offset(off);
    let mut b = dram.peek(a, 1)?;
    b[0] ^= 1 << rng.gen_range(0..8);
    dram.poke(a, &b)?;
    Ok((a, 1))
}

/// What an injection changed and which access should trip over it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationRecord {
    pub kind: AttackKind,
    /// Enclave and virtual page whose access should expose the attack.
    pub enclave: u32,
    pub vpage: u64,
    pub block: usize,
    pub write: bool,
    /// (address, length) of every mutated range.
    pub touched: Vec<(u64, usize)>,
}

/// Mapped pages of `enclave` currently sealed in the eEPC under a real key.
pub fn sealed_pages(m: &EpcManager, enclave: u32) -> Vec<u64> {
    m.mapped_pages()
        .into_iter()
        .filter(|&(e, _)| e == enclave)
        .filter_map(|(_, v)| {
            let home = m.home_of(enclave, v)?;
            if m.slot_of_home(home).is_some() {
                return None;
            }
            let w = m.dram().peek(m.key_slot_addr(home), KEY_SLOT_BYTES as usize).ok()?;
            w.iter().any(|&x| x != 0).then_some(v)
        })
        .collect()
}

pub fn resident_pages(m: &EpcManager, enclave: u32) -> Vec<u64> {
    m.mapped_pages()
        .into_iter()
        .filter(|&(e, v)| e == enclave && m.home_of(e, v).and_then(|h| m.slot_of_home(h)).is_some())
        .map(|(_, v)| v)
        .collect()
}

fn page_ranges(m: &EpcManager, home: u64) -> [(PhysAddr, usize); 3] {
    let index = home;
    [
        (m.home_page(home).base(), PAGE_SIZE as usize),
        (m.key_slot_addr(home), KEY_SLOT_BYTES as usize),
        (m.forest().entry_addr(0, index), MAC_BYTES),
    ]
}

fn fresh_block(rng: &mut impl Rng) -> Block {
    let mut b = [0u8; BLOCK_SIZE as usize];
    rng.fill(&mut b[..]);
    b
}

/// Moves the page's sealed state forward: load, modify, seal again.
fn advance_sealed(m: &mut EpcManager, enclave: u32, vpage: u64, rng: &mut impl Rng) -> Result<()> {
    let ic = m.icount() + 1;
    let b = rng.gen_range(0..BLOCKS_PER_PAGE) as u64;
    m.access(enclave, vpage * PAGE_SIZE + b * BLOCK_SIZE, AccessKind::Write, ic, Some(&fresh_block(rng)))?;
    m.syscall_barrier()?;
    m.evict_page(enclave, vpage)?;
    m.syscall_barrier()?;
    Ok(())
}

/// Applies one attack of `kind` to a random eligible target. Quiesces the
/// manager first; replay kinds also drive the benign state change that
/// makes the captured copy stale.
pub fn inject(m: &mut EpcManager, kind: AttackKind, enclave: u32, rng: &mut impl Rng) -> Result<MutationRecord> {
    m.syscall_barrier()?;
    let sealed = sealed_pages(m, enclave);
    let resident = resident_pages(m, enclave);
    let pick = |v: &[u64], rng: &mut ChaCha20Rng| -> Result<u64> {
        v.choose(rng)
            .copied()
            .ok_or_else(|| Error::Config(format!("no eligible target for {kind}")))
    };
    let mut local = ChaCha20Rng::seed_from_u64(rng.gen());
    let rng = &mut local;
    let block = rng.gen_range(0..BLOCKS_PER_PAGE);
    let mut touched = Vec::new();
    let mut write = false;
    let mut victim_enclave = enclave;
    let vpage;
    match kind {
        AttackKind::TamperData | AttackKind::TamperKeySlot | AttackKind::TamperLeafMac | AttackKind::TamperForestNode => {
            vpage = pick(&sealed, rng)?;
            let home = m.home_of(enclave, vpage).unwrap();
            let [data, key, leaf] = page_ranges(m, home);
            let (addr, len) = match kind {
                AttackKind::TamperData => data,
                AttackKind::TamperKeySlot => key,
                AttackKind::TamperLeafMac => leaf,
                _ => {
                    let arity = m.forest().config().arities[0] as u64;
                    (m.forest().entry_addr(1, home / arity), MAC_BYTES)
                }
            };
            touched.push(flip_bit(m.dram_mut(), addr, len, rng)?);
        }
        AttackKind::ReplayDataMacPair | AttackKind::ReplayKeyMacPair => {
            vpage = pick(&sealed, rng)?;
            let home = m.home_of(enclave, vpage).unwrap();
            let [data, key, leaf] = page_ranges(m, home);
            let first = if kind == AttackKind::ReplayDataMacPair { data } else { key };
            let snaps = [snapshot(m.dram(), first.0, first.1)?, snapshot(m.dram(), leaf.0, leaf.1)?];
            advance_sealed(m, enclave, vpage, rng)?;
            for s in &snaps {
                restore(m.dram_mut(), s)?;
                touched.push((s.addr, s.bytes.len()));
            }
        }
        AttackKind::SpliceRelocate => {
            if sealed.len() < 2 {
                return Err(Error::Config(format!("no eligible target for {kind}")));
            }
            let two: Vec<u64> = sealed.choose_multiple(rng, 2).copied().collect();
            vpage = two[0];
            let (dst, src) = (m.home_of(enclave, two[0]).unwrap(), m.home_of(enclave, two[1]).unwrap());
            for (d, s) in page_ranges(m, dst).into_iter().zip(page_ranges(m, src)) {
                let snap = snapshot(m.dram(), s.0, s.1)?;
                m.dram_mut().poke(d.0, &snap.bytes)?;
                touched.push((d.0, d.1));
            }
        }
        AttackKind::CrossEnclaveRead | AttackKind::CrossEnclaveWrite => {
            let mut all = sealed.clone();
            all.extend(&resident);
            let target = pick(&all, rng)?;
            let home = m.home_of(enclave, target).unwrap();
            victim_enclave = enclave.wrapping_add(1).max(1);
            vpage = target;
            let phys = m.home_page(home);
            m.remap(victim_enclave, vpage, phys);
            write = kind == AttackKind::CrossEnclaveWrite;
        }
        AttackKind::ReplayEpcCounter => {
            vpage = pick(&resident, rng)?;
            let home = m.home_of(enclave, vpage).unwrap();
            let slot = m.slot_of_home(home).unwrap() as u64;
            let epc = m.epc();
            let ranges = [
                (epc.tree().node_addr(0, slot), NODE_BYTES as usize),
                (epc.block_addr(slot, block), BLOCK_SIZE as usize),
                (epc.data_mac_addr(slot, block), MAC_BYTES),
            ];
            let snaps = ranges
                .iter()
                .map(|&(a, l)| snapshot(m.dram(), a, l))
                .collect::<Result<Vec<_>>>()?;
            let ic = m.icount() + 1;
            let vaddr = vpage * PAGE_SIZE + block as u64 * BLOCK_SIZE;
            m.access(enclave, vaddr, AccessKind::Write, ic, Some(&fresh_block(rng)))?;
            for s in &snaps {
                restore(m.dram_mut(), s)?;
                touched.push((s.addr, s.bytes.len()));
            }
        }
    }
    Ok(MutationRecord {
        kind,
        enclave: victim_enclave,
        vpage,
        block,
        write,
        touched: touched.into_iter().map(|(a, l)| (a.0, l)).collect(),
    })
}

/// Performs the access that consumes the attacked state, then a barrier.
pub fn trigger(m: &mut EpcManager, rec: &MutationRecord, rng: &mut impl Rng) -> Result<()> {
    let ic = m.icount() + 1;
    let vaddr = rec.vpage * PAGE_SIZE + rec.block as u64 * BLOCK_SIZE;
    if rec.write {
        m.access(rec.enclave, vaddr, AccessKind::Write, ic, Some(&fresh_block(rng)))?;
    } else {
        m.access(rec.enclave, vaddr, AccessKind::Read, ic, None)?;
    }
    m.syscall_barrier()?;
    Ok(())
}

/// Small system used for attack trials: 64-page EPC, 8 MiB of memory.
pub fn trial_manager(seed: u64) -> Result<EpcManager> {
    let geometry = GeometryConfig {
        total_size: 8 * MIB,
        epc_size: 256 * 1024,
        scratch_pages: 4,
    };
    EpcManager::new(
        &geometry,
        &ForestConfig::default(),
        &MerkleTreeConfig::default(),
        &ManagerConfig::default(),
        &LatencyConfig::default(),
        seed,
    )
}

/// Random reads and writes by `enclave` over `pages` pages.
pub fn benign_traffic(m: &mut EpcManager, enclave: u32, pages: u64, accesses: usize, rng: &mut impl Rng) -> Result<()> {
    for _ in 0..accesses {
        let ic = m.icount() + rng.gen_range(1..400);
        let vaddr = rng.gen_range(0..pages) * PAGE_SIZE + rng.gen_range(0..BLOCKS_PER_PAGE as u64) * BLOCK_SIZE;
        if rng.gen_bool(0.4) {
            m.access(enclave, vaddr, AccessKind::Write, ic, Some(&fresh_block(rng)))?;
        } else {
            m.access(enclave, vaddr, AccessKind::Read, ic, None)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub kind: AttackKind,
    pub seed: u64,
    pub record: MutationRecord,
    /// The violation raised by the trigger access or its barrier.
    pub violation: Option<SecurityViolation>,
}

impl TrialOutcome {
    pub fn detected(&self) -> bool {
        self.violation.is_some()
    }
}

/// One attack trial: benign background, injection, trigger. Errors other
/// than the detection itself (including violations before the attack)
/// are returned as errors.
pub fn attack_trial(kind: AttackKind, seed: u64, background: usize) -> Result<TrialOutcome> {
    let mut m = trial_manager(seed)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ kind as u64);
    let pages = m.slot_count() as u64 * 2;
    benign_traffic(&mut m, 1, pages, background, &mut rng)?;
    let record = inject(&mut m, kind, 1, &mut rng)?;
    let violation = match trigger(&mut m, &record, &mut rng) {
        Ok(()) => None,
        Err(Error::CatastrophicFailure(v)) => Some(v),
        Err(e) => return Err(e),
    };
    Ok(TrialOutcome {
        kind,
        seed,
        record,
        violation,
    })
}
