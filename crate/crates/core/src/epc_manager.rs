// SPDX-License-Identifier: Apache-2.0

//! The EPC as a page cache over the eEPC, with overlapped fault handling.
//!
//! A read miss fetches only the requested block and the page's key slot,
//! decrypts the block and lets execution resume. The rest of the page
//! transfer (evicting the victim block by block, loading the new page block
//! by block) is tracked in an ESHR entry and replayed on the background
//! lane. When a page is fully loaded its verification job goes to the MVC;
//! the victim gets a fresh key, its wrapped key is stored and its forest
//! path is updated. Write misses run off the critical path, or wait in a
//! queue while other faults are in flight. Barriers (system calls and
//! scratch writes) wait for every outstanding verification.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::address_space::{
    EmulatedDram, MemoryLayout, PageId, PhysAddr, Region, BLOCKS_PER_PAGE, BLOCK_SIZE, KEY_SLOT_BYTES, MIB, PAGE_SHIFT,
    PAGE_SIZE,
};
use crate::crypto::{
    compose_page_key, derive_block_key, ecb_decrypt_block, ecb_encrypt_block, page_mac, unwrap_key, wrap_key, Block,
    KeyPrng, KeySource, Mac, PageKey, TcbSecrets,
};
use crate::epc_merkle::{EpcLayout, EpcStore, MerkleTreeConfig};
use crate::error::{Error, Result, SecurityViolation, ViolationKind};
use crate::mac_forest::{forest_lower_bytes, ForestConfig, MacForest};
use crate::mvc::{Mvc, VerificationJob, VerifyCtx};
use crate::timing::{AccessCause, LatencyConfig, Meter, Timeline};
use crate::workload::{AccessKind, SCRATCH_VADDR_BIT};

const ALL_LOADED: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub total_size: u64,
    pub epc_size: u64,
    pub scratch_pages: u64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            total_size: 66 * MIB,
            epc_size: MIB,
            scratch_pages: 64,
        }
    }
}

impl GeometryConfig {
    /// Physical layout with forest storage sized over every page.
    pub fn layout(&self, forest: &ForestConfig) -> Result<MemoryLayout> {
        forest.validate()?;
        let lower = forest_lower_bytes(self.total_size / PAGE_SIZE, forest);
        MemoryLayout::new(self.total_size, self.epc_size, self.scratch_pages, lower)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManagerConfig {
    pub eshr_entries: usize,
    /// Verify loaded pages in the background; `false` verifies before
    /// resuming and charges the whole fault to the critical path.
    pub deferred_verification: bool,
    pub grouped_verification: bool,
    /// Cap on queued verification jobs; `None` is unbounded.
    pub max_outstanding_jobs: Option<usize>,
    pub key_source: KeySource,
    pub scratch_write_barrier: bool,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        Self {
            eshr_entries: 32,
            deferred_verification: true,
            grouped_verification: true,
            max_outstanding_jobs: None,
            key_source: KeySource::Prng,
            scratch_write_barrier: true,
        }
    }
}

impl ManagerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eshr_entries == 0 {
            return Err(Error::Config("manager.eshr_entries must be positive".into()));
        }
        if self.max_outstanding_jobs == Some(0) {
            return Err(Error::Config("manager.max_outstanding_jobs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SlotState {
    /// Never used (`dirty = false`) or emptied by an explicit eviction.
    Free { dirty: bool },
    Resident { home: u64, owner: u32 },
    Loading { home: u64, owner: u32, entry: usize },
}

#[derive(Copy, Clone, Debug)]
struct Slot {
    state: SlotState,
    lru: u64,
}

#[derive(Clone, Debug)]
struct Victim {
    home: u64,
    new_key: PageKey,
    cipher: Vec<u8>,
}

/// One in-flight page swap.
#[derive(Clone, Debug)]
pub struct EshrEntry {
    /// eEPC index of the page being evicted.
    pub epage: Option<u64>,
    /// eEPC index of the page being loaded.
    pub lpage: u64,
    pub ls_vector: u64,
    pub e_bit: bool,
    pub v_bit: bool,
    pub slot: usize,
    owner: u32,
    key: PageKey,
    victim: Option<Victim>,
    cipher: Vec<u8>,
    buffered: Option<(usize, Block)>,
    ready_at: u64,
    seq: u64,
}

#[derive(Clone, Debug)]
struct QueuedWrite {
    enclave: u32,
    vaddr: u64,
    data: Block,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AccessOutcome {
    EpcHit,
    FaultStarted(usize),
    QueuedWrite,
    ScratchAccess,
    /// A read served from a queued write to the same line.
    Forwarded,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessResult {
    pub outcome: AccessOutcome,
    pub data: Option<Block>,
    pub critical_cycles: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct StepRecord {
    pub entry: usize,
    pub block: usize,
    pub completed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerStats {
    pub accesses: u64,
    pub hits: u64,
    pub loading_hits: u64,
    pub first_touch_allocations: u64,
    pub faults: u64,
    pub read_faults: u64,
    pub write_faults: u64,
    pub evictions: u64,
    pub demand_steps: u64,
    pub background_steps: u64,
    pub queued_writes: u64,
    pub forwarded_reads: u64,
    pub reads_ahead_of_writes: u64,
    pub eshr_full_stalls: u64,
    pub epage_waits: u64,
    pub stall_cycles: u64,
    pub barriers: u64,
    pub barrier_stall_cycles: u64,
    pub scratch_reads: u64,
    pub scratch_writes: u64,
    pub explicit_evictions: u64,
    pub club_flushes: u64,
    pub blocking_verifications: u64,
    /// Histogram: DRAM reads on a read miss's critical fetch -> count.
    pub critical_fetch_reads: BTreeMap<u64, u64>,
}

/// The SecScale memory system for one simulated boot.
pub struct EpcManager {
    cfg: ManagerConfig,
    latency: LatencyConfig,
    layout: MemoryLayout,
    dram: EmulatedDram,
    secrets: TcbSecrets,
    prng: KeyPrng,
    epc: EpcStore,
    forest: MacForest,
    mvc: Mvc,
    slots: Vec<Slot>,
    slot_of: HashMap<u64, usize>,
    page_table: HashMap<(u32, u64), PageId>,
    next_home: u64,
    eshr: Vec<Option<EshrEntry>>,
    demand: Option<usize>,
    entry_seq: u64,
    evict_register: Option<usize>,
    pending_club: Option<(u64, Mac)>,
    pending_writes: VecDeque<QueuedWrite>,
    timeline: Timeline,
    meter: Meter,
    icount: u64,
    lru_clock: u64,
    stats: ManagerStats,
}

impl EpcManager {
    pub fn new(
        geometry: &GeometryConfig,
        forest_cfg: &ForestConfig,
        merkle_cfg: &MerkleTreeConfig,
        cfg: &ManagerConfig,
        latency: &LatencyConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        latency.validate()?;
        let layout = geometry.layout(forest_cfg)?;
        let mut dram = EmulatedDram::new(layout.clone());
        let secrets = TcbSecrets::derive(seed);
        let regions = layout.eepc_pages().div_ceil(forest_cfg.region_pages());
        let top_pages = (regions * 8).div_ceil(PAGE_SIZE);
        let el = EpcLayout::compute(layout.epc_base, layout.epc_pages(), top_pages, merkle_cfg)?;
        let epc = EpcStore::new(&mut dram, el, merkle_cfg, &secrets)?;
        let forest = MacForest::new(
            forest_cfg,
            secrets.ssk,
            PhysAddr(layout.forest_base),
            layout.forest_size,
            layout.first_eepc_page().0,
            layout.eepc_pages(),
        )?;
        let slots = vec![
            Slot {
                state: SlotState::Free { dirty: false },
                lru: 0,
            };
            epc.layout().data_slots as usize
        ];
        Ok(Self {
            prng: KeyPrng::new(secrets.ssk.boot_time, secrets.hw_key, cfg.key_source),
            mvc: Mvc::new(cfg.grouped_verification, cfg.max_outstanding_jobs),
            eshr: vec![None; cfg.eshr_entries],
            cfg: cfg.clone(),
            latency: latency.clone(),
            layout,
            dram,
            secrets,
            epc,
            forest,
            slots,
            slot_of: HashMap::new(),
            page_table: HashMap::new(),
            next_home: 0,
            demand: None,
            entry_seq: 0,
            evict_register: None,
            pending_club: None,
            pending_writes: VecDeque::new(),
            timeline: Timeline::new(),
            meter: Meter::default(),
            icount: 0,
            lru_clock: 0,
            stats: ManagerStats::default(),
        })
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &MemoryLayout {
        &self.layout
    }

    pub fn dram(&self) -> &EmulatedDram {
        &self.dram
    }

    /// Direct DRAM access for the adversary; bypasses every check.
    pub fn dram_mut(&mut self) -> &mut EmulatedDram {
        &mut self.dram
    }

    pub fn epc(&self) -> &EpcStore {
        &self.epc
    }

    pub fn epc_mut(&mut self) -> &mut EpcStore {
        &mut self.epc
    }

    /// DRAM and EPC store together, for callers that read the EPC-resident
    /// forest top level.
    pub fn parts_mut(&mut self) -> (&mut EmulatedDram, &mut EpcStore) {
        (&mut self.dram, &mut self.epc)
    }

    pub fn forest(&self) -> &MacForest {
        &self.forest
    }

    pub fn mvc(&self) -> &Mvc {
        &self.mvc
    }

    pub fn timeline(&self) -> &Timeline {
        &self.timeline
    }

    pub fn meter(&self) -> &Meter {
        &self.meter
    }

    /// Instruction count of the last access.
    pub fn icount(&self) -> u64 {
        self.icount
    }

    pub fn stats(&self) -> &ManagerStats {
        &self.stats
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_state(&self, slot: usize) -> SlotState {
        self.slots[slot].state
    }

    pub fn eshr_entries(&self) -> impl Iterator<Item = (usize, &EshrEntry)> {
        self.eshr.iter().enumerate().filter_map(|(i, e)| e.as_ref().map(|e| (i, e)))
    }

    pub fn live_entries(&self) -> usize {
        self.eshr.iter().filter(|e| e.is_some()).count()
    }

    pub fn queued_write_count(&self) -> usize {
        self.pending_writes.len()
    }

    pub fn home_of(&self, enclave: u32, vpage: u64) -> Option<u64> {
        self.page_table
            .get(&(enclave, vpage))
            .and_then(|p| self.layout.eepc_index(*p).ok())
    }

    pub fn home_page(&self, home: u64) -> PageId {
        self.layout.eepc_page(home)
    }

    pub fn key_slot_addr(&self, home: u64) -> PhysAddr {
        self.layout.key_table_slot(self.home_page(home)).expect("home in eEPC")
    }

    pub fn slot_of_home(&self, home: u64) -> Option<usize> {
        self.slot_of.get(&home).copied()
    }

    /// OS-controlled page-table update. The hardware does not trust it.
    pub fn remap(&mut self, enclave: u32, vpage: u64, target: PageId) {
        self.page_table.insert((enclave, vpage), target);
    }

    pub fn mapped_pages(&self) -> Vec<(u32, u64)> {
        let mut v: Vec<_> = self.page_table.keys().copied().collect();
        v.sort();
        v
    }

    pub fn evict_register(&self) -> Option<usize> {
        self.evict_register
    }

    /// On-demand LRU: oldest resident slot, lowest index on ties.
    pub fn lru_victim(&self) -> Option<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s.state, SlotState::Resident { .. }))
            .min_by_key(|(i, s)| (s.lru, *i))
            .map(|(i, _)| i)
    }

    pub fn evict_select(&mut self) -> Option<usize> {
        match self.evict_register.take() {
            Some(s) => Some(s),
            None => self.lru_victim(),
        }
    }

    fn refresh_evict_register(&mut self) {
        self.evict_register = self.lru_victim();
    }

    fn touch(&mut self, slot: usize) {
        self.lru_clock += 1;
        self.slots[slot].lru = self.lru_clock;
        if self.evict_register == Some(slot) {
            self.evict_register = None;
        }
    }

    fn bg_cost(&self, m: &Meter) -> u64 {
        m.total_accesses() * self.latency.dram_burst_cycles
            + (m.ctr_ops + m.ecb_ops) * self.latency.crypto_stream_cycles
            + self.latency.mac_cycles(m.mac_bytes)
    }

    fn advance_instructions(&mut self, icount: u64) {
        if icount > self.icount {
            self.timeline.instructions(&self.latency, icount - self.icount);
            self.icount = icount;
        }
    }

    fn violation(&self, kind: ViolationKind, page: u64) -> Error {
        let mut v = SecurityViolation::new(kind, Some(page));
        v.speculative_instructions = 0;
        v.into()
    }

    /// Resolves an enclave page to its eEPC home, refusing mappings that
    /// leave secure memory.
    fn resolve(&mut self, enclave: u32, vpage: u64) -> Result<(u64, bool)> {
        if let Some(&p) = self.page_table.get(&(enclave, vpage)) {
            return match self.layout.classify(p.base())? {
                Region::Eepc => Ok((self.layout.eepc_index(p)?, false)),
                _ => Err(self.violation(ViolationKind::InsecureMapping, p.0)),
            };
        }
        if self.next_home >= self.layout.eepc_pages() {
            return Err(Error::OutOfMemory);
        }
        let home = self.next_home;
        self.next_home += 1;
        self.page_table.insert((enclave, vpage), self.home_page(home));
        Ok((home, true))
    }

    fn read_key(&mut self, home: u64, enclave: u32) -> Result<PageKey> {
        let mut w = [0u8; KEY_SLOT_BYTES as usize];
        let addr = self.key_slot_addr(home);
        self.dram.read(addr, &mut w)?;
        self.meter.read(AccessCause::KeyTable);
        if w == [0u8; KEY_SLOT_BYTES as usize] {
            return Ok(PageKey::NULL);
        }
        self.meter.ecb_ops += 1;
        let random = unwrap_key(&self.secrets.ssk, &w);
        compose_page_key(self.secrets.hw_key, enclave, random, self.home_page(home).0)
    }

    fn decrypt_home_block(key: &PageKey, block: usize, ct: &Block, meter: &mut Meter) -> Result<Block> {
        if *key == PageKey::NULL {
            return Ok([0; BLOCK_SIZE as usize]);
        }
        meter.ecb_ops += 1;
        Ok(ecb_decrypt_block(&derive_block_key(key, block)?, ct))
    }

    fn with_ctx<T>(&mut self, f: impl FnOnce(&mut Mvc, &mut VerifyCtx<'_>) -> Result<T>) -> Result<T> {
        let mut ctx = VerifyCtx {
            forest: &mut self.forest,
            dram: &mut self.dram,
            top: &mut self.epc,
            meter: &mut self.meter,
            latency: &self.latency,
        };
        f(&mut self.mvc, &mut ctx)
    }

    // ---- access path ----

    pub fn access(&mut self, enclave: u32, vaddr: u64, kind: AccessKind, icount: u64, data: Option<&Block>) -> Result<AccessResult> {
        self.advance_instructions(icount);
        self.replay()?;
        self.stats.accesses += 1;
        if vaddr & SCRATCH_VADDR_BIT != 0 {
            return self.scratch_access(vaddr & !SCRATCH_VADDR_BIT, kind, data);
        }
        let line = vaddr / BLOCK_SIZE * BLOCK_SIZE;
        let payload = match kind {
            AccessKind::Write => Some(*data.ok_or_else(|| Error::Config("write access needs data".into()))?),
            AccessKind::Read => None,
        };
        if let Some(w) = self.pending_writes.iter_mut().rev().find(|w| w.enclave == enclave && w.vaddr == line) {
            return Ok(match payload {
                None => {
                    self.stats.forwarded_reads += 1;
                    AccessResult {
                        outcome: AccessOutcome::Forwarded,
                        data: Some(w.data),
                        critical_cycles: 0,
                    }
                }
                Some(d) => {
                    w.data = d;
                    AccessResult {
                        outcome: AccessOutcome::QueuedWrite,
                        data: None,
                        critical_cycles: 0,
                    }
                }
            });
        }
        self.secure_access(enclave, line, payload)
    }

    fn secure_access(&mut self, enclave: u32, line: u64, payload: Option<Block>) -> Result<AccessResult> {
        let vpage = line >> PAGE_SHIFT;
        let block = ((line >> 6) & 63) as usize;
        let (home, fresh) = self.resolve(enclave, vpage)?;
        if fresh {
            if let Some(s) = self.slots.iter().position(|s| matches!(s.state, SlotState::Free { .. })) {
                self.allocate_free(s, home, enclave)?;
                self.stats.first_touch_allocations += 1;
            }
        }
        if let Some(&s) = self.slot_of.get(&home) {
            let (owner, loading) = match self.slots[s].state {
                SlotState::Resident { owner, .. } => (owner, None),
                SlotState::Loading { owner, entry, .. } => (owner, Some(entry)),
                SlotState::Free { .. } => unreachable!("mapped slot is free"),
            };
            if owner != enclave {
                return Err(self.violation(ViolationKind::CrossEnclaveMapping, self.epc.layout().phys_page(s as u64).0));
            }
            self.touch(s);
            return match loading {
                Some(e) if self.eshr[e].as_ref().unwrap().ls_vector & (1 << block) == 0 => {
                    self.stats.loading_hits += 1;
                    self.demand_access(e, block, payload)
                }
                Some(_) => {
                    self.stats.loading_hits += 1;
                    self.slot_access(s, block, payload)
                }
                None => {
                    self.stats.hits += 1;
                    self.slot_access(s, block, payload)
                }
            };
        }
        // Miss. A page still being written out must finish first.
        if let Some(e) = self.entry_evicting(home) {
            self.stats.epage_waits += 1;
            self.complete_entry(e)?;
            let stall = self.timeline.stall_until(self.timeline.lane_free_at());
            self.stats.stall_cycles += stall;
        }
        match payload {
            None => {
                if !self.pending_writes.is_empty() {
                    self.stats.reads_ahead_of_writes += 1;
                }
                self.read_miss(enclave, home, block)
            }
            Some(d) => {
                if self.cfg.deferred_verification && self.live_entries() > 0 {
                    self.stats.queued_writes += 1;
                    self.pending_writes.push_back(QueuedWrite {
                        enclave,
                        vaddr: line,
                        data: d,
                    });
                    return Ok(AccessResult {
                        outcome: AccessOutcome::QueuedWrite,
                        data: None,
                        critical_cycles: 0,
                    });
                }
                self.write_miss(enclave, home, block, d)
            }
        }
    }

    fn entry_evicting(&self, home: u64) -> Option<usize> {
        self.eshr_entries().find(|(_, e)| e.epage == Some(home)).map(|(i, _)| i)
    }

    fn allocate_free(&mut self, s: usize, home: u64, enclave: u32) -> Result<()> {
        if let SlotState::Free { dirty: true } = self.slots[s].state {
            let before = self.meter;
            let zero = [0u8; BLOCK_SIZE as usize];
            for b in 0..BLOCKS_PER_PAGE {
                self.epc.write_block(&mut self.dram, s as u64, b, &zero, AccessCause::Data, &mut self.meter)?;
            }
            let cost = self.bg_cost(&self.meter.since(&before));
            self.timeline.background(cost);
        }
        self.slots[s].state = SlotState::Resident { home, owner: enclave };
        self.slot_of.insert(home, s);
        self.touch(s);
        Ok(())
    }

    fn slot_access(&mut self, s: usize, block: usize, payload: Option<Block>) -> Result<AccessResult> {
        let before = self.meter;
        match payload {
            None => {
                let d = self.epc.read_block(&mut self.dram, s as u64, block, AccessCause::Data, &mut self.meter)?;
                let c = self.latency.critical_cost(&self.meter.since(&before));
                self.timeline.critical(c);
                Ok(AccessResult {
                    outcome: AccessOutcome::EpcHit,
                    data: Some(d),
                    critical_cycles: c,
                })
            }
            Some(d) => {
                self.epc.write_block(&mut self.dram, s as u64, block, &d, AccessCause::Data, &mut self.meter)?;
                let c = self.bg_cost(&self.meter.since(&before));
                self.timeline.background(c);
                Ok(AccessResult {
                    outcome: AccessOutcome::EpcHit,
                    data: None,
                    critical_cycles: 0,
                })
            }
        }
    }

    /// Access to a not-yet-loaded block of a loading page: that block is
    /// loaded immediately; a read gets the value forwarded.
    fn demand_access(&mut self, e: usize, block: usize, payload: Option<Block>) -> Result<AccessResult> {
        self.demand = Some(e);
        self.stats.demand_steps += 1;
        let (pt, cost) = self.step_block(e, block)?;
        let slot = self.eshr[e].as_ref().unwrap().slot;
        let mut critical = 0;
        if payload.is_none() {
            critical = self.latency.dram_access_cycles + self.latency.ecb_crypt_cycles;
            self.timeline.critical(critical);
        }
        let ready = self.eshr[e].as_ref().unwrap().ready_at;
        self.timeline.background_from(ready, cost);
        if let Some(d) = payload {
            let before = self.meter;
            self.epc.write_block(&mut self.dram, slot as u64, block, &d, AccessCause::Data, &mut self.meter)?;
            let c = self.bg_cost(&self.meter.since(&before));
            self.timeline.background(c);
        }
        self.maybe_finalize(e)?;
        Ok(AccessResult {
            outcome: AccessOutcome::EpcHit,
            data: payload.is_none().then_some(pt),
            critical_cycles: critical,
        })
    }

    fn read_miss(&mut self, enclave: u32, home: u64, block: usize) -> Result<AccessResult> {
        self.stats.read_faults += 1;
        let stall_before = self.timeline.stats().stall_cycles;
        let (e, pt, critical) = self.start_fault(enclave, home, Some(block))?;
        if !self.cfg.deferred_verification {
            let c = self.complete_blocking(e)?;
            self.timeline.critical(c);
        }
        let stalled = self.timeline.stats().stall_cycles - stall_before;
        Ok(AccessResult {
            outcome: AccessOutcome::FaultStarted(e),
            data: pt,
            critical_cycles: critical + stalled,
        })
    }

    fn write_miss(&mut self, enclave: u32, home: u64, block: usize, data: Block) -> Result<AccessResult> {
        self.stats.write_faults += 1;
        let (e, _, _) = self.start_fault(enclave, home, None)?;
        let (_, cost) = self.step_block(e, block)?;
        let slot = self.eshr[e].as_ref().unwrap().slot;
        let before = self.meter;
        self.epc.write_block(&mut self.dram, slot as u64, block, &data, AccessCause::Data, &mut self.meter)?;
        let cost = cost + self.bg_cost(&self.meter.since(&before));
        if self.cfg.deferred_verification {
            let ready = self.eshr[e].as_ref().unwrap().ready_at;
            self.timeline.background_from(ready, cost);
            self.maybe_finalize(e)?;
        } else {
            self.timeline.critical(cost);
            let c = self.complete_blocking(e)?;
            self.timeline.critical(c);
        }
        Ok(AccessResult {
            outcome: AccessOutcome::FaultStarted(e),
            data: None,
            critical_cycles: 0,
        })
    }

    /// Allocates an ESHR entry and a slot for `home`. With `block` set this
    /// is a read miss: the block and the key slot are fetched on the
    /// critical path and the decrypted block is returned.
    fn start_fault(&mut self, enclave: u32, home: u64, block: Option<usize>) -> Result<(usize, Option<Block>, u64)> {
        self.stats.faults += 1;
        if self.pending_club.is_some_and(|(i, _)| i == home) {
            self.flush_club()?;
        }
        while self.live_entries() >= self.eshr.len() {
            self.stats.eshr_full_stalls += 1;
            let oldest = self.oldest_entry().unwrap();
            self.complete_entry(oldest)?;
            let s = self.timeline.stall_until(self.timeline.lane_free_at());
            self.stats.stall_cycles += s;
        }
        let slot = loop {
            if let Some(s) = self.slots.iter().position(|s| matches!(s.state, SlotState::Free { .. })) {
                break s;
            }
            if let Some(s) = self.evict_select() {
                break s;
            }
            // Every slot is mid-load: finish one.
            let oldest = self.oldest_entry().ok_or(Error::OutOfMemory)?;
            self.complete_entry(oldest)?;
            let s = self.timeline.stall_until(self.timeline.lane_free_at());
            self.stats.stall_cycles += s;
        };
        let victim = match self.slots[slot].state {
            SlotState::Resident { home: vh, owner: vo } => {
                self.slot_of.remove(&vh);
                let new_key = compose_page_key(self.secrets.hw_key, vo, self.prng.next_random(), self.home_page(vh).0)?;
                Some(Victim {
                    home: vh,
                    new_key,
                    cipher: vec![0; PAGE_SIZE as usize],
                })
            }
            _ => None,
        };
        let idx = self.eshr.iter().position(|e| e.is_none()).unwrap();
        self.slots[slot].state = SlotState::Loading {
            home,
            owner: enclave,
            entry: idx,
        };
        self.slot_of.insert(home, slot);
        self.touch(slot);
        let before = self.meter;
        let mut buffered = None;
        let mut pt = None;
        if let Some(b) = block {
            let mut ct = [0u8; BLOCK_SIZE as usize];
            self.dram.read(self.home_page(home).block_addr(b), &mut ct)?;
            self.meter.read(AccessCause::Data);
            buffered = Some((b, ct));
        }
        let key = self.read_key(home, enclave)?;
        if let Some((b, ct)) = buffered {
            pt = Some(Self::decrypt_home_block(&key, b, &ct, &mut self.meter)?);
        }
        let fetch = self.meter.since(&before);
        let mut critical = 0;
        if block.is_some() {
            let reads = fetch.accesses(AccessCause::Data) + fetch.accesses(AccessCause::KeyTable);
            *self.stats.critical_fetch_reads.entry(reads).or_default() += 1;
            critical = self.latency.critical_cost(&fetch);
            self.timeline.critical(critical);
        } else {
            let c = self.bg_cost(&fetch);
            if self.cfg.deferred_verification {
                self.timeline.background(c);
            } else {
                self.timeline.critical(c);
            }
        }
        self.entry_seq += 1;
        self.eshr[idx] = Some(EshrEntry {
            epage: victim.as_ref().map(|v| v.home),
            lpage: home,
            ls_vector: 0,
            e_bit: victim.is_some(),
            v_bit: true,
            slot,
            owner: enclave,
            key,
            victim,
            cipher: vec![0; PAGE_SIZE as usize],
            buffered,
            ready_at: self.timeline.now(),
            seq: self.entry_seq,
        });
        self.demand = Some(idx);
        self.refresh_evict_register();
        Ok((idx, pt, critical))
    }

    fn oldest_entry(&self) -> Option<usize> {
        self.eshr_entries().min_by_key(|(_, e)| e.seq).map(|(i, _)| i)
    }

    /// Swaps one block: the victim's block goes out under its new key and
    /// the loading page's block comes in. Returns the loaded plaintext and
    /// the background cost.
    fn step_block(&mut self, e: usize, b: usize) -> Result<(Block, u64)> {
        let before = self.meter;
        let entry = self.eshr[e].as_ref().unwrap();
        debug_assert!(entry.ls_vector & (1 << b) == 0);
        let slot = entry.slot as u64;
        if let Some(v) = &entry.victim {
            let (vhome, vkey) = (v.home, v.new_key);
            let pt = self.epc.read_block(&mut self.dram, slot, b, AccessCause::Data, &mut self.meter)?;
            let ct = ecb_encrypt_block(&derive_block_key(&vkey, b)?, &pt);
            self.meter.ecb_ops += 1;
            self.dram.raw_write(self.home_page(vhome).block_addr(b), &ct)?;
            self.meter.write(AccessCause::Data);
            let v = self.eshr[e].as_mut().unwrap().victim.as_mut().unwrap();
            v.cipher[b * BLOCK_SIZE as usize..(b + 1) * BLOCK_SIZE as usize].copy_from_slice(&ct);
        }
        let entry = self.eshr[e].as_ref().unwrap();
        let (lhome, key) = (entry.lpage, entry.key);
        let ct = match entry.buffered {
            Some((bb, ct)) if bb == b => ct,
            _ => {
                let mut ct = [0u8; BLOCK_SIZE as usize];
                self.dram.read(self.home_page(lhome).block_addr(b), &mut ct)?;
                self.meter.read(AccessCause::Data);
                ct
            }
        };
        let pt = Self::decrypt_home_block(&key, b, &ct, &mut self.meter)?;
        self.epc.write_block(&mut self.dram, slot, b, &pt, AccessCause::Data, &mut self.meter)?;
        let entry = self.eshr[e].as_mut().unwrap();
        entry.cipher[b * BLOCK_SIZE as usize..(b + 1) * BLOCK_SIZE as usize].copy_from_slice(&ct);
        entry.ls_vector |= 1 << b;
        Ok((pt, self.bg_cost(&self.meter.since(&before))))
    }

    fn next_block(entry: &EshrEntry) -> usize {
        match entry.buffered {
            Some((b, _)) if entry.ls_vector & (1 << b) == 0 => b,
            _ => (!entry.ls_vector).trailing_zeros() as usize,
        }
    }

    /// Advances the highest-priority live entry by one block: the demand
    /// entry first, then the oldest.
    pub fn fault_step(&mut self) -> Result<Option<StepRecord>> {
        let e = match self.demand.filter(|&d| self.eshr[d].is_some()) {
            Some(d) => d,
            None => match self.oldest_entry() {
                Some(o) => o,
                None => return Ok(None),
            },
        };
        let b = Self::next_block(self.eshr[e].as_ref().unwrap());
        let (_, cost) = self.step_block(e, b)?;
        let ready = self.eshr[e].as_ref().unwrap().ready_at;
        self.timeline.lane_at(ready, cost);
        self.stats.background_steps += 1;
        let completed = self.maybe_finalize(e)?;
        Ok(Some(StepRecord {
            entry: e,
            block: b,
            completed,
        }))
    }

    fn maybe_finalize(&mut self, e: usize) -> Result<bool> {
        if self.eshr[e].as_ref().unwrap().ls_vector != ALL_LOADED {
            return Ok(false);
        }
        let cost = self.finalize(e)?;
        if self.cfg.deferred_verification {
            self.timeline.lane_at(0, cost);
        } else {
            self.timeline.critical(cost);
        }
        Ok(true)
    }

    /// Runs every remaining step of entry `e` on the lane.
    fn complete_entry(&mut self, e: usize) -> Result<()> {
        while self.eshr[e].is_some() {
            let b = Self::next_block(self.eshr[e].as_ref().unwrap());
            let (_, cost) = self.step_block(e, b)?;
            let ready = self.eshr[e].as_ref().unwrap().ready_at;
            self.timeline.lane_at(ready, cost);
            self.stats.background_steps += 1;
            self.maybe_finalize(e)?;
        }
        Ok(())
    }

    /// Blocking mode: the whole page swap and the verification run before
    /// execution resumes. Returns the cycles to charge.
    fn complete_blocking(&mut self, e: usize) -> Result<u64> {
        let mut total = 0;
        while self.eshr[e].as_ref().unwrap().ls_vector != ALL_LOADED {
            let b = Self::next_block(self.eshr[e].as_ref().unwrap());
            total += self.step_block(e, b)?.1;
        }
        total += self.finalize(e)?;
        Ok(total)
    }

    /// Retires a completed entry: hands the loaded page to verification and
    /// seals the victim. Returns the cost of the work.
    fn finalize(&mut self, e: usize) -> Result<u64> {
        let mut entry = self.eshr[e].take().unwrap();
        entry.v_bit = false;
        if self.demand == Some(e) {
            self.demand = None;
        }
        self.slots[entry.slot].state = SlotState::Resident {
            home: entry.lpage,
            owner: entry.owner,
        };
        let before = self.meter;
        if let Some(v) = entry.victim.take() {
            self.seal_evicted(v.home, &v.new_key, &v.cipher)?;
        }
        if self.cfg.deferred_verification {
            if self.mvc.is_full() {
                let icount = self.icount;
                if let Some(f) = self.with_ctx(|mvc, ctx| mvc.retire_one(icount, ctx))? {
                    self.timeline.lane_at(f, 0);
                }
            }
            let ready_at = self.timeline.lane_free_at();
            self.mvc.enqueue(VerificationJob {
                index: entry.lpage,
                key: entry.key,
                bytes: entry.cipher,
                ready_at,
                enqueue_cycle: self.timeline.now(),
                enqueue_icount: self.icount,
            });
        } else {
            let seal = self.bg_cost(&self.meter.since(&before));
            let mut m = Meter::default();
            let out = self.forest.verify_page(&mut self.dram, &mut self.epc, entry.lpage, &entry.key, &entry.cipher, &mut m)?;
            self.meter.absorb(&m);
            self.stats.blocking_verifications += 1;
            return Ok(seal + Mvc::batch_cycles(&self.latency, 1, out.dram_accesses));
        }
        Ok(self.bg_cost(&self.meter.since(&before)))
    }

    /// Stores the wrapped key and page MAC of a page that just left the EPC.
    fn seal_evicted(&mut self, home: u64, key: &PageKey, cipher: &[u8]) -> Result<()> {
        if self.mvc.has_job_for(home) {
            let icount = self.icount;
            if let Some(f) = self.with_ctx(|mvc, ctx| mvc.retire_through(home, icount, ctx))? {
                self.timeline.lane_at(f, 0);
            }
        }
        let addr = self.key_slot_addr(home);
        self.dram.raw_write(addr, &wrap_key(&self.secrets.ssk, key))?;
        self.meter.write(AccessCause::KeyTable);
        self.meter.ecb_ops += 1;
        self.meter.mac_bytes += PAGE_SIZE;
        let mac = page_mac(key, cipher);
        self.stats.evictions += 1;
        if self.forest.config().clubbing {
            match self.pending_club.take() {
                Some((p, pm)) if self.forest.region_of(p) == self.forest.region_of(home) && p != home => {
                    self.forest
                        .update_on_evict(&mut self.dram, &mut self.epc, p, pm, Some((home, mac)), &mut self.meter)?;
                }
                Some((p, pm)) => {
                    self.forest.update_on_evict(&mut self.dram, &mut self.epc, p, pm, None, &mut self.meter)?;
                    self.pending_club = Some((home, mac));
                }
                None => self.pending_club = Some((home, mac)),
            }
        } else {
            self.forest.update_on_evict(&mut self.dram, &mut self.epc, home, mac, None, &mut self.meter)?;
        }
        Ok(())
    }

    fn flush_club(&mut self) -> Result<()> {
        if let Some((p, m)) = self.pending_club.take() {
            let before = self.meter;
            self.forest.update_on_evict(&mut self.dram, &mut self.epc, p, m, None, &mut self.meter)?;
            let c = self.bg_cost(&self.meter.since(&before));
            self.timeline.lane_at(0, c);
            self.stats.club_flushes += 1;
        }
        Ok(())
    }

    /// Lazily performs the background work the lane would have done by now.
    fn replay(&mut self) -> Result<()> {
        loop {
            while self.live_entries() > 0 && self.timeline.lane_free_at() <= self.timeline.now() {
                self.fault_step()?;
            }
            if self.live_entries() == 0 && !self.pending_writes.is_empty() {
                self.start_queued_write()?;
                continue;
            }
            break;
        }
        let (now, icount) = (self.timeline.now(), self.icount);
        self.with_ctx(|mvc, ctx| mvc.tick(now, icount, ctx))?;
        Ok(())
    }

    fn start_queued_write(&mut self) -> Result<()> {
        let w = self.pending_writes.pop_front().unwrap();
        self.secure_access(w.enclave, w.vaddr, Some(w.data))?;
        Ok(())
    }

    /// Blocks until every loaded page is verified. Used for system calls and
    /// before any write to unsecure memory.
    pub fn syscall_barrier(&mut self) -> Result<u64> {
        self.stats.barriers += 1;
        loop {
            while self.live_entries() > 0 {
                self.fault_step()?;
            }
            if !self.pending_writes.is_empty() {
                self.start_queued_write()?;
                continue;
            }
            break;
        }
        self.flush_club()?;
        let icount = self.icount;
        let done = self.with_ctx(|mvc, ctx| mvc.drain(icount, ctx))?;
        let target = done.max(self.timeline.lane_free_at());
        let s = self.timeline.stall_until(target);
        self.stats.barrier_stall_cycles += s;
        Ok(s)
    }

    /// End of run: final barrier.
    pub fn finish(&mut self, icount: u64) -> Result<u64> {
        self.advance_instructions(icount);
        self.syscall_barrier()
    }

    fn scratch_access(&mut self, vaddr: u64, kind: AccessKind, data: Option<&Block>) -> Result<AccessResult> {
        let idx = vaddr >> PAGE_SHIFT;
        let page = self.layout.scratch_page(idx)?;
        let addr = page.block_addr(((vaddr >> 6) & 63) as usize);
        match kind {
            AccessKind::Read => {
                self.stats.scratch_reads += 1;
                let mut b = [0u8; BLOCK_SIZE as usize];
                self.dram.read(addr, &mut b)?;
                self.meter.read(AccessCause::Data);
                let c = self.latency.dram_access_cycles;
                self.timeline.critical(c);
                Ok(AccessResult {
                    outcome: AccessOutcome::ScratchAccess,
                    data: Some(b),
                    critical_cycles: c,
                })
            }
            AccessKind::Write => {
                self.stats.scratch_writes += 1;
                let mut stall = 0;
                if self.cfg.scratch_write_barrier {
                    stall = self.syscall_barrier()?;
                }
                let d = data.ok_or_else(|| Error::Config("write access needs data".into()))?;
                self.dram.raw_write(addr, d)?;
                self.meter.write(AccessCause::Data);
                self.timeline.background(self.latency.dram_burst_cycles);
                Ok(AccessResult {
                    outcome: AccessOutcome::ScratchAccess,
                    data: None,
                    critical_cycles: stall,
                })
            }
        }
    }

    /// Writes a resident page back to the eEPC under a fresh key and frees
    /// its slot. Returns `false` if the page was not resident.
    pub fn evict_page(&mut self, enclave: u32, vpage: u64) -> Result<bool> {
        let Some(home) = self.home_of(enclave, vpage) else {
            return Ok(false);
        };
        let loading = self.eshr_entries().find(|(_, e)| e.lpage == home).map(|(i, _)| i);
        if let Some(e) = loading {
            self.complete_entry(e)?;
        }
        let Some(&s) = self.slot_of.get(&home) else {
            return Ok(false);
        };
        let SlotState::Resident { owner, .. } = self.slots[s].state else {
            return Ok(false);
        };
        let before = self.meter;
        let key = compose_page_key(self.secrets.hw_key, owner, self.prng.next_random(), self.home_page(home).0)?;
        let mut cipher = vec![0u8; PAGE_SIZE as usize];
        for b in 0..BLOCKS_PER_PAGE {
            let pt = self.epc.read_block(&mut self.dram, s as u64, b, AccessCause::Data, &mut self.meter)?;
            let ct = ecb_encrypt_block(&derive_block_key(&key, b)?, &pt);
            self.meter.ecb_ops += 1;
            self.dram.raw_write(self.home_page(home).block_addr(b), &ct)?;
            self.meter.write(AccessCause::Data);
            cipher[b * BLOCK_SIZE as usize..(b + 1) * BLOCK_SIZE as usize].copy_from_slice(&ct);
        }
        self.seal_evicted(home, &key, &cipher)?;
        self.slot_of.remove(&home);
        self.slots[s].state = SlotState::Free { dirty: true };
        if self.evict_register == Some(s) {
            self.evict_register = None;
        }
        self.stats.explicit_evictions += 1;
        let c = self.bg_cost(&self.meter.since(&before));
        self.timeline.background(c);
        Ok(true)
    }

    /// Current plaintext of a mapped page, read through the protection
    /// machinery. Call after [`EpcManager::finish`].
    pub fn read_plain_page(&mut self, enclave: u32, vpage: u64) -> Result<Option<Vec<u8>>> {
        let Some(home) = self.home_of(enclave, vpage) else {
            return Ok(None);
        };
        let mut out = vec![0u8; PAGE_SIZE as usize];
        let mut m = Meter::default();
        if let Some(&s) = self.slot_of.get(&home) {
            for b in 0..BLOCKS_PER_PAGE {
                let blk = self.epc.read_block(&mut self.dram, s as u64, b, AccessCause::Data, &mut m)?;
                out[b * BLOCK_SIZE as usize..(b + 1) * BLOCK_SIZE as usize].copy_from_slice(&blk);
            }
            return Ok(Some(out));
        }
        let w = self.dram.peek(self.key_slot_addr(home), KEY_SLOT_BYTES as usize)?;
        if w.iter().all(|&x| x == 0) {
            return Ok(Some(out));
        }
        let random = unwrap_key(&self.secrets.ssk, &w.try_into().unwrap());
        let key = compose_page_key(self.secrets.hw_key, enclave, random, self.home_page(home).0)?;
        for b in 0..BLOCKS_PER_PAGE {
            let ct: Block = self.dram.peek(self.home_page(home).block_addr(b), BLOCK_SIZE as usize)?.try_into().unwrap();
            let pt = ecb_decrypt_block(&derive_block_key(&key, b)?, &ct);
            out[b * BLOCK_SIZE as usize..(b + 1) * BLOCK_SIZE as usize].copy_from_slice(&pt);
        }
        Ok(Some(out))
    }
}
