// SPDX-License-Identifier: Apache-2.0

//! Runs a trace through the cache hierarchy and one protection model.
//!
//! Models: an unprotected baseline; an SGX-client style EPC with a counter
//! tree and a fixed fault penalty; the same with a list-based fault
//! prefetcher; a Penglai-style whole-memory tree with a small cache of
//! mounted subtree roots; and SecScale itself.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::address_space::{EmulatedDram, BLOCKS_PER_PAGE, BLOCK_SIZE, KEY_SLOT_BYTES, MIB, PAGE_SHIFT, PAGE_SIZE};
use crate::adversary::{self, AttackKind};
use crate::crypto::{Block, TcbSecrets};
use crate::epc_manager::{EpcManager, GeometryConfig, ManagerConfig, ManagerStats};
use crate::epc_merkle::{merkle_storage_bytes, EpcLayout, EpcStore, MerkleTreeConfig};
use crate::error::{Error, Result, SecurityViolation};
use crate::mac_forest::{forest_storage_bytes, forest_top_bytes, ForestConfig};
use crate::mvc::MvcStats;
use crate::timing::{AccessCause, LatencyConfig, Meter, Timeline};
use crate::workload::{llc_filter, AccessKind, CacheConfig, CacheStats, LlcRequest, Pattern, SyntheticSpec, TraceRecord, SCRATCH_VADDR_BIT};

pub type PageKey = (u32, u64);
pub type MemoryState = BTreeMap<PageKey, Vec<u8>>;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Baseline,
    SgxClient,
    Dfp,
    PenglaiMmt,
    SecScale,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Baseline,
        ModelKind::SgxClient,
        ModelKind::Dfp,
        ModelKind::PenglaiMmt,
        ModelKind::SecScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::SgxClient => "sgx-client",
            ModelKind::Dfp => "dfp",
            ModelKind::PenglaiMmt => "penglai-mmt",
            ModelKind::SecScale => "sec-scale",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = match s {
            "secscale" => "sec-scale",
            "sgx" => "sgx-client",
            "penglai" => "penglai-mmt",
            "unsecure" => "baseline",
            other => other,
        };
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgxConfig {
    /// Charge counter-tree traffic on EPC accesses.
    pub integrity_tree: bool,
}

impl Default for SgxConfig {
    fn default() -> Self {
        Self { integrity_tree: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DfpConfig {
    /// Probability that a prefetch targets the page of the next fault.
    pub accuracy: f64,
    pub history: usize,
    /// Requests scanned ahead to find the next faulting page.
    pub lookahead: usize,
}

impl Default for DfpConfig {
    fn default() -> Self {
        Self {
            accuracy: 0.2,
            history: 256,
            lookahead: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenglaiConfig {
    pub subtree_pages: u64,
    pub root_cache_entries: usize,
    pub counter_cache_bytes: u64,
    pub arity: u64,
}

impl Default for PenglaiConfig {
    fn default() -> Self {
        Self {
            subtree_pages: 32,
            root_cache_entries: 32,
            counter_cache_bytes: 32 * 1024,
            arity: 32,
        }
    }
}

/// Everything about the simulated machine except the model choice.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub geometry: GeometryConfig,
    pub manager: ManagerConfig,
    pub forest: ForestConfig,
    pub merkle: MerkleTreeConfig,
    pub latency: LatencyConfig,
    pub cache: CacheConfig,
    pub sgx: SgxConfig,
    pub dfp: DfpConfig,
    pub penglai: PenglaiConfig,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.layout(&self.forest)?;
        self.manager.validate()?;
        self.merkle.validate()?;
        self.latency.validate()?;
        self.cache.validate()?;
        if !(0.0..=1.0).contains(&self.dfp.accuracy) {
            return Err(Error::Config("dfp.accuracy must be within [0, 1]".into()));
        }
        let p = &self.penglai;
        if p.subtree_pages == 0 || p.root_cache_entries == 0 || p.arity < 2 || p.counter_cache_bytes < 64 {
            return Err(Error::Config("penglai parameters must be positive (arity >= 2)".into()));
        }
        Ok(())
    }
}

/// One scripted attack: applied just before LLC request `at`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub at: u64,
    pub kind: AttackKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: ModelKind,
    pub seed: u64,
    pub system: SystemConfig,
    pub attacks: Vec<AttackSpec>,
}

impl SimConfig {
    pub fn new(model: ModelKind, system: SystemConfig, seed: u64) -> Self {
        Self {
            model,
            seed,
            system,
            attacks: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if !self.attacks.is_empty() && self.model != ModelKind::SecScale {
            return Err(Error::Config("attack scripts require the sec-scale model".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramBreakdown {
    pub data: u64,
    pub merkle: u64,
    pub forest: u64,
    pub key_table: u64,
    pub total: u64,
}

impl DramBreakdown {
    fn from_meter(m: &Meter) -> Self {
        Self {
            data: m.accesses(AccessCause::Data),
            merkle: m.accesses(AccessCause::Merkle),
            forest: m.accesses(AccessCause::Forest),
            key_table: m.accesses(AccessCause::KeyTable),
            total: m.total_accesses(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: Option<ModelKind>,
    pub label: String,
    pub seed: u64,
    pub trace_records: u64,
    pub llc_requests: u64,
    pub llc_reads: u64,
    pub llc_writebacks: u64,
    pub instructions: u64,
    pub total_cycles: u64,
    pub critical_cycles: u64,
    pub background_cycles: u64,
    pub stall_cycles: u64,
    /// Instructions per cycle.
    pub performance: f64,
    /// Performance relative to the unprotected baseline on the same trace.
    pub normalized_performance: Option<f64>,
    pub dram: DramBreakdown,
    pub epc_faults: u64,
    pub evictions: u64,
    pub evictions_per_kilo_instruction: f64,
    /// Faults as a percentage of LLC misses.
    pub epc_miss_percent: f64,
    pub clubbing_frequency: Option<f64>,
    pub top_cache_hit_rate: Option<f64>,
    pub max_verify_accesses_per_page: Option<u64>,
    pub read_miss_critical_reads: BTreeMap<u64, u64>,
    pub prefetches_issued: u64,
    pub prefetch_hits: u64,
    pub mmt_mounts: u64,
    pub cache: CacheStats,
    pub manager: Option<ManagerStats>,
    pub mvc: Option<MvcStats>,
    pub security_event: Option<SecurityViolation>,
    pub state_digest: Option<String>,
}

pub const CSV_COLUMNS: [&str; 22] = [
    "label",
    "model",
    "seed",
    "instructions",
    "llc_requests",
    "total_cycles",
    "critical_cycles",
    "background_cycles",
    "stall_cycles",
    "performance",
    "normalized_performance",
    "dram_data",
    "dram_merkle",
    "dram_forest",
    "dram_key_table",
    "dram_total",
    "epc_faults",
    "evictions",
    "evictions_per_kilo_instruction",
    "epc_miss_percent",
    "clubbing_frequency",
    "security_event",
];

fn opt_f(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let fields = [
            self.label.clone(),
            self.model.map(|m| m.name().to_string()).unwrap_or_default(),
            self.seed.to_string(),
            self.instructions.to_string(),
            self.llc_requests.to_string(),
            self.total_cycles.to_string(),
            self.critical_cycles.to_string(),
            self.background_cycles.to_string(),
            self.stall_cycles.to_string(),
            format!("{:.6}", self.performance),
            opt_f(self.normalized_performance),
            self.dram.data.to_string(),
            self.dram.merkle.to_string(),
            self.dram.forest.to_string(),
            self.dram.key_table.to_string(),
            self.dram.total.to_string(),
            self.epc_faults.to_string(),
            self.evictions.to_string(),
            format!("{:.6}", self.evictions_per_kilo_instruction),
            format!("{:.6}", self.epc_miss_percent),
            opt_f(self.clubbing_frequency),
            self.security_event
                .as_ref()
                .map(|v| format!("{:?}", v.kind))
                .unwrap_or_default(),
        ];
        fields.join(",")
    }
}

pub fn to_csv(reports: &[Report]) -> String {
    let mut s = Report::csv_header();
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn state_digest(state: &MemoryState) -> String {
    let mut h = Sha256::new();
    for ((e, v), bytes) in state {
        h.update(e.to_le_bytes());
        h.update(v.to_le_bytes());
        h.update(bytes);
    }
    let mut out = String::with_capacity(64);
    for b in h.finalize() {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

fn is_scratch(vaddr: u64) -> bool {
    vaddr & SCRATCH_VADDR_BIT != 0
}

fn split(vaddr: u64) -> (u64, usize) {
    ((vaddr & !SCRATCH_VADDR_BIT) >> PAGE_SHIFT, ((vaddr >> 6) & 63) as usize)
}

fn pack(k: PageKey) -> u64 {
    ((k.0 as u64) << 36) | k.1
}

fn unpack(p: u64) -> PageKey {
    ((p >> 36) as u32, p & ((1 << 36) - 1))
}

#[derive(Default)]
struct PlainMemory {
    pages: HashMap<PageKey, Vec<u8>>,
}

impl PlainMemory {
    fn page(&mut self, k: PageKey) -> &mut Vec<u8> {
        self.pages.entry(k).or_insert_with(|| vec![0; PAGE_SIZE as usize])
    }

    fn read(&mut self, k: PageKey, b: usize) -> Block {
        self.page(k)[b * 64..(b + 1) * 64].try_into().unwrap()
    }

    fn write(&mut self, k: PageKey, b: usize, d: &Block) {
        self.page(k)[b * 64..(b + 1) * 64].copy_from_slice(d);
    }

    fn state(&self) -> MemoryState {
        self.pages.iter().map(|(k, v)| (*k, v.clone())).collect()
    }
}

struct Clock {
    t: Timeline,
    icount: u64,
}

impl Clock {
    fn new() -> Self {
        Self {
            t: Timeline::new(),
            icount: 0,
        }
    }

    fn advance(&mut self, lat: &LatencyConfig, icount: u64) {
        if icount > self.icount {
            self.t.instructions(lat, icount - self.icount);
            self.icount = icount;
        }
    }
}

trait Model {
    fn access(&mut self, i: usize, reqs: &[LlcRequest]) -> Result<()>;
    fn finish(&mut self, icount: u64) -> Result<()>;
    fn timeline(&self) -> &Timeline;
    fn meter(&self) -> Meter;
    fn fill(&self, r: &mut Report);
    fn state(&mut self) -> Result<MemoryState>;
}

/// Scratch pages are outside every enclave and unprotected in all models.
fn plain_scratch(clock: &mut Clock, lat: &LatencyConfig, meter: &mut Meter, mem: &mut PlainMemory, req: &LlcRequest) {
    let (p, b) = split(req.vaddr);
    match req.payload {
        None => {
            mem.read((u32::MAX, p), b);
            meter.read(AccessCause::Data);
            clock.t.critical(lat.dram_access_cycles);
        }
        Some(d) => {
            mem.write((u32::MAX, p), b, &d);
            meter.write(AccessCause::Data);
            clock.t.background(lat.dram_burst_cycles);
        }
    }
}

struct Baseline {
    lat: LatencyConfig,
    clock: Clock,
    meter: Meter,
    mem: PlainMemory,
    scratch: PlainMemory,
}

impl Model for Baseline {
    fn access(&mut self, i: usize, reqs: &[LlcRequest]) -> Result<()> {
        let req = &reqs[i];
        self.clock.advance(&self.lat, req.icount);
        if is_scratch(req.vaddr) {
            plain_scratch(&mut self.clock, &self.lat, &mut self.meter, &mut self.scratch, req);
            return Ok(());
        }
        let (p, b) = split(req.vaddr);
        match req.payload {
            None => {
                self.mem.read((req.enclave, p), b);
                self.meter.read(AccessCause::Data);
                self.clock.t.critical(self.lat.dram_access_cycles);
            }
            Some(d) => {
                self.mem.write((req.enclave, p), b, &d);
                self.meter.write(AccessCause::Data);
                self.clock.t.background(self.lat.dram_burst_cycles);
            }
        }
        Ok(())
    }

    fn finish(&mut self, icount: u64) -> Result<()> {
        self.clock.advance(&self.lat, icount);
        self.clock.t.drain();
        Ok(())
    }

    fn timeline(&self) -> &Timeline {
        &self.clock.t
    }

    fn meter(&self) -> Meter {
        self.meter
    }

    fn fill(&self, _r: &mut Report) {}

    fn state(&mut self) -> Result<MemoryState> {
        Ok(self.mem.state())
    }
}

/// List-based fault predictor: the page that followed the last fault's
/// previous occurrence in the history, else the next sequential page.
pub fn dfp_prefetch_hook(history: &[u64]) -> Option<u64> {
    let (&last, rest) = history.split_last()?;
    match rest.iter().rposition(|&p| p == last) {
        Some(pos) => Some(history[pos + 1]),
        None => Some(last + 1),
    }
}

#[derive(Clone, Copy, Debug)]
struct SgxSlot {
    page: Option<PageKey>,
    lru: u64,
    ready_at: u64,
    prefetched: bool,
}

struct DfpState {
    cfg: DfpConfig,
    rng: ChaCha20Rng,
    history: VecDeque<u64>,
    issued: u64,
    hits: u64,
}

struct SgxModel {
    lat: LatencyConfig,
    integrity: bool,
    clock: Clock,
    meter: Meter,
    dram: EmulatedDram,
    epc: EpcStore,
    slots: Vec<SgxSlot>,
    resident: HashMap<PageKey, usize>,
    backing: HashMap<PageKey, Vec<u8>>,
    seen: HashSet<PageKey>,
    scratch: PlainMemory,
    lru_clock: u64,
    faults: u64,
    evictions: u64,
    dfp: Option<DfpState>,
}

impl SgxModel {
    fn new(sys: &SystemConfig, seed: u64, dfp: bool) -> Result<Self> {
        let layout = sys.geometry.layout(&sys.forest)?;
        let mut dram = EmulatedDram::new(layout.clone());
        let el = EpcLayout::compute(layout.epc_base, layout.epc_pages(), 0, &sys.merkle)?;
        let epc = EpcStore::new(&mut dram, el, &sys.merkle, &TcbSecrets::derive(seed))?;
        let slots = vec![
            SgxSlot {
                page: None,
                lru: 0,
                ready_at: 0,
                prefetched: false,
            };
            epc.layout().data_slots as usize
        ];
        Ok(Self {
            lat: sys.latency.clone(),
            integrity: sys.sgx.integrity_tree,
            clock: Clock::new(),
            meter: Meter::default(),
            dram,
            epc,
            slots,
            resident: HashMap::new(),
            backing: HashMap::new(),
            seen: HashSet::new(),
            scratch: PlainMemory::default(),
            lru_clock: 0,
            faults: 0,
            evictions: 0,
            dfp: dfp.then(|| DfpState {
                cfg: sys.dfp.clone(),
                rng: ChaCha20Rng::seed_from_u64(seed ^ 0xdf9),
                history: VecDeque::new(),
                issued: 0,
                hits: 0,
            }),
        })
    }

    /// Books EPC traffic; without the tree only the data access counts.
    fn book(&mut self, m: &Meter, write: bool) -> Meter {
        if self.integrity {
            self.meter.absorb(m);
            return *m;
        }
        let mut d = Meter {
            ctr_ops: m.ctr_ops,
            ..Default::default()
        };
        if write {
            d.write(AccessCause::Data);
        } else {
            d.read(AccessCause::Data);
        }
        self.meter.absorb(&d);
        d
    }

    /// Puts `k` in a slot, evicting the LRU page if needed.
    fn install(&mut self, k: PageKey, stamp: u64) -> Result<usize> {
        let s = match self.slots.iter().position(|s| s.page.is_none()) {
            Some(s) => s,
            None => (0..self.slots.len()).min_by_key(|&i| (self.slots[i].lru, i)).unwrap(),
        };
        let mut m = Meter::default();
        if let Some(v) = self.slots[s].page.take() {
            self.evictions += 1;
            self.resident.remove(&v);
            let mut bytes = vec![0u8; PAGE_SIZE as usize];
            for b in 0..BLOCKS_PER_PAGE {
                let d = self.epc.read_block(&mut self.dram, s as u64, b, AccessCause::Data, &mut m)?;
                bytes[b * 64..(b + 1) * 64].copy_from_slice(&d);
                m.write(AccessCause::Data);
            }
            self.backing.insert(v, bytes);
        }
        let bytes = self.backing.remove(&k).unwrap_or_else(|| vec![0; PAGE_SIZE as usize]);
        for b in 0..BLOCKS_PER_PAGE {
            m.read(AccessCause::Data);
            let d: Block = bytes[b * 64..(b + 1) * 64].try_into().unwrap();
            self.epc.write_block(&mut self.dram, s as u64, b, &d, AccessCause::Data, &mut m)?;
        }
        if self.integrity {
            self.meter.absorb(&m);
        } else {
            let data = m.accesses(AccessCause::Data);
            self.meter.reads[AccessCause::Data.index()] += data / 2;
            self.meter.writes[AccessCause::Data.index()] += data - data / 2;
        }
        self.slots[s] = SgxSlot {
            page: Some(k),
            lru: stamp,
            ready_at: 0,
            prefetched: false,
        };
        self.resident.insert(k, s);
        Ok(s)
    }

    fn next_missing(&self, i: usize, reqs: &[LlcRequest], current: PageKey, look: usize) -> Option<PageKey> {
        reqs.iter()
            .skip(i + 1)
            .take(look)
            .filter(|r| !is_scratch(r.vaddr))
            .map(|r| (r.enclave, split(r.vaddr).0))
            .find(|k| *k != current && !self.resident.contains_key(k))
    }

    fn prefetch(&mut self, i: usize, reqs: &[LlcRequest], k: PageKey) -> Result<()> {
        let Some(mut d) = self.dfp.take() else {
            return Ok(());
        };
        d.history.push_back(pack(k));
        if d.history.len() > d.cfg.history {
            d.history.pop_front();
        }
        let mut target = None;
        if self.clock.t.lane_free_at() <= self.clock.t.now() {
            if d.rng.gen_bool(d.cfg.accuracy) {
                target = self.next_missing(i, reqs, k, d.cfg.lookahead);
            }
            if target.is_none() {
                let h: Vec<u64> = d.history.iter().copied().collect();
                target = dfp_prefetch_hook(&h)
                    .map(unpack)
                    .filter(|p| self.seen.contains(p) && !self.resident.contains_key(p));
            }
        }
        if let Some(p) = target {
            // Inserted at the LRU end: a useless prefetch is the next victim.
            let s = self.install(p, 0)?;
            let end = self.clock.t.background(self.lat.sgx_fault_penalty);
            self.slots[s].ready_at = end;
            self.slots[s].prefetched = true;
            d.issued += 1;
        }
        self.dfp = Some(d);
        Ok(())
    }
}

impl Model for SgxModel {
    fn access(&mut self, i: usize, reqs: &[LlcRequest]) -> Result<()> {
        let req = &reqs[i];
        self.clock.advance(&self.lat, req.icount);
        if is_scratch(req.vaddr) {
            plain_scratch(&mut self.clock, &self.lat, &mut self.meter, &mut self.scratch, req);
            return Ok(());
        }
        let (p, b) = split(req.vaddr);
        let k = (req.enclave, p);
        self.seen.insert(k);
        let s = match self.resident.get(&k) {
            Some(&s) => {
                if self.slots[s].prefetched {
                    self.slots[s].prefetched = false;
                    if let Some(d) = &mut self.dfp {
                        d.hits += 1;
                    }
                }
                self.clock.t.stall_until(self.slots[s].ready_at);
                s
            }
            None => {
                self.faults += 1;
                self.clock.t.critical(self.lat.sgx_fault_penalty);
                self.lru_clock += 1;
                let s = self.install(k, self.lru_clock)?;
                self.prefetch(i, reqs, k)?;
                s
            }
        };
        self.lru_clock += 1;
        self.slots[s].lru = self.lru_clock;
        let mut m = Meter::default();
        match req.payload {
            None => {
                self.epc.read_block(&mut self.dram, s as u64, b, AccessCause::Data, &mut m)?;
                let m = self.book(&m, false);
                self.clock.t.critical(self.lat.critical_cost(&m));
            }
            Some(d) => {
                self.epc.write_block(&mut self.dram, s as u64, b, &d, AccessCause::Data, &mut m)?;
                let m = self.book(&m, true);
                let c = m.total_accesses() * self.lat.dram_burst_cycles + m.ctr_ops * self.lat.crypto_stream_cycles;
                self.clock.t.background(c);
            }
        }
        Ok(())
    }

    fn finish(&mut self, icount: u64) -> Result<()> {
        self.clock.advance(&self.lat, icount);
        self.clock.t.drain();
        Ok(())
    }

    fn timeline(&self) -> &Timeline {
        &self.clock.t
    }

    fn meter(&self) -> Meter {
        self.meter
    }

    fn fill(&self, r: &mut Report) {
        r.epc_faults = self.faults;
        r.evictions = self.evictions;
        if let Some(d) = &self.dfp {
            r.prefetches_issued = d.issued;
            r.prefetch_hits = d.hits;
        }
    }

    fn state(&mut self) -> Result<MemoryState> {
        let mut out: MemoryState = self.backing.iter().map(|(k, v)| (*k, v.clone())).collect();
        let mut m = Meter::default();
        for s in 0..self.slots.len() {
            if let Some(k) = self.slots[s].page {
                let mut bytes = vec![0u8; PAGE_SIZE as usize];
                for b in 0..BLOCKS_PER_PAGE {
                    let d = self.epc.read_block(&mut self.dram, s as u64, b, AccessCause::Data, &mut m)?;
                    bytes[b * 64..(b + 1) * 64].copy_from_slice(&d);
                }
                out.insert(k, bytes);
            }
        }
        // Prefetched pages that were never touched are not part of the
        // program's memory.
        out.retain(|k, _| self.seen.contains(k));
        Ok(out)
    }
}

struct Penglai {
    lat: LatencyConfig,
    cfg: PenglaiConfig,
    clock: Clock,
    meter: Meter,
    mem: PlainMemory,
    scratch: PlainMemory,
    homes: HashMap<PageKey, u64>,
    counters: Vec<Option<u64>>,
    roots: VecDeque<u64>,
    upper_levels: u64,
    mounts: u64,
}

impl Penglai {
    fn new(sys: &SystemConfig) -> Self {
        let cfg = sys.penglai.clone();
        let mut n = (sys.geometry.total_size / PAGE_SIZE).div_ceil(cfg.subtree_pages);
        let mut upper = 0;
        while n > 1 {
            n = n.div_ceil(cfg.arity);
            upper += 1;
        }
        Self {
            lat: sys.latency.clone(),
            counters: vec![None; (cfg.counter_cache_bytes / 64) as usize],
            cfg,
            clock: Clock::new(),
            meter: Meter::default(),
            mem: PlainMemory::default(),
            scratch: PlainMemory::default(),
            homes: HashMap::new(),
            roots: VecDeque::new(),
            upper_levels: upper.max(1),
            mounts: 0,
        }
    }

    /// Tree reads needed to authenticate `home`'s counter, and whether a
    /// subtree had to be mounted.
    fn walk(&mut self, home: u64) -> (u64, bool) {
        let line = (home % self.counters.len() as u64) as usize;
        if self.counters[line] == Some(home) {
            return (0, false);
        }
        self.counters[line] = Some(home);
        let st = home / self.cfg.subtree_pages;
        if let Some(pos) = self.roots.iter().position(|&r| r == st) {
            self.roots.remove(pos);
            self.roots.push_front(st);
            return (1, false);
        }
        self.mounts += 1;
        self.roots.push_front(st);
        self.roots.truncate(self.cfg.root_cache_entries);
        (1 + self.upper_levels, true)
    }
}

impl Model for Penglai {
    fn access(&mut self, i: usize, reqs: &[LlcRequest]) -> Result<()> {
        let req = &reqs[i];
        self.clock.advance(&self.lat, req.icount);
        if is_scratch(req.vaddr) {
            plain_scratch(&mut self.clock, &self.lat, &mut self.meter, &mut self.scratch, req);
            return Ok(());
        }
        let (p, b) = split(req.vaddr);
        let k = (req.enclave, p);
        let next = self.homes.len() as u64;
        let home = *self.homes.entry(k).or_insert(next);
        let (tree, mounted) = self.walk(home);
        let penalty = if mounted { self.lat.penglai_mmt_miss_penalty } else { 0 };
        let mut m = Meter::default();
        for _ in 0..tree {
            m.read(AccessCause::Merkle);
        }
        // Data MAC travels with the data.
        m.ctr_ops += 1;
        match req.payload {
            None => {
                self.mem.read(k, b);
                m.read(AccessCause::Data);
                m.read(AccessCause::Merkle);
                self.clock.t.critical(self.lat.critical_cost(&m) + penalty);
            }
            Some(d) => {
                self.mem.write(k, b, &d);
                m.write(AccessCause::Data);
                m.write(AccessCause::Merkle);
                m.write(AccessCause::Merkle);
                let c = m.total_accesses() * self.lat.dram_burst_cycles + self.lat.crypto_stream_cycles + penalty;
                self.clock.t.background(c);
            }
        }
        self.meter.absorb(&m);
        Ok(())
    }

    fn finish(&mut self, icount: u64) -> Result<()> {
        self.clock.advance(&self.lat, icount);
        self.clock.t.drain();
        Ok(())
    }

    fn timeline(&self) -> &Timeline {
        &self.clock.t
    }

    fn meter(&self) -> Meter {
        self.meter
    }

    fn fill(&self, r: &mut Report) {
        r.mmt_mounts = self.mounts;
    }

    fn state(&mut self) -> Result<MemoryState> {
        Ok(self.mem.state())
    }
}

struct SecScale {
    m: EpcManager,
    attacks: Vec<AttackSpec>,
    rng: ChaCha20Rng,
}

impl Model for SecScale {
    fn access(&mut self, i: usize, reqs: &[LlcRequest]) -> Result<()> {
        let req = &reqs[i];
        while self.attacks.first().is_some_and(|a| a.at <= i as u64) {
            let a = self.attacks.remove(0);
            let enclave = req.enclave;
            let rec = adversary::inject(&mut self.m, a.kind, enclave, &mut self.rng)?;
            adversary::trigger(&mut self.m, &rec, &mut self.rng)?;
        }
        let kind = if req.payload.is_some() { AccessKind::Write } else { AccessKind::Read };
        self.m.access(req.enclave, req.vaddr, kind, req.icount, req.payload.as_ref())?;
        Ok(())
    }

    fn finish(&mut self, icount: u64) -> Result<()> {
        self.m.finish(icount)?;
        Ok(())
    }

    fn timeline(&self) -> &Timeline {
        self.m.timeline()
    }

    fn meter(&self) -> Meter {
        *self.m.meter()
    }

    fn fill(&self, r: &mut Report) {
        let st = self.m.stats();
        let fs = self.m.forest().stats();
        r.epc_faults = st.faults;
        r.evictions = st.evictions;
        r.read_miss_critical_reads = st.critical_fetch_reads.clone();
        r.clubbing_frequency = Some(if fs.update_batches == 0 {
            0.0
        } else {
            fs.clubbed_updates as f64 / fs.update_batches as f64
        });
        r.top_cache_hit_rate = Some(if fs.top_cache_lookups == 0 {
            0.0
        } else {
            fs.top_cache_hits as f64 / fs.top_cache_lookups as f64
        });
        r.max_verify_accesses_per_page = Some(fs.max_verify_accesses_per_page);
        r.manager = Some(st.clone());
        r.mvc = Some(self.m.mvc().stats().clone());
    }

    fn state(&mut self) -> Result<MemoryState> {
        let mut out = MemoryState::new();
        for (e, v) in self.m.mapped_pages() {
            if let Some(p) = self.m.read_plain_page(e, v)? {
                out.insert((e, v), p);
            }
        }
        Ok(out)
    }
}

fn build(cfg: &SimConfig) -> Result<Box<dyn Model>> {
    let sys = &cfg.system;
    Ok(match cfg.model {
        ModelKind::Baseline => Box::new(Baseline {
            lat: sys.latency.clone(),
            clock: Clock::new(),
            meter: Meter::default(),
            mem: PlainMemory::default(),
            scratch: PlainMemory::default(),
        }),
        ModelKind::SgxClient => Box::new(SgxModel::new(sys, cfg.seed, false)?),
        ModelKind::Dfp => Box::new(SgxModel::new(sys, cfg.seed, true)?),
        ModelKind::PenglaiMmt => Box::new(Penglai::new(sys)),
        ModelKind::SecScale => {
            let mut attacks = cfg.attacks.clone();
            attacks.sort_by_key(|a| a.at);
            Box::new(SecScale {
                m: EpcManager::new(&sys.geometry, &sys.forest, &sys.merkle, &sys.manager, &sys.latency, cfg.seed)?,
                attacks,
                rng: ChaCha20Rng::seed_from_u64(cfg.seed ^ 0xa77ac),
            })
        }
    })
}

pub struct RunOutput {
    pub report: Report,
    /// Final plaintext of every touched enclave page; absent after a
    /// security event.
    pub state: Option<MemoryState>,
}

/// Runs pre-filtered LLC traffic. `instructions` is the final instruction
/// count of the trace.
pub fn run_requests(cfg: &SimConfig, reqs: &[LlcRequest], cache: &CacheStats, trace_records: u64) -> Result<RunOutput> {
    cfg.validate()?;
    let mut model = build(cfg)?;
    let mut report = Report {
        model: Some(cfg.model),
        label: cfg.model.name().to_string(),
        seed: cfg.seed,
        trace_records,
        llc_requests: reqs.len() as u64,
        llc_reads: reqs.iter().filter(|r| r.payload.is_none()).count() as u64,
        llc_writebacks: reqs.iter().filter(|r| r.payload.is_some()).count() as u64,
        cache: cache.clone(),
        ..Default::default()
    };
    let mut outcome = Ok(());
    for i in 0..reqs.len() {
        outcome = model.access(i, reqs);
        if outcome.is_err() {
            break;
        }
    }
    if outcome.is_ok() {
        outcome = model.finish(cache.instructions);
    }
    let mut state = None;
    match outcome {
        Ok(()) => {
            let s = model.state()?;
            report.state_digest = Some(state_digest(&s));
            state = Some(s);
        }
        Err(Error::CatastrophicFailure(v)) => report.security_event = Some(v),
        Err(e) => return Err(e),
    }
    let t = model.timeline();
    let st = t.stats();
    report.instructions = st.instructions;
    report.total_cycles = t.now();
    report.critical_cycles = st.critical_cycles;
    report.background_cycles = st.background_cycles;
    report.stall_cycles = st.stall_cycles;
    report.performance = if t.now() == 0 { 0.0 } else { st.instructions as f64 / t.now() as f64 };
    report.dram = DramBreakdown::from_meter(&model.meter());
    model.fill(&mut report);
    if report.instructions > 0 {
        report.evictions_per_kilo_instruction = report.evictions as f64 * 1000.0 / report.instructions as f64;
    }
    if report.llc_requests > 0 {
        report.epc_miss_percent = report.epc_faults as f64 * 100.0 / report.llc_requests as f64;
    }
    Ok(RunOutput { report, state })
}

pub fn run_detailed(cfg: &SimConfig, trace: &[TraceRecord]) -> Result<RunOutput> {
    if trace.is_empty() {
        return Err(Error::Config("trace is empty".into()));
    }
    let (reqs, cache) = llc_filter(trace, &cfg.system.cache)?;
    run_requests(cfg, &reqs, &cache, trace.len() as u64)
}

pub fn run(cfg: &SimConfig, trace: &[TraceRecord]) -> Result<Report> {
    Ok(run_detailed(cfg, trace)?.report)
}

/// A named model configuration inside a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub model: ModelKind,
    pub system: SystemConfig,
}

impl Variant {
    pub fn new(model: ModelKind, system: &SystemConfig) -> Self {
        Self {
            label: model.name().to_string(),
            model,
            system: system.clone(),
        }
    }
}

/// Sets `normalized_performance` of every report against `baseline`.
pub fn normalize(reports: &mut [Report], baseline: &Report) {
    for r in reports {
        r.normalized_performance = (baseline.performance > 0.0).then(|| r.performance / baseline.performance);
    }
}

/// Runs every variant on the same trace and normalizes against an
/// unprotected run with the first variant's system.
pub fn compare(variants: &[Variant], trace: &[TraceRecord], seed: u64) -> Result<Vec<Report>> {
    if variants.len() < 2 {
        return Err(Error::Config("compare needs at least two models".into()));
    }
    let mut reports = Vec::new();
    for v in variants {
        let mut r = run(&SimConfig::new(v.model, v.system.clone(), seed), trace)?;
        r.label = v.label.clone();
        reports.push(r);
    }
    let base = run(&SimConfig::new(ModelKind::Baseline, variants[0].system.clone(), seed), trace)?;
    normalize(&mut reports, &base);
    Ok(reports)
}

/// Uniform random accesses over 32 MiB with ~20k instructions between
/// memory accesses: mostly LLC misses, footprint far beyond the EPC.
pub fn trend_workload(seed: u64, accesses: u64) -> SyntheticSpec {
    SyntheticSpec {
        pattern: Pattern::UniformRandom,
        footprint: 32 * MIB,
        read_fraction: 0.7,
        accesses,
        accesses_per_instruction: 1.0 / 20_000.0,
        seed,
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub description: String,
    pub workload: SyntheticSpec,
    pub variants: Vec<Variant>,
}

pub const PRESETS: [&str; 5] = ["five-model", "fault-penalty-sweep", "merkle-only", "fault-only", "ablation"];

fn small_caches() -> CacheConfig {
    CacheConfig {
        l1_bytes: 4 << 10,
        l1_ways: 4,
        l2_bytes: 64 << 10,
        l2_ways: 8,
        line_bytes: BLOCK_SIZE,
    }
}

pub fn preset(name: &str, base: &SystemConfig, seed: u64) -> Result<Preset> {
    let mut workload = trend_workload(seed, 4000);
    let variants = match name {
        "five-model" => ModelKind::ALL.iter().map(|&m| Variant::new(m, base)).collect(),
        "fault-penalty-sweep" => [5_000u64, 10_000, 20_000, 30_000, 40_000]
            .into_iter()
            .map(|p| {
                let mut s = base.clone();
                s.latency.sgx_fault_penalty = p;
                Variant {
                    label: format!("sgx-client-{}k", p / 1000),
                    model: ModelKind::SgxClient,
                    system: s,
                }
            })
            .collect(),
        "merkle-only" => {
            // Footprint inside the EPC, caches small enough to miss.
            workload.footprint = base.geometry.epc_size / 2;
            workload.accesses_per_instruction = 0.01;
            let mut s = base.clone();
            s.cache = small_caches();
            vec![Variant::new(ModelKind::SgxClient, &s), Variant::new(ModelKind::PenglaiMmt, &s), Variant::new(ModelKind::SecScale, &s)]
        }
        "fault-only" => {
            let mut s = base.clone();
            s.sgx.integrity_tree = false;
            let mut v = Variant::new(ModelKind::SgxClient, &s);
            v.label = "sgx-client-no-tree".into();
            vec![v, Variant::new(ModelKind::SgxClient, base), Variant::new(ModelKind::SecScale, base)]
        }
        "ablation" => {
            workload.pattern = Pattern::Zipf { s: 1.0 };
            let mk = |label: &str, f: &dyn Fn(&mut SystemConfig)| {
                let mut s = base.clone();
                f(&mut s);
                Variant {
                    label: label.into(),
                    model: ModelKind::SecScale,
                    system: s,
                }
            };
            vec![
                mk("sec-scale", &|_| {}),
                mk("no-clubbing", &|s| s.forest.clubbing = false),
                mk("no-top-cache", &|s| s.forest.top_cache_entries = 0),
                mk("no-clubbing-no-cache", &|s| {
                    s.forest.clubbing = false;
                    s.forest.top_cache_entries = 0
                }),
                mk("ungrouped-verification", &|s| s.manager.grouped_verification = false),
                mk("blocking-verification", &|s| s.manager.deferred_verification = false),
            ]
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(Preset {
        name: name.into(),
        description: describe(name).into(),
        workload,
        variants,
    })
}

fn describe(name: &str) -> &'static str {
    match name {
        "five-model" => "all protection models on a uniform random footprint far beyond the EPC",
        "fault-penalty-sweep" => "SGX-client with fault penalties from 5k to 40k cycles",
        "merkle-only" => "footprint inside the EPC: integrity-tree cost without faults",
        "fault-only" => "SGX-client with and without counter-tree charges",
        "ablation" => "SecScale with clubbing, top-level cache, grouping or deferral disabled",
        _ => "",
    }
}

/// Metadata storage for a machine of `total_size` bytes whose EPC
/// protects `epc_protected` bytes with a counter tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    pub total_bytes: u64,
    pub forest_bytes: u64,
    pub forest_top_bytes: u64,
    pub epc_merkle_bytes: u64,
    pub combined_bytes: u64,
    pub key_table_bytes: u64,
    /// A counter tree over all of memory, for comparison.
    pub full_counter_tree_bytes: u64,
}

pub fn storage_report(total_size: u64, epc_protected: u64, forest: &ForestConfig, merkle: &MerkleTreeConfig) -> Result<StorageReport> {
    if total_size == 0 || epc_protected == 0 {
        return Err(Error::Config("storage sizes must be positive".into()));
    }
    forest.validate()?;
    merkle.validate()?;
    let forest_bytes = forest_storage_bytes(total_size, forest);
    let epc_merkle_bytes = merkle_storage_bytes(epc_protected, merkle);
    Ok(StorageReport {
        total_bytes: total_size,
        forest_bytes,
        forest_top_bytes: forest_top_bytes(total_size, forest),
        epc_merkle_bytes,
        combined_bytes: forest_bytes + epc_merkle_bytes,
        key_table_bytes: total_size.div_ceil(PAGE_SIZE) * KEY_SLOT_BYTES,
        full_counter_tree_bytes: merkle_storage_bytes(total_size, merkle),
    })
}
