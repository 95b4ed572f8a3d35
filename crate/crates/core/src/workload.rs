// SPDX-License-Identifier: Apache-2.0

//! Memory traces: the text format, synthetic generators, and a two-level
//! cache that turns a trace into the stream of last-level misses and dirty
//! writebacks seen by the memory protection models.
//!
//! Trace lines look like `R 0x1000 1 100`: operation, hex virtual address,
//! decimal enclave id, decimal cumulative instruction count. `#` starts a
//! comment. Files ending in `.gz` are gzip-compressed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::address_space::{BLOCK_SIZE, PAGE_SIZE};
use crate::crypto::Block;
use crate::error::{Error, Result};

/// Virtual addresses with this bit set refer to the shared unsecure
/// scratch area instead of enclave memory.
pub const SCRATCH_VADDR_BIT: u64 = 1 << 47;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub op: AccessKind,
    pub vaddr: u64,
    pub enclave: u32,
    pub icount: u64,
}

pub fn parse_trace<R: BufRead>(reader: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    let mut last_icount = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let body = line.split('#').next().unwrap().trim();
        if body.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let op = match fields[0] {
            "R" | "r" => AccessKind::Read,
            "W" | "w" => AccessKind::Write,
            other => return Err(err(format!("unknown operation `{other}`"))),
        };
        let hex = fields[1].trim_start_matches("0x").trim_start_matches("0X");
        let vaddr = u64::from_str_radix(hex, 16).map_err(|e| err(format!("bad address `{}`: {e}", fields[1])))?;
        let enclave: u32 = fields[2].parse().map_err(|e| err(format!("bad enclave id `{}`: {e}", fields[2])))?;
        let icount: u64 = fields[3].parse().map_err(|e| err(format!("bad instruction count `{}`: {e}", fields[3])))?;
        if icount < last_icount {
            return Err(err(format!("instruction count {icount} decreases from {last_icount}")));
        }
        last_icount = icount;
        out.push(TraceRecord {
            op,
            vaddr,
            enclave,
            icount,
        });
    }
    Ok(out)
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceRecord>> {
    let f = File::open(path)?;
    let reader: Box<dyn Read> = if is_gzip(path) {
        Box::new(GzDecoder::new(f))
    } else {
        Box::new(f)
    };
    parse_trace(BufReader::new(reader))
}

pub fn write_trace<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        let op = match r.op {
            AccessKind::Read => 'R',
            AccessKind::Write => 'W',
        };
        writeln!(w, "{op} {:#x} {} {}", r.vaddr, r.enclave, r.icount)?;
    }
    Ok(())
}

pub fn write_trace_file(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    if is_gzip(path) {
        let mut gz = GzEncoder::new(f, Compression::default());
        write_trace(&mut gz, records)?;
        gz.finish()?.flush()?;
    } else {
        let mut f = f;
        write_trace(&mut f, records)?;
        f.flush()?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Pattern {
    Sequential,
    UniformRandom,
    /// Page popularity follows a Zipf law with exponent `s`; hot pages are
    /// the low addresses.
    Zipf { s: f64 },
    Strided { stride: u64 },
    PointerChase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub pattern: Pattern,
    pub footprint: u64,
    pub read_fraction: f64,
    pub accesses: u64,
    pub accesses_per_instruction: f64,
    pub seed: u64,
    pub enclave: u32,
    pub base_vaddr: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            pattern: Pattern::UniformRandom,
            footprint: 32 << 20,
            read_fraction: 0.7,
            accesses: 20_000,
            accesses_per_instruction: 0.01,
            seed: 1,
            enclave: 1,
            base_vaddr: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.footprint < PAGE_SIZE {
            return Err(Error::Config("workload.footprint must be at least one page".into()));
        }
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return Err(Error::Config("workload.read_fraction must be in [0, 1]".into()));
        }
        if !(self.accesses_per_instruction > 0.0 && self.accesses_per_instruction <= 1.0) {
            return Err(Error::Config("workload.accesses_per_instruction must be in (0, 1]".into()));
        }
        match self.pattern {
            Pattern::Zipf { s } if !(s > 0.0) => Err(Error::Config("zipf exponent must be positive".into())),
            Pattern::Strided { stride: 0 } => Err(Error::Config("stride must be positive".into())),
            _ => Ok(()),
        }
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Vec<TraceRecord>> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let lines = spec.footprint / BLOCK_SIZE;
    let pages = spec.footprint / PAGE_SIZE;
    let mut chase: Vec<u64> = Vec::new();
    let mut cur = 0u64;
    if spec.pattern == Pattern::PointerChase {
        // Single cycle through every line.
        let mut order: Vec<u64> = (0..lines).collect();
        order.shuffle(&mut rng);
        chase = vec![0; lines as usize];
        for w in 0..order.len() {
            chase[order[w] as usize] = order[(w + 1) % order.len()];
        }
        cur = order[0];
    }
    let zipf = match spec.pattern {
        Pattern::Zipf { s } => Some(Zipf::new(pages, s).map_err(|e| Error::Config(format!("zipf: {e}")))?),
        _ => None,
    };
    let mut out = Vec::with_capacity(spec.accesses as usize);
    for i in 0..spec.accesses {
        let offset = match &spec.pattern {
            Pattern::Sequential => (i * BLOCK_SIZE) % spec.footprint,
            Pattern::UniformRandom => rng.gen_range(0..lines) * BLOCK_SIZE,
            Pattern::Zipf { .. } => {
                let page = zipf.as_ref().unwrap().sample(&mut rng) as u64 - 1;
                page * PAGE_SIZE + rng.gen_range(0..PAGE_SIZE / BLOCK_SIZE) * BLOCK_SIZE
            }
            Pattern::Strided { stride } => ((i * stride) % spec.footprint) / BLOCK_SIZE * BLOCK_SIZE,
            Pattern::PointerChase => {
                let o = cur * BLOCK_SIZE;
                cur = chase[cur as usize];
                o
            }
        };
        let op = if rng.gen_bool(spec.read_fraction) {
            AccessKind::Read
        } else {
            AccessKind::Write
        };
        out.push(TraceRecord {
            op,
            vaddr: spec.base_vaddr + offset,
            enclave: spec.enclave,
            icount: ((i + 1) as f64 / spec.accesses_per_instruction).floor() as u64,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub l1_bytes: u64,
    pub l1_ways: usize,
    pub l2_bytes: u64,
    pub l2_ways: usize,
    pub line_bytes: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            l1_bytes: 32 << 10,
            l1_ways: 8,
            l2_bytes: 8 << 20,
            l2_ways: 8,
            line_bytes: BLOCK_SIZE,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.line_bytes != BLOCK_SIZE {
            return Err(Error::Config("cache.line_bytes must be 64".into()));
        }
        for (bytes, ways, name) in [(self.l1_bytes, self.l1_ways, "l1"), (self.l2_bytes, self.l2_ways, "l2")] {
            if ways == 0 || bytes == 0 || bytes % (ways as u64 * self.line_bytes) != 0 {
                return Err(Error::Config(format!("cache.{name} size must be a multiple of ways x line")));
            }
        }
        Ok(())
    }
}

/// Set-associative, write-back, LRU cache of line tags.
#[derive(Clone, Debug)]
pub struct SetAssocCache {
    sets: Vec<Vec<(u64, bool, u64)>>,
    ways: usize,
    clock: u64,
    pub hits: u64,
    pub misses: u64,
}

impl SetAssocCache {
    pub fn new(bytes: u64, ways: usize, line: u64) -> Self {
        let sets = (bytes / line / ways as u64).max(1) as usize;
        Self {
            sets: vec![Vec::with_capacity(ways); sets],
            ways,
            clock: 0,
            hits: 0,
            misses: 0,
        }
    }

    fn set_of(&self, line: u64) -> usize {
        (line % self.sets.len() as u64) as usize
    }

    /// Looks up `line`; on a hit refreshes LRU and ORs in `dirty`.
    pub fn lookup(&mut self, line: u64, dirty: bool) -> bool {
        self.clock += 1;
        let now = self.clock;
        let s = self.set_of(line);
        if let Some(e) = self.sets[s].iter_mut().find(|e| e.0 == line) {
            e.1 |= dirty;
            e.2 = now;
            self.hits += 1;
            true
        } else {
            self.misses += 1;
            false
        }
    }

    /// Inserts a line that is known to be absent; returns the evicted line
    /// and its dirty bit.
    pub fn fill(&mut self, line: u64, dirty: bool) -> Option<(u64, bool)> {
        self.clock += 1;
        let now = self.clock;
        let ways = self.ways;
        let s = self.set_of(line);
        let set = &mut self.sets[s];
        let mut victim = None;
        if set.len() == ways {
            let i = (0..set.len()).min_by_key(|&i| set[i].2).unwrap();
            let v = set.swap_remove(i);
            victim = Some((v.0, v.1));
        }
        set.push((line, dirty, now));
        victim
    }

    pub fn contains(&self, line: u64) -> bool {
        self.sets[self.set_of(line)].iter().any(|e| e.0 == line)
    }
}

/// One request at the memory side of the cache hierarchy. Writebacks carry
/// a full line of data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LlcRequest {
    pub op: AccessKind,
    pub enclave: u32,
    pub vaddr: u64,
    pub icount: u64,
    pub payload: Option<Block>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub accesses: u64,
    pub l1_hits: u64,
    pub l1_misses: u64,
    pub l2_hits: u64,
    pub l2_misses: u64,
    pub writebacks: u64,
    pub instructions: u64,
}

/// Data written back for event `seq` at `vaddr`; a pure function so that
/// every model sees identical payloads.
pub fn writeback_payload(seq: u64, enclave: u32, vaddr: u64) -> Block {
    let mut out = [0u8; BLOCK_SIZE as usize];
    for (i, chunk) in out.chunks_mut(32).enumerate() {
        let mut h = Sha256::new();
        h.update(seq.to_le_bytes());
        h.update(enclave.to_le_bytes());
        h.update(vaddr.to_le_bytes());
        h.update([i as u8]);
        chunk.copy_from_slice(&h.finalize());
    }
    out
}

/// Two-level non-inclusive hierarchy with write-allocate.
#[derive(Clone, Debug)]
pub struct CacheHierarchy {
    l1: SetAssocCache,
    l2: SetAssocCache,
    line: u64,
    stats: CacheStats,
    seq: u64,
}

fn line_key(enclave: u32, vaddr: u64, line: u64) -> u64 {
    ((enclave as u64) << 48) ^ (vaddr / line)
}

fn key_parts(key: u64, line: u64) -> (u32, u64) {
    ((key >> 48) as u32, (key & ((1 << 48) - 1)) * line)
}

impl CacheHierarchy {
    pub fn new(cfg: &CacheConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            l1: SetAssocCache::new(cfg.l1_bytes, cfg.l1_ways, cfg.line_bytes),
            l2: SetAssocCache::new(cfg.l2_bytes, cfg.l2_ways, cfg.line_bytes),
            line: cfg.line_bytes,
            stats: CacheStats::default(),
            seq: 0,
        })
    }

    pub fn stats(&self) -> &CacheStats {
        &self.stats
    }

    fn writeback_to_l2(&mut self, key: u64, icount: u64, out: &mut Vec<LlcRequest>) {
        if self.l2.lookup(key, true) {
            return;
        }
        if let Some((victim, true)) = self.l2.fill(key, true) {
            self.emit_writeback(victim, icount, out);
        }
    }

    fn emit_writeback(&mut self, key: u64, icount: u64, out: &mut Vec<LlcRequest>) {
        let (enclave, vaddr) = key_parts(key, self.line);
        self.seq += 1;
        self.stats.writebacks += 1;
        out.push(LlcRequest {
            op: AccessKind::Write,
            enclave,
            vaddr,
            icount,
            payload: Some(writeback_payload(self.seq, enclave, vaddr)),
        });
    }

    pub fn access(&mut self, r: &TraceRecord, out: &mut Vec<LlcRequest>) {
        self.stats.accesses += 1;
        self.stats.instructions = self.stats.instructions.max(r.icount);
        if r.vaddr & SCRATCH_VADDR_BIT != 0 {
            // Uncached shared memory.
            self.seq += 1;
            out.push(LlcRequest {
                op: r.op,
                enclave: r.enclave,
                vaddr: r.vaddr / self.line * self.line,
                icount: r.icount,
                payload: (r.op == AccessKind::Write).then(|| writeback_payload(self.seq, r.enclave, r.vaddr)),
            });
            return;
        }
        let key = line_key(r.enclave, r.vaddr, self.line);
        let write = r.op == AccessKind::Write;
        if self.l1.lookup(key, write) {
            self.stats.l1_hits += 1;
            return;
        }
        self.stats.l1_misses += 1;
        if self.l2.lookup(key, false) {
            self.stats.l2_hits += 1;
        } else {
            self.stats.l2_misses += 1;
            out.push(LlcRequest {
                op: AccessKind::Read,
                enclave: r.enclave,
                vaddr: r.vaddr / self.line * self.line,
                icount: r.icount,
                payload: None,
            });
            if let Some((victim, true)) = self.l2.fill(key, false) {
                self.emit_writeback(victim, r.icount, out);
            }
        }
        if let Some((victim, true)) = self.l1.fill(key, write) {
            self.writeback_to_l2(victim, r.icount, out);
        }
    }
}

/// Runs a trace through the hierarchy and returns the memory-side stream.
pub fn llc_filter(records: &[TraceRecord], cfg: &CacheConfig) -> Result<(Vec<LlcRequest>, CacheStats)> {
    let mut h = CacheHierarchy::new(cfg)?;
    let mut out = Vec::new();
    for r in records {
        h.access(r, &mut out);
    }
    Ok((out, h.stats.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    #[test]
    fn parse_format() {
        let t = parse_trace("# header\nR 0x1000 1 100\nW 2000 2 100 # tail\n\n".as_bytes()).unwrap();
        assert_eq!(
            t[0],
            TraceRecord {
                op: AccessKind::Read,
                vaddr: 0x1000,
                enclave: 1,
                icount: 100
            }
        );
        assert_eq!(t[1].op, AccessKind::Write);
        assert_eq!(t[1].vaddr, 0x2000);
        assert!(parse_trace("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn parse_errors_carry_line() {
        match parse_trace("R 0x10 1 100\nR 0x20 1 99\n".as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_trace("R 0x10 1\n".as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert!(parse_trace("X 0x10 1 1\n".as_bytes()).is_err());
        assert!(parse_trace("R zz 1 1\n".as_bytes()).is_err());
    }

    #[test]
    fn sequential_generation() {
        let spec = SyntheticSpec {
            pattern: Pattern::Sequential,
            footprint: 8192,
            accesses: 128,
            ..Default::default()
        };
        let t = generate(&spec).unwrap();
        let addrs: Vec<u64> = t.iter().map(|r| r.vaddr).collect();
        assert_eq!(addrs, (0..128).map(|i| i * 64).collect::<Vec<_>>());
        assert_eq!(*addrs.last().unwrap(), 8128);
    }

    #[test]
    fn generation_deterministic_and_bounded() {
        for pattern in [
            Pattern::UniformRandom,
            Pattern::Zipf { s: 1.0 },
            Pattern::Strided { stride: 4160 },
            Pattern::PointerChase,
        ] {
            let spec = SyntheticSpec {
                pattern,
                footprint: 1 << 20,
                accesses: 3000,
                ..Default::default()
            };
            let a = generate(&spec).unwrap();
            assert_eq!(a, generate(&spec).unwrap());
            assert!(a.iter().all(|r| r.vaddr < spec.footprint && r.vaddr % 64 == 0));
            assert!(a.windows(2).all(|w| w[0].icount <= w[1].icount));
        }
    }

    #[test]
    fn pointer_chase_visits_every_line_once() {
        let spec = SyntheticSpec {
            pattern: Pattern::PointerChase,
            footprint: 64 * 1024,
            accesses: 1024,
            ..Default::default()
        };
        let t = generate(&spec).unwrap();
        let mut seen: Vec<u64> = t.iter().map(|r| r.vaddr).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 1024);
    }

    #[test]
    fn round_trip_plain_and_gzip() {
        let dir = std::env::temp_dir().join(format!("secscale-trace-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let t = generate(&SyntheticSpec {
            accesses: 500,
            ..Default::default()
        })
        .unwrap();
        for name in ["t.txt", "t.txt.gz"] {
            let p = dir.join(name);
            write_trace_file(&p, &t).unwrap();
            assert_eq!(read_trace_file(&p).unwrap(), t);
        }
        let raw = std::fs::read(dir.join("t.txt.gz")).unwrap();
        assert_eq!(&raw[..2], &[0x1f, 0x8b]);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn repeated_line_misses_once() {
        let t: Vec<TraceRecord> = (0..100)
            .map(|i| TraceRecord {
                op: AccessKind::Read,
                vaddr: 0x4000,
                enclave: 1,
                icount: i,
            })
            .collect();
        let (out, s) = llc_filter(&t, &CacheConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(s.l2_misses, 1);
    }

    #[test]
    fn small_footprint_warms_up() {
        let spec = SyntheticSpec {
            footprint: 1 << 20,
            accesses: 600_000,
            read_fraction: 1.0,
            ..Default::default()
        };
        let t = generate(&spec).unwrap();
        let (warm, _) = llc_filter(&t[..400_000], &CacheConfig::default()).unwrap();
        let (all, _) = llc_filter(&t, &CacheConfig::default()).unwrap();
        assert!(warm.len() <= 16384);
        assert_eq!(all.len(), warm.len(), "no misses after warmup");
    }

    /// Reference cache: per-set recency queue, most recent at the back.
    struct RefCache {
        sets: Vec<VecDeque<(u64, bool)>>,
        ways: usize,
    }

    impl RefCache {
        fn new(bytes: u64, ways: usize) -> Self {
            let n = (bytes / 64 / ways as u64) as usize;
            Self {
                sets: vec![VecDeque::new(); n],
                ways,
            }
        }
        fn touch(&mut self, line: u64, dirty: bool) -> bool {
            let n = self.sets.len() as u64;
            let q = &mut self.sets[(line % n) as usize];
            if let Some(p) = q.iter().position(|e| e.0 == line) {
                let mut e = q.remove(p).unwrap();
                e.1 |= dirty;
                q.push_back(e);
                true
            } else {
                false
            }
        }
        fn insert(&mut self, line: u64, dirty: bool) -> Option<(u64, bool)> {
            let n = self.sets.len() as u64;
            let ways = self.ways;
            let q = &mut self.sets[(line % n) as usize];
            let v = if q.len() == ways { q.pop_front() } else { None };
            q.push_back((line, dirty));
            v
        }
    }

    #[test]
    fn llc_misses_match_reference_model() {
        let cfg = CacheConfig {
            l1_bytes: 4096,
            l1_ways: 4,
            l2_bytes: 32768,
            l2_ways: 8,
            line_bytes: 64,
        };
        let spec = SyntheticSpec {
            footprint: 256 * 1024,
            accesses: 50_000,
            read_fraction: 0.6,
            seed: 44,
            ..Default::default()
        };
        let t = generate(&spec).unwrap();
        let (out, stats) = llc_filter(&t, &cfg).unwrap();
        let mut l1 = RefCache::new(cfg.l1_bytes, cfg.l1_ways);
        let mut l2 = RefCache::new(cfg.l2_bytes, cfg.l2_ways);
        let (mut misses, mut wbs) = (0u64, 0u64);
        for r in &t {
            let line = ((r.enclave as u64) << 48) ^ (r.vaddr / 64);
            let w = r.op == AccessKind::Write;
            if l1.touch(line, w) {
                continue;
            }
            if !l2.touch(line, false) {
                misses += 1;
                if let Some((_, true)) = l2.insert(line, false) {
                    wbs += 1;
                }
            }
            if let Some((v, true)) = l1.insert(line, w) {
                if !l2.touch(v, true) {
                    if let Some((_, true)) = l2.insert(v, true) {
                        wbs += 1;
                    }
                }
            }
        }
        assert_eq!(stats.l2_misses, misses);
        assert_eq!(stats.writebacks, wbs);
        assert_eq!(out.len() as u64, misses + wbs);
    }
}
