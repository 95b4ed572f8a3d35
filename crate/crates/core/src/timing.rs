// SPDX-License-Identifier: Apache-2.0

//! Cycle accounting.
//!
//! A run has one critical-path clock and one background lane. Critical
//! charges advance the clock. Background charges are queued on the lane,
//! starting no earlier than the current clock, and cost nothing visible
//! unless something later has to wait for the lane to catch up.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Why a DRAM access happened.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessCause {
    Data,
    /// Counter-tree nodes and EPC data MACs.
    Merkle,
    Forest,
    KeyTable,
}

impl AccessCause {
    pub const ALL: [AccessCause; 4] = [
        AccessCause::Data,
        AccessCause::Merkle,
        AccessCause::Forest,
        AccessCause::KeyTable,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// DRAM traffic and crypto work tallied by one operation.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meter {
    pub reads: [u64; 4],
    pub writes: [u64; 4],
    pub ctr_ops: u64,
    pub ecb_ops: u64,
    /// Bytes pushed through the MAC engine.
    pub mac_bytes: u64,
}

impl Meter {
    pub fn read(&mut self, cause: AccessCause) {
        self.reads[cause.index()] += 1;
    }

    pub fn write(&mut self, cause: AccessCause) {
        self.writes[cause.index()] += 1;
    }

    pub fn accesses(&self, cause: AccessCause) -> u64 {
        self.reads[cause.index()] + self.writes[cause.index()]
    }

    pub fn total_reads(&self) -> u64 {
        self.reads.iter().sum()
    }

    pub fn total_accesses(&self) -> u64 {
        self.reads.iter().chain(self.writes.iter()).sum()
    }

    pub fn absorb(&mut self, other: &Meter) {
        for i in 0..4 {
            self.reads[i] += other.reads[i];
            self.writes[i] += other.writes[i];
        }
        self.ctr_ops += other.ctr_ops;
        self.ecb_ops += other.ecb_ops;
        self.mac_bytes += other.mac_bytes;
    }

    /// Difference `self - earlier`, for metering a span of work.
    pub fn since(&self, earlier: &Meter) -> Meter {
        let mut d = Meter::default();
        for i in 0..4 {
            d.reads[i] = self.reads[i] - earlier.reads[i];
            d.writes[i] = self.writes[i] - earlier.writes[i];
        }
        d.ctr_ops = self.ctr_ops - earlier.ctr_ops;
        d.ecb_ops = self.ecb_ops - earlier.ecb_ops;
        d.mac_bytes = self.mac_bytes - earlier.mac_bytes;
        d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    /// Latency of one isolated DRAM access.
    pub dram_access_cycles: u64,
    /// Occupancy of one 64-byte transfer inside a streamed page move.
    pub dram_burst_cycles: u64,
    pub ctr_crypt_cycles: u64,
    pub ecb_crypt_cycles: u64,
    pub mac_compute_cycles: u64,
    /// Throughput cost of one 64-byte block through a pipelined cipher.
    pub crypto_stream_cycles: u64,
    pub sgx_fault_penalty: u64,
    pub enclave_enter_exit: u64,
    pub penglai_mmt_miss_penalty: u64,
    pub instruction_cycles: u64,
    pub core_clock_ghz: f64,
    /// MAC verification throughput; `0` derives it from `mvc_gbps`/`mvc_clock_ghz`.
    pub mvc_bytes_per_cycle: u64,
    pub mvc_gbps: f64,
    pub mvc_clock_ghz: f64,
    /// Additional named events, charged with [`EventKind::Named`].
    pub extra: BTreeMap<String, u64>,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            dram_access_cycles: 100,
            dram_burst_cycles: 8,
            ctr_crypt_cycles: 40,
            ecb_crypt_cycles: 40,
            mac_compute_cycles: 40,
            crypto_stream_cycles: 4,
            sgx_fault_penalty: 40_000,
            enclave_enter_exit: 30_000,
            penglai_mmt_miss_penalty: 400,
            instruction_cycles: 1,
            core_clock_ghz: 3.6,
            mvc_bytes_per_cycle: 0,
            mvc_gbps: 40.0,
            mvc_clock_ghz: 5.15,
            extra: BTreeMap::new(),
        }
    }
}

/// Converts a hashing throughput to whole bytes per core cycle (at least 1).
pub fn mvc_rate(gbps: f64, core_clock_ghz: f64) -> u64 {
    let bytes_per_ns = gbps / 8.0;
    ((bytes_per_ns / core_clock_ghz).round() as u64).max(1)
}

impl LatencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.core_clock_ghz > 0.0) {
            return Err(Error::Config("latency.core_clock_ghz must be positive".into()));
        }
        if self.mvc_bytes_per_cycle == 0 && !(self.mvc_gbps > 0.0) {
            return Err(Error::Config("latency.mvc_gbps must be positive".into()));
        }
        Ok(())
    }

    /// Effective verifier rate. The quoted throughput is given at a
    /// different clock; converting it to bytes per second makes it
    /// independent of that clock before rescaling to the core clock.
    pub fn mvc_bytes_per_cycle(&self) -> u64 {
        if self.mvc_bytes_per_cycle > 0 {
            self.mvc_bytes_per_cycle
        } else {
            mvc_rate(self.mvc_gbps, self.core_clock_ghz)
        }
    }

    pub fn cycles(&self, kind: &EventKind) -> Result<u64> {
        Ok(match kind {
            EventKind::DramAccess => self.dram_access_cycles,
            EventKind::DramBurst => self.dram_burst_cycles,
            EventKind::CtrCrypt => self.ctr_crypt_cycles,
            EventKind::EcbCrypt => self.ecb_crypt_cycles,
            EventKind::MacCompute => self.mac_compute_cycles,
            EventKind::CryptoStream => self.crypto_stream_cycles,
            EventKind::SgxFault => self.sgx_fault_penalty,
            EventKind::EnclaveTransition => self.enclave_enter_exit,
            EventKind::PenglaiMount => self.penglai_mmt_miss_penalty,
            EventKind::Instruction => self.instruction_cycles,
            EventKind::MacBytes => 1,
            EventKind::Named(name) => *self
                .extra
                .get(name)
                .ok_or_else(|| Error::UnknownEvent(name.clone()))?,
        })
    }

    /// Cycles to hash `bytes` at the verifier rate.
    pub fn mac_cycles(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.mvc_bytes_per_cycle())
    }

    /// Latency-bound cost of metered work on the critical path.
    pub fn critical_cost(&self, m: &Meter) -> u64 {
        m.total_accesses() * self.dram_access_cycles
            + m.ctr_ops * self.ctr_crypt_cycles
            + m.ecb_ops * self.ecb_crypt_cycles
            + self.mac_cycles(m.mac_bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    DramAccess,
    DramBurst,
    CtrCrypt,
    EcbCrypt,
    MacCompute,
    CryptoStream,
    SgxFault,
    EnclaveTransition,
    PenglaiMount,
    Instruction,
    /// One byte through the MAC verifier (count is bytes; cost is derived).
    MacBytes,
    Named(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleStats {
    /// Cycles charged directly to the critical path (including instructions).
    pub critical_cycles: u64,
    /// Cycles of work queued on the background lane.
    pub background_cycles: u64,
    /// Cycles the critical path waited for the background lane.
    pub stall_cycles: u64,
    pub instructions: u64,
    /// DRAM accesses by [`AccessCause`].
    pub dram_by_cause: [u64; 4],
}

impl CycleStats {
    pub fn visible_cycles(&self) -> u64 {
        self.critical_cycles + self.stall_cycles
    }

    pub fn dram_total(&self) -> u64 {
        self.dram_by_cause.iter().sum()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Timeline {
    now: u64,
    lane_free_at: u64,
    stats: CycleStats,
}

impl Timeline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn lane_free_at(&self) -> u64 {
        self.lane_free_at
    }

    pub fn stats(&self) -> &CycleStats {
        &self.stats
    }

    pub fn charge(&mut self, cfg: &LatencyConfig, kind: &EventKind, count: u64, critical: bool) -> Result<&CycleStats> {
        let cycles = if *kind == EventKind::MacBytes {
            cfg.mac_cycles(count)
        } else {
            cfg.cycles(kind)? * count
        };
        if *kind == EventKind::Instruction {
            self.stats.instructions += count;
        }
        if critical {
            self.critical(cycles);
        } else {
            self.background(cycles);
        }
        Ok(&self.stats)
    }

    pub fn critical(&mut self, cycles: u64) {
        self.now += cycles;
        self.stats.critical_cycles += cycles;
    }

    pub fn instructions(&mut self, cfg: &LatencyConfig, n: u64) {
        self.stats.instructions += n;
        self.critical(n * cfg.instruction_cycles);
    }

    /// Queues work on the lane; returns its completion cycle.
    pub fn background(&mut self, cycles: u64) -> u64 {
        self.background_from(self.now, cycles).1
    }

    /// Queues work that cannot start before `ready_at`; returns (start, end).
    pub fn background_from(&mut self, ready_at: u64, cycles: u64) -> (u64, u64) {
        let start = self.lane_free_at.max(ready_at).max(self.now);
        self.lane_free_at = start + cycles;
        self.stats.background_cycles += cycles;
        (start, self.lane_free_at)
    }

    /// Like [`Timeline::background_from`] but without the "not before now"
    /// clamp; used when replaying lane work lazily after the clock moved on.
    pub fn lane_at(&mut self, ready_at: u64, cycles: u64) -> (u64, u64) {
        let start = self.lane_free_at.max(ready_at);
        self.lane_free_at = start + cycles;
        self.stats.background_cycles += cycles;
        (start, self.lane_free_at)
    }

    /// Blocks the critical path until cycle `t`.
    pub fn stall_until(&mut self, t: u64) -> u64 {
        if t > self.now {
            let s = t - self.now;
            self.stats.stall_cycles += s;
            self.now = t;
            s
        } else {
            0
        }
    }

    /// Waits for all queued background work.
    pub fn drain(&mut self) -> u64 {
        self.stall_until(self.lane_free_at)
    }

    pub fn record_dram(&mut self, m: &Meter) {
        for c in AccessCause::ALL {
            self.stats.dram_by_cause[c.index()] += m.accesses(c);
        }
    }

    pub fn record_dram_count(&mut self, cause: AccessCause, n: u64) {
        self.stats.dram_by_cause[cause.index()] += n;
    }
}
