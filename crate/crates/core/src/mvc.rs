// SPDX-License-Identifier: Apache-2.0

//! Deferred page verification.
//!
//! Jobs are queued when a page finishes loading and verified in FIFO order
//! by a unit that hashes at a fixed byte rate. Forest node fetches overlap
//! with hashing. Execution continues meanwhile; a failed job raises a
//! catastrophic failure that records how many instructions ran
//! speculatively past the enqueue point.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::address_space::{EmulatedDram, PAGE_SIZE};
use crate::crypto::PageKey;
use crate::error::{Error, Result};
use crate::mac_forest::{MacForest, TopLevelStore, VerifyItem};
use crate::timing::{LatencyConfig, Meter};

#[derive(Clone, Debug)]
pub struct VerificationJob {
    /// eEPC-relative page index.
    pub index: u64,
    pub key: PageKey,
    /// The exact bytes that were decrypted and installed.
    pub bytes: Vec<u8>,
    /// Cycle the last block arrived; the job cannot start earlier.
    pub ready_at: u64,
    pub enqueue_cycle: u64,
    pub enqueue_icount: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Retired {
    pub index: u64,
    pub start: u64,
    pub finish: u64,
    pub dram_accesses: u64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MvcStats {
    pub enqueued: u64,
    pub retired: u64,
    pub batches: u64,
    pub grouped_batches: u64,
    pub busy_cycles: u64,
    pub max_depth: usize,
    pub max_lag_instructions: u64,
}

/// Everything a verification touches.
pub struct VerifyCtx<'a> {
    pub forest: &'a mut MacForest,
    pub dram: &'a mut EmulatedDram,
    pub top: &'a mut dyn TopLevelStore,
    pub meter: &'a mut Meter,
    pub latency: &'a LatencyConfig,
}

#[derive(Clone, Debug)]
pub struct Mvc {
    queue: VecDeque<VerificationJob>,
    free_at: u64,
    grouped: bool,
    max_outstanding: Option<usize>,
    stats: MvcStats,
}

impl Mvc {
    pub fn new(grouped: bool, max_outstanding: Option<usize>) -> Self {
        Self {
            queue: VecDeque::new(),
            free_at: 0,
            grouped,
            max_outstanding,
            stats: MvcStats::default(),
        }
    }

    pub fn depth(&self) -> usize {
        self.queue.len()
    }

    pub fn is_full(&self) -> bool {
        self.max_outstanding.is_some_and(|m| self.queue.len() >= m)
    }

    pub fn stats(&self) -> &MvcStats {
        &self.stats
    }

    /// Cycle at which the unit finishes its last retired batch.
    pub fn free_at(&self) -> u64 {
        self.free_at
    }

    pub fn has_job_for(&self, index: u64) -> bool {
        self.queue.iter().any(|j| j.index == index)
    }

    pub fn enqueue(&mut self, job: VerificationJob) -> usize {
        self.queue.push_back(job);
        self.stats.enqueued += 1;
        self.stats.max_depth = self.stats.max_depth.max(self.queue.len());
        self.queue.len()
    }

    /// Verification latency of a batch: hashing the pages at the verifier
    /// rate, overlapped with its forest fetches.
    pub fn batch_cycles(latency: &LatencyConfig, pages: usize, dram_accesses: u64) -> u64 {
        latency
            .mac_cycles(pages as u64 * PAGE_SIZE)
            .max(dram_accesses * latency.dram_access_cycles)
    }

    fn run_head(&mut self, icount: u64, ctx: &mut VerifyCtx<'_>) -> Result<Retired> {
        let head = self.queue.front().expect("non-empty queue");
        let start = self.free_at.max(head.ready_at);
        let region = ctx.forest.region_of(head.index);
        let mut n = 1;
        if self.grouped {
            while n < self.queue.len() {
                let j = &self.queue[n];
                if j.ready_at > start || ctx.forest.region_of(j.index) != region {
                    break;
                }
                n += 1;
            }
        }
        let jobs: Vec<VerificationJob> = self.queue.drain(..n).collect();
        let items: Vec<VerifyItem<'_>> = jobs
            .iter()
            .map(|j| VerifyItem {
                index: j.index,
                key: j.key,
                bytes: &j.bytes,
            })
            .collect();
        let lag = icount.saturating_sub(jobs[0].enqueue_icount);
        self.stats.max_lag_instructions = self.stats.max_lag_instructions.max(lag);
        let out = match ctx.forest.verify_pages(ctx.dram, ctx.top, &items, ctx.meter) {
            Ok(o) => o,
            Err(Error::CatastrophicFailure(mut v)) => {
                let job = v
                    .page
                    .and_then(|p| jobs.iter().find(|j| p == j.index + ctx.dram.layout().first_eepc_page().0))
                    .unwrap_or(&jobs[0]);
                v.speculative_instructions = icount.saturating_sub(job.enqueue_icount);
                return Err(Error::CatastrophicFailure(v));
            }
            Err(e) => return Err(e),
        };
        let cycles = Self::batch_cycles(ctx.latency, n, out.dram_accesses);
        self.free_at = start + cycles;
        self.stats.busy_cycles += cycles;
        self.stats.retired += n as u64;
        self.stats.batches += 1;
        if n > 1 {
            self.stats.grouped_batches += 1;
        }
        Ok(Retired {
            index: jobs[0].index,
            start,
            finish: self.free_at,
            dram_accesses: out.dram_accesses,
            batch_size: n,
        })
    }

    /// Retires every job whose verification completes by cycle `now`.
    pub fn tick(&mut self, now: u64, icount: u64, ctx: &mut VerifyCtx<'_>) -> Result<Vec<Retired>> {
        let mut done = Vec::new();
        while let Some(head) = self.queue.front() {
            let start = self.free_at.max(head.ready_at);
            if start + ctx.latency.mac_cycles(PAGE_SIZE) > now {
                break;
            }
            done.push(self.run_head(icount, ctx)?);
        }
        Ok(done)
    }

    /// Retires the queue up to and including the job for `index`; returns
    /// the cycle it finished, or `None` if no such job was pending.
    pub fn retire_through(&mut self, index: u64, icount: u64, ctx: &mut VerifyCtx<'_>) -> Result<Option<u64>> {
        if !self.has_job_for(index) {
            return Ok(None);
        }
        loop {
            let hit = self.queue.iter().position(|j| j.index == index);
            let Some(pos) = hit else {
                return Ok(Some(self.free_at));
            };
            let r = self.run_head(icount, ctx)?;
            if pos < r.batch_size {
                return Ok(Some(r.finish));
            }
        }
    }

    /// Retires the oldest job regardless of the clock; returns its finish.
    pub fn retire_one(&mut self, icount: u64, ctx: &mut VerifyCtx<'_>) -> Result<Option<u64>> {
        if self.queue.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.run_head(icount, ctx)?.finish))
    }

    /// Retires everything; returns the cycle the unit goes idle.
    pub fn drain(&mut self, icount: u64, ctx: &mut VerifyCtx<'_>) -> Result<u64> {
        while !self.queue.is_empty() {
            self.run_head(icount, ctx)?;
        }
        Ok(self.free_at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address_space::{MemoryLayout, PhysAddr, KIB, MIB};
    use crate::crypto::{compose_page_key, page_mac, TcbSecrets};
    use crate::error::ViolationKind;
    use crate::mac_forest::{forest_lower_bytes, DramTopStore, ForestConfig};
    use crate::timing::AccessCause;

    struct Rig {
        dram: EmulatedDram,
        forest: MacForest,
        top: DramTopStore,
        meter: Meter,
        lat: LatencyConfig,
    }

    impl Rig {
        fn new() -> Self {
            let cfg = ForestConfig::default();
            let lower = forest_lower_bytes(1024, &cfg);
            let layout = MemoryLayout::new(64 * MIB, MIB, 0, lower + 64 * KIB).unwrap();
            let forest = MacForest::new(
                &cfg,
                TcbSecrets::derive(1).ssk,
                PhysAddr(layout.forest_base),
                layout.forest_size,
                layout.eepc_base / PAGE_SIZE,
                1024,
            )
            .unwrap();
            Self {
                top: DramTopStore {
                    base: PhysAddr(layout.forest_base + lower),
                },
                dram: EmulatedDram::new(layout),
                forest,
                meter: Meter::default(),
                lat: LatencyConfig::default(),
            }
        }

        fn ctx(&mut self) -> VerifyCtx<'_> {
            VerifyCtx {
                forest: &mut self.forest,
                dram: &mut self.dram,
                top: &mut self.top,
                meter: &mut self.meter,
                latency: &self.lat,
            }
        }

        fn install(&mut self, index: u64, fill: u8) -> VerificationJob {
            let k = compose_page_key(1, 1, 100 + index as u128, index).unwrap();
            let bytes = vec![fill; PAGE_SIZE as usize];
            let mut m = Meter::default();
            self.forest
                .update_on_evict(&mut self.dram, &mut self.top, index, page_mac(&k, &bytes), None, &mut m)
                .unwrap();
            VerificationJob {
                index,
                key: k,
                bytes,
                ready_at: 0,
                enqueue_cycle: 0,
                enqueue_icount: 0,
            }
        }
    }

    #[test]
    fn rate_and_retirement() {
        let mut r = Rig::new();
        assert_eq!(r.lat.mvc_bytes_per_cycle(), 1);
        let mut mvc = Mvc::new(true, None);
        assert!(mvc.tick(10_000, 0, &mut r.ctx()).unwrap().is_empty());
        let job = r.install(3, 7);
        assert_eq!(mvc.enqueue(job), 1);
        assert!(mvc.tick(4095, 0, &mut r.ctx()).unwrap().is_empty());
        let done = mvc.tick(4096, 0, &mut r.ctx()).unwrap();
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].finish, 4096);
        assert_eq!(mvc.depth(), 0);
    }

    #[test]
    fn fifo_order() {
        let mut r = Rig::new();
        let mut mvc = Mvc::new(false, None);
        let a = r.install(1, 1);
        let b = r.install(300, 2);
        mvc.enqueue(a);
        mvc.enqueue(b);
        let done = mvc.tick(1 << 20, 0, &mut r.ctx()).unwrap();
        assert_eq!(done.iter().map(|d| d.index).collect::<Vec<_>>(), vec![1, 300]);
        assert!(done[1].start >= done[0].finish);
    }

    #[test]
    fn grouped_job_counts_upper_levels_once() {
        let mut r = Rig::new();
        r.forest = MacForest::new(
            &ForestConfig {
                top_cache_entries: 0,
                ..Default::default()
            },
            TcbSecrets::derive(1).ssk,
            PhysAddr(r.dram.layout().forest_base),
            r.dram.layout().forest_size,
            r.dram.layout().eepc_base / PAGE_SIZE,
            1024,
        )
        .unwrap();
        let run = |grouped: bool, r: &mut Rig| {
            let mut mvc = Mvc::new(grouped, None);
            let a = r.install(1, 1);
            let b = r.install(2, 2);
            mvc.enqueue(a);
            mvc.enqueue(b);
            let before = r.meter.accesses(AccessCause::Forest);
            mvc.drain(0, &mut r.ctx()).unwrap();
            r.meter.accesses(AccessCause::Forest) - before
        };
        let separate = run(false, &mut r);
        let grouped = run(true, &mut r);
        assert!(grouped < separate, "{grouped} vs {separate}");
    }

    #[test]
    fn tampered_page_fails_with_speculation_count() {
        let mut r = Rig::new();
        let mut mvc = Mvc::new(true, None);
        let mut job = r.install(5, 5);
        job.bytes[100] ^= 1;
        job.enqueue_icount = 1000;
        mvc.enqueue(job);
        let e = mvc.drain(1500, &mut r.ctx()).unwrap_err();
        let v = e.violation().unwrap();
        assert_eq!(v.kind, ViolationKind::ForestLeaf);
        assert_eq!(v.speculative_instructions, 500);
        assert_eq!(v.page, Some(r.dram.layout().first_eepc_page().0 + 5));
    }

    #[test]
    fn retire_through_and_capacity() {
        let mut r = Rig::new();
        let mut mvc = Mvc::new(false, Some(2));
        let a = r.install(1, 1);
        let b = r.install(2, 2);
        mvc.enqueue(a);
        assert!(!mvc.is_full());
        mvc.enqueue(b);
        assert!(mvc.is_full());
        assert_eq!(mvc.retire_through(7, 0, &mut r.ctx()).unwrap(), None);
        let fin = mvc.retire_through(2, 0, &mut r.ctx()).unwrap().unwrap();
        assert_eq!(fin, 2 * 4096);
        assert_eq!(mvc.depth(), 0);
    }
}
