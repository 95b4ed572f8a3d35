// SPDX-License-Identifier: Apache-2.0

//! Integrity forest for the eEPC.
//!
//! Each 4 KiB page has an 8-byte leaf MAC keyed by its page key. Leaves are
//! grouped (16 per node by default) into intermediate MACs, which are
//! grouped again (8 per node) into one top-level MAC per subtree region.
//! Leaves and intermediate levels live in the ForestStorage region of DRAM;
//! the top level lives in protected EPC pages behind a [`TopLevelStore`].
//! Upper MACs are keyed by the SSK and bound to their node position.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::address_space::{EmulatedDram, PhysAddr, BLOCK_SIZE, PAGE_SIZE};
use crate::crypto::{level_mac, page_mac, Mac, NodeRef, PageKey, Ssk, MAC_BYTES};
use crate::epc_merkle::EpcStore;
use crate::error::{Error, Result, SecurityViolation, ViolationKind};
use crate::timing::{AccessCause, Meter};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    /// Levels including leaves and the top level.
    pub levels: u32,
    /// Fan-in of each grouping step, bottom up; `levels - 1` entries.
    pub arities: Vec<u32>,
    /// Entries in the TCB top-level MAC cache; 0 disables it.
    pub top_cache_entries: usize,
    /// Merge consecutive evictions that share a subtree region.
    pub clubbing: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            arities: vec![16, 8],
            top_cache_entries: 8,
            clubbing: true,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config("forest.levels must be at least 2".into()));
        }
        if self.arities.len() != self.levels as usize - 1 {
            return Err(Error::Config(format!(
                "forest.arities needs {} entries for {} levels",
                self.levels - 1,
                self.levels
            )));
        }
        if self.arities.iter().any(|&a| a < 2) {
            return Err(Error::Config("forest arities must be at least 2".into()));
        }
        Ok(())
    }

    /// Pages covered by one top-level MAC.
    pub fn region_pages(&self) -> u64 {
        self.arities.iter().map(|&a| a as u64).product()
    }

    pub fn region_bytes(&self) -> u64 {
        self.region_pages() * PAGE_SIZE
    }

    /// MAC counts per level, leaves first, for `pages` pages.
    pub fn level_counts(&self, pages: u64) -> Vec<u64> {
        let mut v = vec![pages];
        for &a in &self.arities {
            let last = *v.last().unwrap();
            v.push(last.div_ceil(a as u64));
        }
        v
    }
}

/// Bytes of MAC storage over `total_size` bytes of memory, all levels.
pub fn forest_storage_bytes(total_size: u64, cfg: &ForestConfig) -> u64 {
    cfg.level_counts(total_size.div_ceil(PAGE_SIZE)).iter().sum::<u64>() * MAC_BYTES as u64
}

/// Bytes of the top level alone.
pub fn forest_top_bytes(total_size: u64, cfg: &ForestConfig) -> u64 {
    *cfg.level_counts(total_size.div_ceil(PAGE_SIZE)).last().unwrap() * MAC_BYTES as u64
}

/// DRAM bytes needed for the leaf and intermediate levels over `pages`,
/// padded to whole subtree regions.
pub fn forest_lower_bytes(pages: u64, cfg: &ForestConfig) -> u64 {
    let padded = pages.div_ceil(cfg.region_pages()) * cfg.region_pages();
    let counts = cfg.level_counts(padded);
    counts[..counts.len() - 1].iter().sum::<u64>() * MAC_BYTES as u64
}

pub fn subtree_region_of(page_index: u64, cfg: &ForestConfig) -> u64 {
    page_index / cfg.region_pages()
}

/// Backing store for top-level MACs.
pub trait TopLevelStore {
    fn read_top(&mut self, dram: &mut EmulatedDram, region: u64, meter: &mut Meter) -> Result<Mac>;
    fn write_top(&mut self, dram: &mut EmulatedDram, region: u64, mac: Mac, meter: &mut Meter) -> Result<()>;
}

/// Unprotected top-level array in DRAM. Used in tests and by callers that
/// protect the array by other means.
#[derive(Clone, Debug)]
pub struct DramTopStore {
    pub base: PhysAddr,
}

impl TopLevelStore for DramTopStore {
    fn read_top(&mut self, dram: &mut EmulatedDram, region: u64, meter: &mut Meter) -> Result<Mac> {
        let mut b = [0u8; MAC_BYTES];
        dram.read(self.base.offset(region * MAC_BYTES as u64), &mut b)?;
        meter.read(AccessCause::Forest);
        Ok(Mac::from_bytes(&b))
    }

    fn write_top(&mut self, dram: &mut EmulatedDram, region: u64, mac: Mac, meter: &mut Meter) -> Result<()> {
        dram.raw_write(self.base.offset(region * MAC_BYTES as u64), &mac.to_bytes())?;
        meter.write(AccessCause::Forest);
        Ok(())
    }
}

/// Top-level MACs packed 512 per page into the EPC pages that follow the
/// data slots.
impl EpcStore {
    fn top_position(&self, region: u64) -> Result<(u64, usize, usize)> {
        let l = self.layout();
        let byte = region * MAC_BYTES as u64;
        let page = byte / PAGE_SIZE;
        if page >= l.top_pages {
            return Err(Error::Layout(format!("top-level index {region} beyond EPC reservation")));
        }
        let in_page = byte % PAGE_SIZE;
        Ok((
            l.data_slots + page,
            (in_page / BLOCK_SIZE) as usize,
            (in_page % BLOCK_SIZE) as usize,
        ))
    }
}

impl TopLevelStore for EpcStore {
    fn read_top(&mut self, dram: &mut EmulatedDram, region: u64, meter: &mut Meter) -> Result<Mac> {
        let (p, b, off) = self.top_position(region)?;
        let blk = self.read_block(dram, p, b, AccessCause::Forest, meter)?;
        Ok(Mac::from_bytes(&blk[off..off + MAC_BYTES]))
    }

    fn write_top(&mut self, dram: &mut EmulatedDram, region: u64, mac: Mac, meter: &mut Meter) -> Result<()> {
        let (p, b, off) = self.top_position(region)?;
        let mut blk = self.read_block(dram, p, b, AccessCause::Forest, meter)?;
        blk[off..off + MAC_BYTES].copy_from_slice(&mac.to_bytes());
        self.write_block(dram, p, b, &blk, AccessCause::Forest, meter)
    }
}

/// Fully associative LRU cache of top-level MACs, held in the TCB.
#[derive(Clone, Debug)]
pub struct TopLevelMacCache {
    capacity: usize,
    entries: Vec<(u64, Mac, u64)>,
    clock: u64,
    pub hits: u64,
    pub misses: u64,
}

impl TopLevelMacCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            clock: 0,
            hits: 0,
            misses: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&mut self, region: u64) -> Option<Mac> {
        self.clock += 1;
        let now = self.clock;
        match self.entries.iter_mut().find(|e| e.0 == region) {
            Some(e) => {
                e.2 = now;
                self.hits += 1;
                Some(e.1)
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    pub fn peek(&self, region: u64) -> Option<Mac> {
        self.entries.iter().find(|e| e.0 == region).map(|e| e.1)
    }

    pub fn put(&mut self, region: u64, mac: Mac) {
        if self.capacity == 0 {
            return;
        }
        self.clock += 1;
        let now = self.clock;
        if let Some(e) = self.entries.iter_mut().find(|e| e.0 == region) {
            e.1 = mac;
            e.2 = now;
            return;
        }
        if self.entries.len() == self.capacity {
            let lru = (0..self.entries.len()).min_by_key(|&i| self.entries[i].2).unwrap();
            self.entries.swap_remove(lru);
        }
        self.entries.push((region, mac, now));
    }

    pub fn regions(&self) -> impl Iterator<Item = (u64, Mac)> + '_ {
        self.entries.iter().map(|e| (e.0, e.1))
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    /// Forest-region and top-level accesses incurred by this verification.
    pub dram_accesses: u64,
    pub cache_hit: bool,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateOutcome {
    pub dram_accesses: u64,
    /// Forest lines plus top-level entries written.
    pub node_writes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestStats {
    pub verified_pages: u64,
    pub verify_batches: u64,
    pub grouped_verifications: u64,
    pub max_verify_accesses_per_page: u64,
    pub updated_pages: u64,
    pub update_batches: u64,
    pub clubbed_updates: u64,
    pub top_cache_lookups: u64,
    pub top_cache_hits: u64,
    pub regions_initialized: u64,
}

/// A page to verify: eEPC-relative index, its key, and the exact bytes
/// that were consumed.
#[derive(Copy, Clone, Debug)]
pub struct VerifyItem<'a> {
    pub index: u64,
    pub key: PageKey,
    pub bytes: &'a [u8],
}

#[derive(Clone, Debug)]
pub struct MacForest {
    cfg: ForestConfig,
    ssk: Ssk,
    first_page: u64,
    pages: u64,
    base: PhysAddr,
    /// Byte offsets of the stored (non-top) levels.
    offsets: Vec<u64>,
    counts: Vec<u64>,
    initialized: Vec<bool>,
    cache: TopLevelMacCache,
    zero_leaf: Mac,
    stats: ForestStats,
}

impl MacForest {
    /// `first_page` is the physical page of eEPC index 0 and is only used to
    /// label violations.
    pub fn new(cfg: &ForestConfig, ssk: Ssk, base: PhysAddr, storage_bytes: u64, first_page: u64, pages: u64) -> Result<Self> {
        cfg.validate()?;
        let regions = pages.div_ceil(cfg.region_pages());
        let counts = cfg.level_counts(regions * cfg.region_pages());
        let mut offsets = Vec::new();
        let mut acc = 0;
        for c in &counts[..counts.len() - 1] {
            offsets.push(acc);
            acc += c * MAC_BYTES as u64;
        }
        if acc > storage_bytes {
            return Err(Error::Layout(format!(
                "forest needs {acc} bytes of storage, region has {storage_bytes}"
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            ssk,
            first_page,
            pages,
            base,
            offsets,
            counts,
            initialized: vec![false; regions as usize],
            cache: TopLevelMacCache::new(cfg.top_cache_entries),
            zero_leaf: page_mac(&PageKey::NULL, &[0u8; PAGE_SIZE as usize]),
            stats: ForestStats::default(),
        })
    }

    pub fn config(&self) -> &ForestConfig {
        &self.cfg
    }

    pub fn pages(&self) -> u64 {
        self.pages
    }

    pub fn regions(&self) -> u64 {
        self.initialized.len() as u64
    }

    pub fn stats(&self) -> &ForestStats {
        &self.stats
    }

    pub fn cache(&self) -> &TopLevelMacCache {
        &self.cache
    }

    /// MAC of a never-written page.
    pub fn zero_leaf(&self) -> Mac {
        self.zero_leaf
    }

    pub fn region_of(&self, index: u64) -> u64 {
        subtree_region_of(index, &self.cfg)
    }

    pub fn is_initialized(&self, region: u64) -> bool {
        self.initialized[region as usize]
    }

    fn top_level(&self) -> usize {
        self.counts.len() - 1
    }

    fn arity(&self, level: usize) -> u64 {
        self.cfg.arities[level] as u64
    }

    /// DRAM address of the MAC at (`level`, `index`); levels below the top only.
    pub fn entry_addr(&self, level: usize, index: u64) -> PhysAddr {
        assert!(level < self.top_level());
        self.base.offset(self.offsets[level] + index * MAC_BYTES as u64)
    }

    /// Uncounted read of a stored MAC.
    pub fn peek_entry(&self, dram: &EmulatedDram, level: usize, index: u64) -> Result<Mac> {
        Ok(Mac::from_bytes(&dram.peek(self.entry_addr(level, index), MAC_BYTES)?))
    }

    fn check_index(&self, index: u64) -> Result<()> {
        if index >= self.pages {
            return Err(Error::WrongRegion {
                page: self.first_page + index,
                expected: "eEPC",
            });
        }
        Ok(())
    }

    fn violation(&self, kind: ViolationKind, index: u64) -> Error {
        SecurityViolation::new(kind, Some(self.first_page + index)).into()
    }

    fn mismatch_kind(&self, parent_level: usize) -> ViolationKind {
        if parent_level == self.top_level() {
            ViolationKind::ForestTop
        } else {
            ViolationKind::ForestIntermediate
        }
    }

    /// Line-granular read of child group `group` at `level`.
    fn read_group(&self, dram: &mut EmulatedDram, level: usize, group: u64, meter: &mut Meter) -> Result<Vec<Mac>> {
        let a = self.arity(level);
        let start = self.entry_addr(level, group * a).0;
        let end = start + a * MAC_BYTES as u64;
        let mut bytes = vec![0u8; (end - start) as usize];
        let mut at = start;
        while at < end {
            let line_end = ((at / BLOCK_SIZE) + 1) * BLOCK_SIZE;
            let stop = line_end.min(end);
            dram.read(PhysAddr(at), &mut bytes[(at - start) as usize..(stop - start) as usize])?;
            meter.read(AccessCause::Forest);
            at = stop;
        }
        Ok(bytes.chunks(MAC_BYTES).map(Mac::from_bytes).collect())
    }

    /// Writes the lines of a group that contain any of `changed` slots.
    fn write_group(
        &self,
        dram: &mut EmulatedDram,
        level: usize,
        group: u64,
        vals: &[Mac],
        changed: &BTreeSet<usize>,
        meter: &mut Meter,
    ) -> Result<u64> {
        let a = self.arity(level);
        let start = self.entry_addr(level, group * a).0;
        let mut lines: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
        for &slot in changed {
            let addr = start + slot as u64 * MAC_BYTES as u64;
            let e = lines.entry(addr / BLOCK_SIZE).or_insert((slot, slot));
            e.0 = e.0.min(slot);
            e.1 = e.1.max(slot);
        }
        let mut writes = 0;
        for (line, _) in lines {
            let lo = (line * BLOCK_SIZE).max(start);
            let hi = ((line + 1) * BLOCK_SIZE).min(start + a * MAC_BYTES as u64);
            let first = ((lo - start) / MAC_BYTES as u64) as usize;
            let last = ((hi - start) / MAC_BYTES as u64) as usize;
            let bytes: Vec<u8> = vals[first..last].iter().flat_map(|m| m.to_bytes()).collect();
            dram.raw_write(PhysAddr(lo), &bytes)?;
            meter.write(AccessCause::Forest);
            writes += 1;
        }
        Ok(writes)
    }

    fn parent_mac(&self, level: usize, group: u64, children: &[Mac], meter: &mut Meter) -> Result<Mac> {
        meter.mac_bytes += (children.len() * MAC_BYTES) as u64;
        level_mac(
            &self.ssk,
            NodeRef {
                level: (level + 1) as u8,
                index: group,
            },
            children,
            children.len(),
        )
    }

    /// Writes the all-untouched state of a region the first time it is used.
    fn ensure_init(&mut self, dram: &mut EmulatedDram, top: &mut dyn TopLevelStore, region: u64, meter: &mut Meter) -> Result<()> {
        if self.initialized[region as usize] {
            return Ok(());
        }
        let mut first = region * self.cfg.region_pages();
        let mut n = self.cfg.region_pages();
        let mut vals = vec![self.zero_leaf; n as usize];
        for level in 0..self.top_level() {
            let bytes: Vec<u8> = vals.iter().flat_map(|m| m.to_bytes()).collect();
            for (i, chunk) in bytes.chunks(BLOCK_SIZE as usize).enumerate() {
                dram.raw_write(self.entry_addr(level, first).offset(i as u64 * BLOCK_SIZE), chunk)?;
                meter.write(AccessCause::Forest);
            }
            let a = self.arity(level);
            let mut next = Vec::with_capacity((n / a) as usize);
            for (g, chunk) in vals.chunks(a as usize).enumerate() {
                next.push(self.parent_mac(level, first / a + g as u64, chunk, meter)?);
            }
            vals = next;
            first /= a;
            n /= a;
        }
        top.write_top(dram, region, vals[0], meter)?;
        self.cache.put(region, vals[0]);
        self.initialized[region as usize] = true;
        self.stats.regions_initialized += 1;
        Ok(())
    }

    /// Trusted top-level value for `region`, from the cache or the EPC.
    fn trusted_top(&mut self, dram: &mut EmulatedDram, top: &mut dyn TopLevelStore, region: u64, meter: &mut Meter) -> Result<(Mac, bool)> {
        self.stats.top_cache_lookups += 1;
        if let Some(m) = self.cache.get(region) {
            self.stats.top_cache_hits += 1;
            return Ok((m, true));
        }
        let m = top.read_top(dram, region, meter)?;
        self.cache.put(region, m);
        Ok((m, false))
    }

    /// Verifies a set of pages. Pages that share a subtree region are
    /// verified together and share the upper-level work.
    pub fn verify_pages(
        &mut self,
        dram: &mut EmulatedDram,
        top: &mut dyn TopLevelStore,
        items: &[VerifyItem<'_>],
        meter: &mut Meter,
    ) -> Result<VerifyOutcome> {
        let mut by_region: BTreeMap<u64, Vec<&VerifyItem<'_>>> = BTreeMap::new();
        for it in items {
            self.check_index(it.index)?;
            by_region.entry(self.region_of(it.index)).or_default().push(it);
        }
        let mut out = VerifyOutcome::default();
        for (region, group) in by_region {
            self.ensure_init(dram, top, region, meter)?;
            let start = meter.accesses(AccessCause::Forest);
            // Index at the current level -> (expected MAC, a page it covers).
            let mut cur: BTreeMap<u64, (Mac, u64)> = BTreeMap::new();
            for it in &group {
                if it.bytes.len() != PAGE_SIZE as usize {
                    return Err(Error::Layout("verification needs a whole page".into()));
                }
                meter.mac_bytes += PAGE_SIZE;
                cur.insert(it.index, (page_mac(&it.key, it.bytes), it.index));
            }
            for level in 0..self.top_level() {
                let a = self.arity(level);
                let groups: BTreeSet<u64> = cur.keys().map(|i| i / a).collect();
                let mut next = BTreeMap::new();
                for g in groups {
                    let vals = self.read_group(dram, level, g, meter)?;
                    let mut witness = 0;
                    for (&i, &(want, page)) in cur.range(g * a..(g + 1) * a) {
                        witness = page;
                        if vals[(i - g * a) as usize] != want {
                            let kind = if level == 0 {
                                ViolationKind::ForestLeaf
                            } else {
                                self.mismatch_kind(level)
                            };
                            return Err(self.violation(kind, page));
                        }
                    }
                    next.insert(g, (self.parent_mac(level, g, &vals, meter)?, witness));
                }
                cur = next;
            }
            let (&r, &(computed, witness)) = cur.iter().next().unwrap();
            debug_assert_eq!(r, region);
            let (stored, hit) = self.trusted_top(dram, top, region, meter)?;
            if stored != computed {
                return Err(self.violation(ViolationKind::ForestTop, witness));
            }
            let accesses = meter.accesses(AccessCause::Forest) - start;
            out.dram_accesses += accesses;
            out.cache_hit |= hit;
            self.stats.verified_pages += group.len() as u64;
            self.stats.verify_batches += 1;
            if group.len() > 1 {
                self.stats.grouped_verifications += 1;
            }
            let per_page = accesses.div_ceil(group.len() as u64);
            self.stats.max_verify_accesses_per_page = self.stats.max_verify_accesses_per_page.max(per_page);
        }
        Ok(out)
    }

    pub fn verify_page(
        &mut self,
        dram: &mut EmulatedDram,
        top: &mut dyn TopLevelStore,
        index: u64,
        key: &PageKey,
        bytes: &[u8],
        meter: &mut Meter,
    ) -> Result<VerifyOutcome> {
        self.verify_pages(dram, top, &[VerifyItem { index, key: *key, bytes }], meter)
    }

    /// Installs new leaf MACs. Leaves in the same subtree region are applied
    /// as one clubbed update sharing the upper-level recomputation. Every
    /// group read on the way up is authenticated against its stored parent
    /// before being folded into a new parent.
    pub fn update_pages(
        &mut self,
        dram: &mut EmulatedDram,
        top: &mut dyn TopLevelStore,
        items: &[(u64, Mac)],
        meter: &mut Meter,
    ) -> Result<UpdateOutcome> {
        let mut by_region: BTreeMap<u64, BTreeMap<u64, Mac>> = BTreeMap::new();
        for &(i, m) in items {
            self.check_index(i)?;
            by_region.entry(self.region_of(i)).or_default().insert(i, m);
        }
        let mut out = UpdateOutcome::default();
        for (region, leaves) in by_region {
            let before = meter.accesses(AccessCause::Forest);
            self.ensure_init(dram, top, region, meter)?;
            let witness = *leaves.keys().next().unwrap();
            let tl = self.top_level();
            // Read every touched group bottom up, checking the old contents.
            let mut groups: Vec<BTreeMap<u64, Vec<Mac>>> = vec![BTreeMap::new(); tl];
            let mut idx: BTreeSet<u64> = leaves.keys().copied().collect();
            let mut old_parents: BTreeMap<u64, Mac> = BTreeMap::new();
            for level in 0..tl {
                let a = self.arity(level);
                let gs: BTreeSet<u64> = idx.iter().map(|i| i / a).collect();
                for &g in &gs {
                    let vals = self.read_group(dram, level, g, meter)?;
                    if level > 0 {
                        for (&i, &m) in old_parents.range(g * a..(g + 1) * a) {
                            if vals[(i - g * a) as usize] != m {
                                return Err(self.violation(self.mismatch_kind(level), witness));
                            }
                        }
                    }
                    groups[level].insert(g, vals);
                }
                let mut np = BTreeMap::new();
                for (&g, vals) in &groups[level] {
                    np.insert(g, self.parent_mac(level, g, vals, meter)?);
                }
                old_parents = np;
                idx = gs;
            }
            let (stored_top, _) = self.trusted_top(dram, top, region, meter)?;
            if old_parents.get(&region) != Some(&stored_top) {
                return Err(self.violation(ViolationKind::ForestTop, witness));
            }
            // Apply and write back.
            let mut changed: BTreeMap<u64, Mac> = leaves;
            let mut writes = 0;
            for level in 0..tl {
                let a = self.arity(level);
                let mut touched: BTreeMap<u64, BTreeSet<usize>> = BTreeMap::new();
                for (&i, &m) in &changed {
                    let g = i / a;
                    let slot = (i % a) as usize;
                    groups[level].get_mut(&g).unwrap()[slot] = m;
                    touched.entry(g).or_default().insert(slot);
                }
                let mut next = BTreeMap::new();
                for (g, slots) in touched {
                    let vals = groups[level][&g].clone();
                    writes += self.write_group(dram, level, g, &vals, &slots, meter)?;
                    next.insert(g, self.parent_mac(level, g, &vals, meter)?);
                }
                changed = next;
            }
            let new_top = changed[&region];
            top.write_top(dram, region, new_top, meter)?;
            self.cache.put(region, new_top);
            writes += 1;
            out.node_writes += writes;
            out.dram_accesses += meter.accesses(AccessCause::Forest) - before;
            self.stats.updated_pages += items.iter().filter(|(i, _)| self.region_of(*i) == region).count() as u64;
            self.stats.update_batches += 1;
            if items.len() > 1 {
                self.stats.clubbed_updates += 1;
            }
        }
        Ok(out)
    }

    pub fn update_on_evict(
        &mut self,
        dram: &mut EmulatedDram,
        top: &mut dyn TopLevelStore,
        index: u64,
        new_mac: Mac,
        club_with: Option<(u64, Mac)>,
        meter: &mut Meter,
    ) -> Result<UpdateOutcome> {
        let mut items = vec![(index, new_mac)];
        if let Some(o) = club_with {
            items.push(o);
        }
        self.update_pages(dram, top, &items, meter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address_space::{MemoryLayout, GIB, KIB, MIB};
    use crate::crypto::{compose_page_key, hmac_sha256, TcbSecrets};
    use crate::epc_merkle::{merkle_storage_bytes, EpcLayout, MerkleTreeConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn storage_figures() {
        let cfg = ForestConfig::default();
        let b = forest_storage_bytes(512 * GIB, &cfg);
        assert_eq!(b, GIB + 64 * MIB + 8 * MIB);
        assert_eq!(b / MIB, 1096);
        assert_eq!(forest_top_bytes(512 * GIB, &cfg), 8 * MIB);
        assert_eq!(cfg.level_counts(512 * GIB / PAGE_SIZE), vec![1 << 27, 1 << 23, 1 << 20]);
        let m = merkle_storage_bytes(128 * MIB, &MerkleTreeConfig::default());
        let combined = (b + m) as f64 / MIB as f64;
        assert!((combined - 1098.06).abs() <= 0.01, "{combined}");
        assert_eq!(forest_storage_bytes(512 * KIB, &cfg), 128 * 8 + 8 * 8 + 8);
        assert_eq!(cfg.region_bytes(), 512 * KIB);
    }

    #[test]
    fn regions() {
        let cfg = ForestConfig::default();
        assert_eq!(subtree_region_of(0, &cfg), subtree_region_of(127, &cfg));
        assert_ne!(subtree_region_of(127, &cfg), subtree_region_of(128, &cfg));
        assert_eq!(subtree_region_of((512 * GIB / PAGE_SIZE) - 1, &cfg) + 1, 1 << 20);
    }

    #[test]
    fn config_validation() {
        assert!(ForestConfig::default().validate().is_ok());
        let bad = ForestConfig {
            levels: 3,
            arities: vec![16],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ForestConfig {
            levels: 1,
            arities: vec![],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn top_cache_lru() {
        let mut c = TopLevelMacCache::new(2);
        c.put(1, Mac(1));
        c.put(2, Mac(2));
        assert_eq!(c.get(1), Some(Mac(1)));
        c.put(3, Mac(3));
        assert_eq!(c.peek(2), None);
        assert_eq!(c.peek(1), Some(Mac(1)));
        let mut z = TopLevelMacCache::new(0);
        z.put(1, Mac(1));
        assert_eq!(z.get(1), None);
    }

    struct Rig {
        dram: EmulatedDram,
        forest: MacForest,
        top: DramTopStore,
        ssk: Ssk,
    }

    fn rig(pages: u64, cfg: ForestConfig) -> Rig {
        let lower = forest_lower_bytes(pages, &cfg);
        let layout = MemoryLayout::new(64 * MIB, MIB, 1, lower + 64 * KIB).unwrap();
        let dram = EmulatedDram::new(layout.clone());
        let ssk = TcbSecrets::derive(9).ssk;
        let forest = MacForest::new(&cfg, ssk, PhysAddr(layout.forest_base), layout.forest_size, layout.eepc_base / PAGE_SIZE, pages).unwrap();
        let top = DramTopStore {
            base: PhysAddr(layout.forest_base + lower),
        };
        Rig { dram, forest, top, ssk }
    }

    fn key(i: u64, r: u128) -> PageKey {
        compose_page_key(5, 1, r, i).unwrap()
    }

    fn page(fill: u8) -> Vec<u8> {
        vec![fill; PAGE_SIZE as usize]
    }

    #[test]
    fn fresh_page_verifies_and_cache_saves_an_access() {
        let mut r = rig(2048, ForestConfig::default());
        let mut m = Meter::default();
        let k = key(3, 77);
        let p = page(3);
        r.forest.update_on_evict(&mut r.dram, &mut r.top, 3, page_mac(&k, &p), None, &mut m).unwrap();
        let k5 = key(5, 78);
        r.forest.update_on_evict(&mut r.dram, &mut r.top, 5, page_mac(&k5, &page(5)), None, &mut m).unwrap();
        // Evict the cached top by touching 8 other regions.
        for reg in 1..=8u64 {
            r.forest.update_on_evict(&mut r.dram, &mut r.top, reg * 128, Mac(reg), None, &mut m).unwrap();
        }
        let a = r.forest.verify_page(&mut r.dram, &mut r.top, 3, &k, &p, &mut Meter::default()).unwrap();
        assert!(!a.cache_hit);
        assert_eq!(a.dram_accesses, 4);
        let b = r.forest.verify_page(&mut r.dram, &mut r.top, 5, &k5, &page(5), &mut Meter::default()).unwrap();
        assert!(b.cache_hit);
        assert_eq!(b.dram_accesses, a.dram_accesses - 1);
    }

    #[test]
    fn untouched_page_verifies_under_null_key() {
        let mut r = rig(256, ForestConfig::default());
        let mut m = Meter::default();
        r.forest.verify_page(&mut r.dram, &mut r.top, 200, &PageKey::NULL, &page(0), &mut m).unwrap();
        let e = r.forest.verify_page(&mut r.dram, &mut r.top, 201, &PageKey::NULL, &page(1), &mut m).unwrap_err();
        assert_eq!(e.violation().unwrap().kind, ViolationKind::ForestLeaf);
    }

    #[test]
    fn single_update_path_and_clubbing_savings() {
        let mut r = rig(1024, ForestConfig::default());
        let mut m = Meter::default();
        // Initialize regions up front so only update traffic is compared.
        r.forest.update_on_evict(&mut r.dram, &mut r.top, 0, Mac(1), None, &mut m).unwrap();
        let single = r.forest.update_on_evict(&mut r.dram, &mut r.top, 1, Mac(2), None, &mut Meter::default()).unwrap();
        assert_eq!(single.node_writes, 3);
        let other = r.forest.update_on_evict(&mut r.dram, &mut r.top, 9, Mac(3), None, &mut Meter::default()).unwrap();
        let clubbed = r.forest.update_on_evict(&mut r.dram, &mut r.top, 2, Mac(4), Some((10, Mac(5))), &mut Meter::default()).unwrap();
        assert!(clubbed.dram_accesses < single.dram_accesses + other.dram_accesses);
        assert!(single.node_writes + other.node_writes - clubbed.node_writes >= 2);
    }

    #[test]
    fn replayed_leaf_detected_at_parent() {
        let mut r = rig(256, ForestConfig::default());
        let mut m = Meter::default();
        let k1 = key(7, 1);
        let p1 = page(1);
        r.forest.update_on_evict(&mut r.dram, &mut r.top, 7, page_mac(&k1, &p1), None, &mut m).unwrap();
        let addr = r.forest.entry_addr(0, 7);
        let old = r.dram.peek(addr, 8).unwrap();
        let k2 = key(7, 2);
        r.forest.update_on_evict(&mut r.dram, &mut r.top, 7, page_mac(&k2, &page(2)), None, &mut m).unwrap();
        r.dram.poke(addr, &old).unwrap();
        let e = r.forest.verify_page(&mut r.dram, &mut r.top, 7, &k1, &p1, &mut m).unwrap_err();
        assert_eq!(e.violation().unwrap().kind, ViolationKind::ForestIntermediate);
    }

    #[test]
    fn tampered_sibling_not_laundered_by_update() {
        let mut r = rig(256, ForestConfig::default());
        let mut m = Meter::default();
        r.forest.update_on_evict(&mut r.dram, &mut r.top, 4, Mac(44), None, &mut m).unwrap();
        let addr = r.forest.entry_addr(0, 5);
        r.dram.poke(addr, &Mac(666).to_bytes()).unwrap();
        assert!(r.forest.update_on_evict(&mut r.dram, &mut r.top, 4, Mac(45), None, &mut m).is_err());
    }

    #[test]
    fn tampered_top_detected_when_uncached() {
        let cfg = ForestConfig {
            top_cache_entries: 0,
            ..Default::default()
        };
        let mut r = rig(256, cfg);
        let mut m = Meter::default();
        let k = key(1, 1);
        r.forest.update_on_evict(&mut r.dram, &mut r.top, 1, page_mac(&k, &page(1)), None, &mut m).unwrap();
        r.dram.poke(r.top.base, &[0xee; 8]).unwrap();
        let e = r.forest.verify_page(&mut r.dram, &mut r.top, 1, &k, &page(1), &mut m).unwrap_err();
        assert_eq!(e.violation().unwrap().kind, ViolationKind::ForestTop);
    }

    #[test]
    fn grouped_verification_counts_upper_levels_once() {
        let mut r = rig(256, ForestConfig::default());
        let mut m = Meter::default();
        let (ka, kb) = (key(1, 1), key(2, 2));
        let (pa, pb) = (page(1), page(2));
        r.forest.update_pages(&mut r.dram, &mut r.top, &[(1, page_mac(&ka, &pa)), (2, page_mac(&kb, &pb))], &mut m).unwrap();
        let cfg0 = ForestConfig {
            top_cache_entries: 0,
            ..Default::default()
        };
        r.forest.cache = TopLevelMacCache::new(cfg0.top_cache_entries);
        let sep = r.forest.verify_page(&mut r.dram, &mut r.top, 1, &ka, &pa, &mut Meter::default()).unwrap().dram_accesses
            + r.forest.verify_page(&mut r.dram, &mut r.top, 2, &kb, &pb, &mut Meter::default()).unwrap().dram_accesses;
        let items = [
            VerifyItem { index: 1, key: ka, bytes: &pa },
            VerifyItem { index: 2, key: kb, bytes: &pb },
        ];
        let grouped = r.forest.verify_pages(&mut r.dram, &mut r.top, &items, &mut Meter::default()).unwrap();
        assert!(grouped.dram_accesses < sep);
    }

    /// Rebuilds every level from the expected leaves with raw HMAC and
    /// compares against DRAM.
    fn oracle(r: &Rig, leaves: &[Mac]) {
        let ssk = r.ssk.to_bytes();
        let cfg = r.forest.config().clone();
        let mut level_vals: Vec<Mac> = leaves.to_vec();
        let padded = r.forest.regions() * cfg.region_pages();
        level_vals.resize(padded as usize, r.forest.zero_leaf());
        let mut per_region = cfg.region_pages();
        for (level, &a) in cfg.arities.iter().enumerate() {
            for (i, v) in level_vals.iter().enumerate() {
                let reg = i as u64 / per_region;
                if r.forest.is_initialized(reg) {
                    assert_eq!(r.forest.peek_entry(&r.dram, level, i as u64).unwrap(), *v, "level {level} index {i}");
                }
            }
            let mut next = Vec::new();
            for (g, chunk) in level_vals.chunks(a as usize).enumerate() {
                let mut msg: Vec<u8> = chunk.iter().flat_map(|m| m.0.to_le_bytes()).collect();
                msg.push(level as u8 + 1);
                msg.extend_from_slice(&(g as u64).to_le_bytes());
                next.push(Mac(u64::from_le_bytes(hmac_sha256(&ssk, &msg)[..8].try_into().unwrap())));
            }
            level_vals = next;
            per_region /= a as u64;
        }
        for (reg, v) in level_vals.iter().enumerate() {
            if r.forest.is_initialized(reg as u64) {
                let stored = Mac::from_bytes(&r.dram.peek(r.top.base.offset(reg as u64 * 8), 8).unwrap());
                assert_eq!(stored, *v, "top {reg}");
                if let Some(c) = r.forest.cache().peek(reg as u64) {
                    assert_eq!(c, stored);
                }
            }
        }
    }

    #[test]
    fn incremental_forest_matches_brute_force() {
        let pages = 1000;
        let mut r = rig(pages, ForestConfig::default());
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut leaves = vec![r.forest.zero_leaf(); pages as usize];
        let mut m = Meter::default();
        for _ in 0..500 {
            let a = rng.gen_range(0..pages);
            let b = if rng.gen_bool(0.5) { Some(rng.gen_range(0..pages)) } else { None };
            let ma = Mac(rng.gen());
            let club = b.filter(|&b| b != a).map(|b| (b, Mac(rng.gen())));
            r.forest.update_on_evict(&mut r.dram, &mut r.top, a, ma, club, &mut m).unwrap();
            leaves[a as usize] = ma;
            if let Some((b, mb)) = club {
                leaves[b as usize] = mb;
            }
        }
        oracle(&r, &leaves);
    }

    #[test]
    fn verification_never_exceeds_bound() {
        let mut r = rig(512, ForestConfig::default());
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut keys = vec![PageKey::NULL; 512];
        let mut m = Meter::default();
        for step in 0..300u64 {
            let i = rng.gen_range(0..512);
            if step % 2 == 0 {
                keys[i as usize] = key(i, step as u128 + 1);
                r.forest.update_on_evict(&mut r.dram, &mut r.top, i, page_mac(&keys[i as usize], &page(i as u8)), None, &mut m).unwrap();
            } else {
                let fill = if keys[i as usize] == PageKey::NULL { 0 } else { i as u8 };
                let v = r.forest.verify_page(&mut r.dram, &mut r.top, i, &keys[i as usize], &page(fill), &mut Meter::default()).unwrap();
                assert!(v.dram_accesses <= 4);
            }
        }
        assert!(r.forest.stats().max_verify_accesses_per_page <= 4);
    }

    #[test]
    fn epc_backed_top_level() {
        let layout = MemoryLayout::new(64 * MIB, MIB, 0, forest_lower_bytes(256, &ForestConfig::default())).unwrap();
        let mut dram = EmulatedDram::new(layout.clone());
        let secrets = TcbSecrets::derive(3);
        let el = EpcLayout::compute(0, layout.epc_pages(), 1, &MerkleTreeConfig::default()).unwrap();
        let mut store = EpcStore::new(&mut dram, el, &MerkleTreeConfig::default(), &secrets).unwrap();
        let cfg = ForestConfig {
            top_cache_entries: 0,
            ..Default::default()
        };
        let mut f = MacForest::new(&cfg, secrets.ssk, PhysAddr(layout.forest_base), layout.forest_size, layout.eepc_base / PAGE_SIZE, 256).unwrap();
        let mut m = Meter::default();
        let k = key(130, 9);
        f.update_on_evict(&mut dram, &mut store, 130, page_mac(&k, &page(4)), None, &mut m).unwrap();
        let v = f.verify_page(&mut dram, &mut store, 130, &k, &page(4), &mut Meter::default()).unwrap();
        assert_eq!(v.dram_accesses, 4);
        // Tampering the EPC copy is caught by the EPC's own protection.
        let (p, b, _) = store.top_position(1).unwrap();
        let a = store.block_addr(p, b);
        let mut bytes = dram.peek(a, 64).unwrap();
        bytes[8] ^= 1;
        dram.poke(a, &bytes).unwrap();
        let e = f.verify_page(&mut dram, &mut store, 130, &k, &page(4), &mut m).unwrap_err();
        assert_eq!(e.violation().unwrap().kind, ViolationKind::EpcDataMac);
    }
}
