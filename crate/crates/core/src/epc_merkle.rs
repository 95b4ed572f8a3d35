// SPDX-License-Identifier: Apache-2.0

//! Counter-mode protection of the EPC: split write counters arranged in a
//! Carter-Wegman style tree whose root lives in the TCB, a direct-mapped
//! counter cache, and per-block data MACs.
//!
//! Every tree node is one 64-byte record:
//!
//! ```text
//! | major:64 | 384 bits of packed minor counters | MAC:64 |
//! ```
//!
//! A leaf covers one page and packs 64 six-bit minors, one per block. An
//! internal node of arity `a` packs `a` minors of `384 / a` bits. The
//! counter a node hands to child `i` is `major << width | minor[i]`. When a
//! minor would wrap, the major is bumped and all minors reset; for a leaf
//! this re-encrypts the page, for an internal node it re-MACs the children.
//! Node MACs are keyed by the counter the parent holds for that node.

use serde::{Deserialize, Serialize};

use crate::address_space::{EmulatedDram, PageId, PhysAddr, BLOCKS_PER_PAGE, BLOCK_SIZE, PAGE_SIZE};
use crate::crypto::{ctr_decrypt_block, ctr_encrypt_block, keyed_hash, Block, Mac, TcbSecrets};
use crate::error::{Error, Result, SecurityViolation, ViolationKind};
use crate::timing::{AccessCause, Meter};

pub const NODE_BYTES: u64 = 64;
const MINOR_FIELD_BITS: u32 = 384;
const LEAF_WIDTH: u32 = 6;
/// Bytes of data-MAC metadata per protected EPC page.
pub const DATA_MAC_BYTES_PER_PAGE: u64 = BLOCKS_PER_PAGE as u64 * 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MerkleTreeConfig {
    /// Fan-in of each grouping step, bottom up. The last entry is reused if
    /// the protected region needs more levels.
    pub arity: Vec<u32>,
    pub node_bytes: u64,
    pub counter_cache_bytes: u64,
}

impl Default for MerkleTreeConfig {
    fn default() -> Self {
        Self {
            arity: vec![32, 32, 32],
            node_bytes: NODE_BYTES,
            counter_cache_bytes: 32 * 1024,
        }
    }
}

impl MerkleTreeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arity.is_empty() {
            return Err(Error::Config("merkle.arity must not be empty".into()));
        }
        for &a in &self.arity {
            if !(2..=64).contains(&a) || !a.is_power_of_two() {
                return Err(Error::Config(format!(
                    "merkle.arity entries must be powers of two in 2..=64, got {a}"
                )));
            }
        }
        if self.node_bytes != NODE_BYTES {
            return Err(Error::Config("merkle.node_bytes is fixed at 64".into()));
        }
        if self.counter_cache_bytes < NODE_BYTES {
            return Err(Error::Config("merkle.counter_cache_bytes too small".into()));
        }
        Ok(())
    }

    fn arity_at(&self, step: usize) -> u64 {
        *self.arity.get(step).unwrap_or_else(|| self.arity.last().unwrap()) as u64
    }

    /// Node counts per stored level, leaves first, plus the fan-in of the
    /// TCB-resident root.
    pub fn level_counts(&self, pages: u64) -> (Vec<u64>, u64) {
        let mut counts = vec![pages.max(1)];
        let mut step = 0;
        loop {
            let a = self.arity_at(step);
            let last = *counts.last().unwrap();
            if last <= a {
                return (counts, a);
            }
            counts.push(last.div_ceil(a));
            step += 1;
        }
    }

    /// True when the configured arities cover `pages` without extension.
    pub fn covers(&self, pages: u64) -> bool {
        self.level_counts(pages).0.len() <= self.arity.len()
    }
}

/// Bytes of counter-tree storage for `protected_size` bytes; the root is
/// held in the TCB and not counted.
pub fn merkle_storage_bytes(protected_size: u64, cfg: &MerkleTreeConfig) -> u64 {
    let pages = protected_size.div_ceil(PAGE_SIZE);
    cfg.level_counts(pages).0.iter().sum::<u64>() * cfg.node_bytes
}

fn minor_width(fanin: u64) -> u32 {
    (MINOR_FIELD_BITS / fanin as u32).min(48)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct MerkleNode {
    pub bytes: [u8; NODE_BYTES as usize],
}

impl MerkleNode {
    pub fn zeroed() -> Self {
        Self {
            bytes: [0; NODE_BYTES as usize],
        }
    }

    pub fn major(&self) -> u64 {
        u64::from_le_bytes(self.bytes[..8].try_into().unwrap())
    }

    pub fn set_major(&mut self, v: u64) {
        self.bytes[..8].copy_from_slice(&v.to_le_bytes());
    }

    pub fn mac(&self) -> Mac {
        Mac::from_bytes(&self.bytes[56..])
    }

    pub fn set_mac(&mut self, m: Mac) {
        self.bytes[56..].copy_from_slice(&m.to_bytes());
    }

    pub fn minor(&self, i: usize, width: u32) -> u64 {
        let mut v = 0u64;
        for bit in 0..width {
            let pos = i as u32 * width + bit;
            let byte = self.bytes[8 + (pos / 8) as usize];
            v |= (((byte >> (pos % 8)) & 1) as u64) << bit;
        }
        v
    }

    pub fn set_minor(&mut self, i: usize, width: u32, v: u64) {
        for bit in 0..width {
            let pos = i as u32 * width + bit;
            let idx = 8 + (pos / 8) as usize;
            let mask = 1u8 << (pos % 8);
            if (v >> bit) & 1 == 1 {
                self.bytes[idx] |= mask;
            } else {
                self.bytes[idx] &= !mask;
            }
        }
    }

    fn reset_minors(&mut self) {
        self.bytes[8..56].fill(0);
    }

    pub fn child_counter(&self, i: usize, width: u32) -> u64 {
        (self.major() << width) | self.minor(i, width)
    }
}

/// Direct-mapped, write-through cache of tree nodes. Lives in the TCB, so a
/// hit is trusted.
#[derive(Clone, Debug)]
pub struct CounterCache {
    lines: Vec<Option<(u64, MerkleNode)>>,
    pub hits: u64,
    pub misses: u64,
}

impl CounterCache {
    pub fn new(bytes: u64) -> Self {
        Self {
            lines: vec![None; (bytes / NODE_BYTES).max(1) as usize],
            hits: 0,
            misses: 0,
        }
    }

    fn index(&self, addr: u64) -> usize {
        ((addr / NODE_BYTES) % self.lines.len() as u64) as usize
    }

    pub fn get(&mut self, addr: u64) -> Option<MerkleNode> {
        let i = self.index(addr);
        match self.lines[i] {
            Some((a, n)) if a == addr => {
                self.hits += 1;
                Some(n)
            }
            _ => {
                self.misses += 1;
                None
            }
        }
    }

    pub fn contains(&self, addr: u64) -> bool {
        matches!(self.lines[self.index(addr)], Some((a, _)) if a == addr)
    }

    pub fn insert(&mut self, addr: u64, node: MerkleNode) {
        let i = self.index(addr);
        self.lines[i] = Some((addr, node));
    }

    pub fn clear(&mut self) {
        self.lines.iter_mut().for_each(|l| *l = None);
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ReadVerify {
    pub counter: u64,
    pub dram_accesses: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct WriteUpdate {
    pub counter: u64,
    pub dram_accesses: u64,
    /// The leaf major was bumped; every block of the page has a new counter.
    pub page_reset: bool,
}

/// Counter tree over `pages` protected pages, stored in DRAM at `base`.
#[derive(Clone, Debug)]
pub struct MerkleTree {
    pages: u64,
    base: PhysAddr,
    counts: Vec<u64>,
    offsets: Vec<u64>,
    /// Children per node for each stored level (level 0 = blocks).
    fanin: Vec<u64>,
    root_fanin: u64,
    root: Vec<u64>,
    key: [u8; 32],
    cache: CounterCache,
}

impl MerkleTree {
    /// Builds the tree and writes every node (all counters zero) to DRAM
    /// without counting the traffic.
    pub fn new(dram: &mut EmulatedDram, base: PhysAddr, pages: u64, cfg: &MerkleTreeConfig, key: [u8; 32]) -> Result<Self> {
        cfg.validate()?;
        let (counts, root_fanin) = cfg.level_counts(pages);
        let mut offsets = Vec::with_capacity(counts.len());
        let mut acc = 0;
        for c in &counts {
            offsets.push(acc);
            acc += c;
        }
        let mut fanin = vec![BLOCKS_PER_PAGE as u64];
        for l in 1..counts.len() {
            fanin.push(cfg.arity_at(l - 1));
        }
        let tree = Self {
            pages,
            base,
            root: vec![0; *counts.last().unwrap() as usize],
            counts,
            offsets,
            fanin,
            root_fanin,
            key,
            cache: CounterCache::new(cfg.counter_cache_bytes),
        };
        for l in 0..tree.counts.len() {
            for i in 0..tree.counts[l] {
                let mut n = MerkleNode::zeroed();
                n.set_mac(tree.node_mac(l, i, 0, &n));
                dram.poke(tree.node_addr(l, i), &n.bytes)?;
            }
        }
        Ok(tree)
    }

    pub fn pages(&self) -> u64 {
        self.pages
    }

    pub fn depth(&self) -> usize {
        self.counts.len()
    }

    pub fn level_counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn root_fanin(&self) -> u64 {
        self.root_fanin
    }

    pub fn storage_bytes(&self) -> u64 {
        self.counts.iter().sum::<u64>() * NODE_BYTES
    }

    pub fn root_counters(&self) -> &[u64] {
        &self.root
    }

    pub fn cache(&self) -> &CounterCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut CounterCache {
        &mut self.cache
    }

    pub fn width(&self, level: usize) -> u32 {
        if level == 0 {
            LEAF_WIDTH
        } else {
            minor_width(self.fanin[level])
        }
    }

    /// Children per node at `level` (leaves: blocks per page).
    pub fn fanin(&self, level: usize) -> u64 {
        self.fanin[level]
    }

    pub fn node_addr(&self, level: usize, index: u64) -> PhysAddr {
        self.base.offset((self.offsets[level] + index) * NODE_BYTES)
    }

    pub fn node_mac(&self, level: usize, index: u64, parent_counter: u64, node: &MerkleNode) -> Mac {
        keyed_hash(
            &self.key,
            &[
                &[level as u8],
                &index.to_le_bytes(),
                &parent_counter.to_le_bytes(),
                &node.bytes[..56],
            ],
        )
    }

    fn index_at(&self, page: u64, level: usize) -> u64 {
        let mut i = page;
        for l in 1..=level {
            i /= self.fanin[l];
        }
        i
    }

    fn top(&self) -> usize {
        self.counts.len() - 1
    }

    fn parent_counter(&self, level: usize, index: u64, parent: Option<&MerkleNode>) -> u64 {
        if level == self.top() {
            self.root[index as usize]
        } else {
            let p = parent.expect("parent node loaded");
            p.child_counter((index % self.fanin[level + 1]) as usize, self.width(level + 1))
        }
    }

    fn violation(&self, page: u64) -> Error {
        SecurityViolation::new(ViolationKind::MerkleNode, Some(page)).into()
    }

    fn fetch(&mut self, dram: &mut EmulatedDram, level: usize, index: u64, meter: &mut Meter) -> Result<(MerkleNode, bool)> {
        let addr = self.node_addr(level, index);
        if let Some(n) = self.cache.get(addr.0) {
            return Ok((n, true));
        }
        let mut n = MerkleNode::zeroed();
        dram.read(addr, &mut n.bytes)?;
        meter.read(AccessCause::Merkle);
        Ok((n, false))
    }

    fn check_page(&self, page: u64) -> Result<()> {
        if page >= self.pages {
            return Err(Error::WrongRegion {
                page,
                expected: "EPC",
            });
        }
        Ok(())
    }

    /// Authenticates the counter of one block. Walks up until a cached node
    /// or the root vouches for the path.
    pub fn read_verify(&mut self, dram: &mut EmulatedDram, page: u64, block: usize, meter: &mut Meter) -> Result<ReadVerify> {
        self.check_page(page)?;
        let before = meter.total_reads();
        let mut chain: Vec<(usize, u64, MerkleNode)> = Vec::new();
        let mut anchor: Option<MerkleNode> = None;
        let mut level = 0;
        loop {
            let index = self.index_at(page, level);
            let (node, cached) = self.fetch(dram, level, index, meter)?;
            if cached {
                anchor = Some(node);
                break;
            }
            chain.push((level, index, node));
            if level == self.top() {
                break;
            }
            level += 1;
        }
        let mut parent = anchor;
        for &(level, index, node) in chain.iter().rev() {
            let pc = self.parent_counter(level, index, parent.as_ref());
            if self.node_mac(level, index, pc, &node) != node.mac() {
                return Err(self.violation(page));
            }
            self.cache.insert(self.node_addr(level, index).0, node);
            parent = Some(node);
        }
        let leaf = if chain.is_empty() {
            anchor.unwrap()
        } else {
            chain[0].2
        };
        Ok(ReadVerify {
            counter: leaf.child_counter(block, LEAF_WIDTH),
            dram_accesses: meter.total_reads() - before,
        })
    }

    /// Loads and authenticates every node from the leaf to the top stored level.
    fn load_path(&mut self, dram: &mut EmulatedDram, page: u64, meter: &mut Meter) -> Result<Vec<MerkleNode>> {
        let mut path = Vec::with_capacity(self.counts.len());
        let mut fresh = Vec::with_capacity(self.counts.len());
        for level in 0..self.counts.len() {
            let (n, cached) = self.fetch(dram, level, self.index_at(page, level), meter)?;
            path.push(n);
            fresh.push(!cached);
        }
        for level in (0..self.counts.len()).rev() {
            if !fresh[level] {
                continue;
            }
            let index = self.index_at(page, level);
            let pc = self.parent_counter(level, index, path.get(level + 1));
            if self.node_mac(level, index, pc, &path[level]) != path[level].mac() {
                return Err(self.violation(page));
            }
            self.cache.insert(self.node_addr(level, index).0, path[level]);
        }
        Ok(path)
    }

    /// Authenticated leaf node for `page`.
    pub fn leaf(&mut self, dram: &mut EmulatedDram, page: u64, meter: &mut Meter) -> Result<MerkleNode> {
        self.check_page(page)?;
        Ok(self.load_path(dram, page, meter)?[0])
    }

    pub fn leaf_counter(node: &MerkleNode, block: usize) -> u64 {
        node.child_counter(block, LEAF_WIDTH)
    }

    /// True if the next write to `block` will wrap its minor counter.
    pub fn leaf_minor_saturated(node: &MerkleNode, block: usize) -> bool {
        node.minor(block, LEAF_WIDTH) == (1 << LEAF_WIDTH) - 1
    }

    fn store(&mut self, dram: &mut EmulatedDram, level: usize, index: u64, node: &MerkleNode, meter: &mut Meter) -> Result<()> {
        let addr = self.node_addr(level, index);
        dram.raw_write(addr, &node.bytes)?;
        meter.write(AccessCause::Merkle);
        self.cache.insert(addr.0, *node);
        Ok(())
    }

    /// Bumps the write counter of one block and refreshes every ancestor up
    /// to the TCB root.
    pub fn write_update(&mut self, dram: &mut EmulatedDram, page: u64, block: usize, meter: &mut Meter) -> Result<WriteUpdate> {
        self.check_page(page)?;
        if block >= BLOCKS_PER_PAGE {
            return Err(Error::BlockIndex(block));
        }
        let before = meter.total_accesses();
        let mut path = self.load_path(dram, page, meter)?;
        let page_reset = Self::leaf_minor_saturated(&path[0], block);
        if page_reset {
            let m = path[0].major();
            path[0].set_major(m + 1);
            path[0].reset_minors();
        } else {
            let v = path[0].minor(block, LEAF_WIDTH);
            path[0].set_minor(block, LEAF_WIDTH, v + 1);
        }
        let top = self.top();
        for level in 0..=top {
            let index = self.index_at(page, level);
            let pc;
            let mut remac_siblings: Option<MerkleNode> = None;
            if level == top {
                self.root[index as usize] += 1;
                pc = self.root[index as usize];
            } else {
                let slot = (index % self.fanin[level + 1]) as usize;
                let w = self.width(level + 1);
                let old_parent = path[level + 1];
                let parent = &mut path[level + 1];
                if parent.minor(slot, w) == (1 << w) - 1 {
                    let m = parent.major();
                    parent.set_major(m + 1);
                    parent.reset_minors();
                    remac_siblings = Some(old_parent);
                } else {
                    let v = parent.minor(slot, w);
                    parent.set_minor(slot, w, v + 1);
                }
                pc = parent.child_counter(slot, w);
            }
            let node = &mut path[level];
            let mac = self.node_mac(level, index, pc, node);
            node.set_mac(mac);
            let node = *node;
            self.store(dram, level, index, &node, meter)?;
            if let Some(old_parent) = remac_siblings {
                self.remac_children(dram, level, index, &old_parent, &path[level + 1], meter, page)?;
            }
        }
        Ok(WriteUpdate {
            counter: path[0].child_counter(block, LEAF_WIDTH),
            dram_accesses: meter.total_accesses() - before,
            page_reset,
        })
    }

    /// After a parent's major bump, re-keys the MACs of every sibling of
    /// `(level, index)`. Each sibling is authenticated against the old parent
    /// first so a tampered node is never laundered.
    #[allow(clippy::too_many_arguments)]
    fn remac_children(
        &mut self,
        dram: &mut EmulatedDram,
        level: usize,
        index: u64,
        old_parent: &MerkleNode,
        new_parent: &MerkleNode,
        meter: &mut Meter,
        page: u64,
    ) -> Result<()> {
        let fan = self.fanin[level + 1];
        let first = index - index % fan;
        let w = self.width(level + 1);
        for sib in first..(first + fan).min(self.counts[level]) {
            if sib == index {
                continue;
            }
            let slot = (sib % fan) as usize;
            let (mut n, cached) = self.fetch(dram, level, sib, meter)?;
            if !cached && self.node_mac(level, sib, old_parent.child_counter(slot, w), &n) != n.mac() {
                return Err(self.violation(page));
            }
            let mac = self.node_mac(level, sib, new_parent.child_counter(slot, w), &n);
            n.set_mac(mac);
            self.store(dram, level, sib, &n, meter)?;
        }
        Ok(())
    }
}

/// Where things live inside the EPC.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpcLayout {
    pub first_page: u64,
    pub epc_pages: u64,
    /// Pages covered by counters: data slots followed by top-level forest pages.
    pub protected_pages: u64,
    pub data_slots: u64,
    pub top_pages: u64,
    pub mac_base: PhysAddr,
    pub tree_base: PhysAddr,
}

impl EpcLayout {
    /// Packs as many protected pages as fit once their data MACs and
    /// counter-tree nodes are accounted for.
    pub fn compute(epc_base: u64, epc_pages: u64, top_pages: u64, cfg: &MerkleTreeConfig) -> Result<Self> {
        let meta_pages = |n: u64| {
            let macs = (n * DATA_MAC_BYTES_PER_PAGE).div_ceil(PAGE_SIZE);
            let tree = merkle_storage_bytes(n * PAGE_SIZE, cfg).div_ceil(PAGE_SIZE);
            macs + tree
        };
        let mut n = epc_pages;
        while n > 0 && n + meta_pages(n) > epc_pages {
            n -= 1;
        }
        if n <= top_pages {
            return Err(Error::Layout(format!(
                "EPC of {epc_pages} pages cannot hold {top_pages} top-level pages plus data"
            )));
        }
        let first_page = epc_base / PAGE_SIZE;
        let mac_base = PhysAddr(epc_base + n * PAGE_SIZE);
        let mac_pages = (n * DATA_MAC_BYTES_PER_PAGE).div_ceil(PAGE_SIZE);
        let tree_base = mac_base.offset(mac_pages * PAGE_SIZE);
        Ok(Self {
            first_page,
            epc_pages,
            protected_pages: n,
            data_slots: n - top_pages,
            top_pages,
            mac_base,
            tree_base,
        })
    }

    pub fn phys_page(&self, protected_index: u64) -> PageId {
        PageId(self.first_page + protected_index)
    }
}

/// Block-level read/write of the protected EPC pages.
#[derive(Clone, Debug)]
pub struct EpcStore {
    layout: EpcLayout,
    tree: MerkleTree,
    epc_key: [u8; 32],
    mac_key: [u8; 32],
}

impl EpcStore {
    /// Initializes counters, zero-filled ciphertext and data MACs for every
    /// protected block (boot-time work, not counted).
    pub fn new(dram: &mut EmulatedDram, layout: EpcLayout, cfg: &MerkleTreeConfig, secrets: &TcbSecrets) -> Result<Self> {
        let tree = MerkleTree::new(dram, layout.tree_base, layout.protected_pages, cfg, secrets.tree_key)?;
        let store = Self {
            layout,
            tree,
            epc_key: secrets.epc_key,
            mac_key: secrets.epc_mac_key,
        };
        let zero = [0u8; BLOCK_SIZE as usize];
        for p in 0..store.layout.protected_pages {
            for b in 0..BLOCKS_PER_PAGE {
                let addr = store.block_addr(p, b);
                let ct = ctr_encrypt_block(&store.epc_key, addr.page().0, b, 0, &zero);
                dram.poke(addr, &ct)?;
                dram.poke(store.data_mac_addr(p, b), &store.data_mac(addr, 0, &ct).to_bytes())?;
            }
        }
        Ok(store)
    }

    pub fn layout(&self) -> &EpcLayout {
        &self.layout
    }

    pub fn tree(&self) -> &MerkleTree {
        &self.tree
    }

    pub fn tree_mut(&mut self) -> &mut MerkleTree {
        &mut self.tree
    }

    pub fn block_addr(&self, page: u64, block: usize) -> PhysAddr {
        self.layout.phys_page(page).block_addr(block)
    }

    pub fn data_mac_addr(&self, page: u64, block: usize) -> PhysAddr {
        self.layout.mac_base.offset((page * BLOCKS_PER_PAGE as u64 + block as u64) * 8)
    }

    fn data_mac(&self, addr: PhysAddr, counter: u64, ct: &Block) -> Mac {
        keyed_hash(&self.mac_key, &[&addr.0.to_le_bytes(), &counter.to_le_bytes(), ct])
    }

    fn read_with_counter(
        &self,
        dram: &mut EmulatedDram,
        page: u64,
        block: usize,
        counter: u64,
        cause: AccessCause,
        meter: &mut Meter,
    ) -> Result<Block> {
        let addr = self.block_addr(page, block);
        let mut ct = [0u8; BLOCK_SIZE as usize];
        dram.read(addr, &mut ct)?;
        meter.read(cause);
        let mut mac = [0u8; 8];
        dram.read(self.data_mac_addr(page, block), &mut mac)?;
        meter.read(AccessCause::Merkle);
        if self.data_mac(addr, counter, &ct) != Mac::from_bytes(&mac) {
            return Err(SecurityViolation::new(ViolationKind::EpcDataMac, Some(addr.page().0)).into());
        }
        meter.ctr_ops += 1;
        Ok(ctr_decrypt_block(&self.epc_key, addr.page().0, block, counter, &ct))
    }

    fn write_with_counter(
        &self,
        dram: &mut EmulatedDram,
        page: u64,
        block: usize,
        counter: u64,
        plaintext: &Block,
        cause: AccessCause,
        meter: &mut Meter,
    ) -> Result<()> {
        let addr = self.block_addr(page, block);
        let ct = ctr_encrypt_block(&self.epc_key, addr.page().0, block, counter, plaintext);
        meter.ctr_ops += 1;
        dram.raw_write(addr, &ct)?;
        meter.write(cause);
        dram.raw_write(self.data_mac_addr(page, block), &self.data_mac(addr, counter, &ct).to_bytes())?;
        meter.write(AccessCause::Merkle);
        Ok(())
    }

    pub fn read_block(
        &mut self,
        dram: &mut EmulatedDram,
        page: u64,
        block: usize,
        cause: AccessCause,
        meter: &mut Meter,
    ) -> Result<Block> {
        let rv = self.tree.read_verify(dram, page, block, meter)?;
        self.read_with_counter(dram, page, block, rv.counter, cause, meter)
    }

    pub fn write_block(
        &mut self,
        dram: &mut EmulatedDram,
        page: u64,
        block: usize,
        plaintext: &Block,
        cause: AccessCause,
        meter: &mut Meter,
    ) -> Result<()> {
        let leaf = self.tree.leaf(dram, page, meter)?;
        if MerkleTree::leaf_minor_saturated(&leaf, block) {
            // Every block gets a fresh counter: decrypt under the old ones first.
            let mut plain = Vec::with_capacity(BLOCKS_PER_PAGE);
            for b in 0..BLOCKS_PER_PAGE {
                if b == block {
                    plain.push(*plaintext);
                } else {
                    let c = MerkleTree::leaf_counter(&leaf, b);
                    plain.push(self.read_with_counter(dram, page, b, c, cause, meter)?);
                }
            }
            let up = self.tree.write_update(dram, page, block, meter)?;
            debug_assert!(up.page_reset);
            let leaf = self.tree.leaf(dram, page, meter)?;
            for (b, pt) in plain.iter().enumerate() {
                let c = MerkleTree::leaf_counter(&leaf, b);
                self.write_with_counter(dram, page, b, c, pt, cause, meter)?;
            }
            return Ok(());
        }
        let up = self.tree.write_update(dram, page, block, meter)?;
        self.write_with_counter(dram, page, block, up.counter, plaintext, cause, meter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address_space::{MemoryLayout, MIB};
    use crate::crypto::hmac_sha256;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn dram() -> EmulatedDram {
        EmulatedDram::new(MemoryLayout::new(16 * MIB, MIB, 0, 0).unwrap())
    }

    fn tree(d: &mut EmulatedDram, pages: u64, cfg: &MerkleTreeConfig) -> MerkleTree {
        MerkleTree::new(d, PhysAddr(512 * 1024), pages, cfg, [7; 32]).unwrap()
    }

    #[test]
    fn storage_at_full_scale() {
        let cfg = MerkleTreeConfig::default();
        let bytes = merkle_storage_bytes(128 * MIB, &cfg);
        assert_eq!(bytes, 2 * MIB + 64 * 1024 + 2 * 1024);
        let mb = bytes as f64 / MIB as f64;
        assert!((mb - 2.06).abs() <= 0.01, "{mb}");
        assert!(cfg.covers(128 * MIB / PAGE_SIZE));
        // Whole-memory counters at 512 GiB need more than 8 GB.
        let full = merkle_storage_bytes(512 << 30, &cfg);
        assert!(full > 8 * (1u64 << 30));
        assert_eq!(merkle_storage_bytes(PAGE_SIZE, &cfg), 64);
    }

    #[test]
    fn counter_storage_grows_linearly() {
        let cfg = MerkleTreeConfig::default();
        let sizes = [64u64, 128, 256, 512].map(|g| merkle_storage_bytes(g << 30, &cfg) as f64);
        for w in sizes.windows(2) {
            assert!((w[1] / w[0] - 2.0).abs() < 0.01);
        }
    }

    #[test]
    fn node_packing() {
        let mut n = MerkleNode::zeroed();
        for i in 0..64 {
            n.set_minor(i, 6, (i as u64 * 7) % 64);
        }
        n.set_major(99);
        for i in 0..64 {
            assert_eq!(n.minor(i, 6), (i as u64 * 7) % 64);
        }
        assert_eq!(n.child_counter(3, 6), (99 << 6) | 21);
        let mut m = MerkleNode::zeroed();
        m.set_minor(31, 12, 4095);
        assert_eq!(m.minor(31, 12), 4095);
        assert_eq!(m.minor(30, 12), 0);
        assert_eq!(m.bytes[55], 0xff);
    }

    #[test]
    fn fresh_tree_verifies_zero() {
        let mut d = dram();
        let mut t = tree(&mut d, 64, &MerkleTreeConfig::default());
        let mut m = Meter::default();
        let rv = t.read_verify(&mut d, 5, 9, &mut m).unwrap();
        assert_eq!(rv.counter, 0);
        assert!(rv.dram_accesses >= 1 && rv.dram_accesses as usize <= t.depth());
        // Whole path now cached.
        let rv = t.read_verify(&mut d, 5, 9, &mut m).unwrap();
        assert_eq!(rv.dram_accesses, 0);
    }

    #[test]
    fn writes_bump_counter() {
        let mut d = dram();
        let mut t = tree(&mut d, 8, &MerkleTreeConfig::default());
        let mut m = Meter::default();
        t.write_update(&mut d, 3, 4, &mut m).unwrap();
        let up = t.write_update(&mut d, 3, 4, &mut m).unwrap();
        assert_eq!(up.counter, 2);
        t.cache_mut().clear();
        let rv = t.read_verify(&mut d, 3, 4, &mut m).unwrap();
        assert_eq!(rv.counter, 2);
        assert_eq!(t.read_verify(&mut d, 3, 5, &mut m).unwrap().counter, 0);
    }

    #[test]
    fn tampered_counter_detected() {
        let mut d = dram();
        let mut t = tree(&mut d, 8, &MerkleTreeConfig::default());
        let mut m = Meter::default();
        t.write_update(&mut d, 2, 0, &mut m).unwrap();
        t.cache_mut().clear();
        let addr = t.node_addr(0, 2);
        let mut b = d.peek(addr, 64).unwrap();
        b[8] ^= 1;
        d.poke(addr, &b).unwrap();
        let err = t.read_verify(&mut d, 2, 0, &mut m).unwrap_err();
        assert_eq!(err.violation().unwrap().kind, ViolationKind::MerkleNode);
    }

    #[test]
    fn replayed_node_detected() {
        let mut d = dram();
        let mut t = tree(&mut d, 8, &MerkleTreeConfig::default());
        let mut m = Meter::default();
        let addr = t.node_addr(0, 1);
        let old = d.peek(addr, 64).unwrap();
        t.write_update(&mut d, 1, 0, &mut m).unwrap();
        d.poke(addr, &old).unwrap();
        t.cache_mut().clear();
        assert!(t.read_verify(&mut d, 1, 0, &mut m).is_err());
    }

    /// Independent recomputation: decode counters with plain shifts over a
    /// 384-bit little-endian integer, rebuild each MAC with raw HMAC.
    fn oracle_check(t: &MerkleTree, d: &EmulatedDram, key: &[u8; 32], expected_leaf: &dyn Fn(u64, usize) -> u64) {
        let decode = |bytes: &[u8], i: usize, w: u32| -> u64 {
            let mut limbs = [0u128; 3];
            for (k, limb) in limbs.iter_mut().enumerate() {
                *limb = u128::from_le_bytes(bytes[8 + 16 * k..24 + 16 * k].try_into().unwrap());
            }
            let start = i as u32 * w;
            let mut v = 0u64;
            for bit in 0..w {
                let p = start + bit;
                v |= (((limbs[(p / 128) as usize] >> (p % 128)) & 1) as u64) << bit;
            }
            v
        };
        let counts = t.level_counts().to_vec();
        let top = counts.len() - 1;
        for l in 0..counts.len() {
            for i in 0..counts[l] {
                let b = d.peek(t.node_addr(l, i), 64).unwrap();
                let pc = if l == top {
                    t.root_counters()[i as usize]
                } else {
                    let fan = if l + 1 == 0 { 64 } else { t.fanin[l + 1] };
                    let w = t.width(l + 1);
                    let pb = d.peek(t.node_addr(l + 1, i / fan), 64).unwrap();
                    let major = u64::from_le_bytes(pb[..8].try_into().unwrap());
                    (major << w) | decode(&pb, (i % fan) as usize, w)
                };
                let mut msg = vec![l as u8];
                msg.extend_from_slice(&i.to_le_bytes());
                msg.extend_from_slice(&pc.to_le_bytes());
                msg.extend_from_slice(&b[..56]);
                let want = &hmac_sha256(key, &msg)[..8];
                assert_eq!(&b[56..], want, "node ({l},{i}) MAC");
                if l == 0 {
                    let major = u64::from_le_bytes(b[..8].try_into().unwrap());
                    for blk in 0..64 {
                        assert_eq!((major << 6) | decode(&b, blk, 6), expected_leaf(i, blk));
                    }
                }
            }
        }
    }

    #[test]
    fn incremental_state_matches_brute_force() {
        let key = [7u8; 32];
        let cfg = MerkleTreeConfig {
            arity: vec![2, 2, 2],
            ..Default::default()
        };
        let mut d = dram();
        let mut t = tree(&mut d, 8, &cfg);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        // Split-counter semantics tracked independently.
        let mut major = [0u64; 8];
        let mut minor = [[0u64; 64]; 8];
        let mut m = Meter::default();
        for _ in 0..300 {
            let p = rng.gen_range(0..8);
            let b = rng.gen_range(0..4);
            t.write_update(&mut d, p, b, &mut m).unwrap();
            if minor[p as usize][b] == 63 {
                major[p as usize] += 1;
                minor[p as usize] = [0; 64];
            } else {
                minor[p as usize][b] += 1;
            }
        }
        oracle_check(&t, &d, &key, &|p, b| (major[p as usize] << 6) | minor[p as usize][b]);
    }

    #[test]
    fn internal_minor_overflow_remacs_siblings() {
        // Arity 64 gives 6-bit internal minors: 64 writes under one child wrap it.
        let cfg = MerkleTreeConfig {
            arity: vec![64, 64],
            ..Default::default()
        };
        let mut d = dram();
        let mut t = tree(&mut d, 128, &cfg);
        let mut m = Meter::default();
        for i in 0..70 {
            t.write_update(&mut d, 0, i % 3, &mut m).unwrap();
        }
        t.cache_mut().clear();
        for p in [0, 1, 63, 64, 127] {
            t.read_verify(&mut d, p, 0, &mut m).unwrap();
        }
    }

    #[test]
    fn leaf_overflow_resets_page() {
        let mut d = dram();
        let mut t = tree(&mut d, 4, &MerkleTreeConfig::default());
        let mut m = Meter::default();
        let mut last = None;
        for _ in 0..64 {
            last = Some(t.write_update(&mut d, 1, 7, &mut m).unwrap());
        }
        let up = last.unwrap();
        assert!(up.page_reset);
        assert_eq!(up.counter, 64);
        assert_eq!(t.read_verify(&mut d, 1, 0, &mut m).unwrap().counter, 64);
    }

    #[test]
    fn access_count_bounded_by_depth() {
        let cfg = MerkleTreeConfig {
            arity: vec![4, 4, 4],
            counter_cache_bytes: 64,
            ..Default::default()
        };
        let mut d = dram();
        let mut t = tree(&mut d, 64, &cfg);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut m = Meter::default();
        for _ in 0..200 {
            let rv = t.read_verify(&mut d, rng.gen_range(0..64), 0, &mut m).unwrap();
            assert!(rv.dram_accesses as usize <= t.depth());
        }
    }

    fn store() -> (EmulatedDram, EpcStore) {
        let mut d = dram();
        let secrets = TcbSecrets::derive(1);
        let layout = EpcLayout::compute(0, 64, 1, &MerkleTreeConfig::default()).unwrap();
        let s = EpcStore::new(&mut d, layout, &MerkleTreeConfig::default(), &secrets).unwrap();
        (d, s)
    }

    #[test]
    fn epc_layout_fits() {
        let l = EpcLayout::compute(0, 256, 1, &MerkleTreeConfig::default()).unwrap();
        let macs = (l.protected_pages * DATA_MAC_BYTES_PER_PAGE).div_ceil(PAGE_SIZE);
        let tree = merkle_storage_bytes(l.protected_pages * PAGE_SIZE, &MerkleTreeConfig::default()).div_ceil(PAGE_SIZE);
        assert!(l.protected_pages + macs + tree <= 256);
        assert_eq!(l.data_slots + l.top_pages, l.protected_pages);
        assert!(EpcLayout::compute(0, 2, 2, &MerkleTreeConfig::default()).is_err());
    }

    #[test]
    fn epc_store_round_trip_and_overflow() {
        let (mut d, mut s) = store();
        let mut m = Meter::default();
        assert_eq!(s.read_block(&mut d, 3, 2, AccessCause::Data, &mut m).unwrap(), [0; 64]);
        s.write_block(&mut d, 3, 2, &[9; 64], AccessCause::Data, &mut m).unwrap();
        s.write_block(&mut d, 3, 5, &[4; 64], AccessCause::Data, &mut m).unwrap();
        for i in 0..130u8 {
            s.write_block(&mut d, 3, 2, &[i; 64], AccessCause::Data, &mut m).unwrap();
        }
        s.tree_mut().cache_mut().clear();
        assert_eq!(s.read_block(&mut d, 3, 2, AccessCause::Data, &mut m).unwrap(), [129; 64]);
        assert_eq!(s.read_block(&mut d, 3, 5, AccessCause::Data, &mut m).unwrap(), [4; 64]);
    }

    #[test]
    fn epc_data_tamper_detected_even_with_cached_counters() {
        let (mut d, mut s) = store();
        let mut m = Meter::default();
        s.write_block(&mut d, 1, 1, &[1; 64], AccessCause::Data, &mut m).unwrap();
        let a = s.block_addr(1, 1);
        let mut b = d.peek(a, 64).unwrap();
        b[0] ^= 0x80;
        d.poke(a, &b).unwrap();
        let e = s.read_block(&mut d, 1, 1, AccessCause::Data, &mut m).unwrap_err();
        assert_eq!(e.violation().unwrap().kind, ViolationKind::EpcDataMac);
    }

    #[test]
    fn epc_replay_of_block_counter_and_mac_detected() {
        let (mut d, mut s) = store();
        let mut m = Meter::default();
        s.write_block(&mut d, 2, 0, &[1; 64], AccessCause::Data, &mut m).unwrap();
        let leaf_addr = s.tree().node_addr(0, 2);
        let snap = [
            (s.block_addr(2, 0), d.peek(s.block_addr(2, 0), 64).unwrap()),
            (s.data_mac_addr(2, 0), d.peek(s.data_mac_addr(2, 0), 8).unwrap()),
            (leaf_addr, d.peek(leaf_addr, 64).unwrap()),
        ];
        s.write_block(&mut d, 2, 0, &[2; 64], AccessCause::Data, &mut m).unwrap();
        for (a, b) in &snap {
            d.poke(*a, b).unwrap();
        }
        // Counter cached: data MAC under the current counter fails.
        assert!(s.read_block(&mut d, 2, 0, AccessCause::Data, &mut m).is_err());
        // Counter evicted: the stale leaf fails against its parent.
        s.tree_mut().cache_mut().clear();
        let e = s.read_block(&mut d, 2, 0, AccessCause::Data, &mut m).unwrap_err();
        assert_eq!(e.violation().unwrap().kind, ViolationKind::MerkleNode);
    }
}
