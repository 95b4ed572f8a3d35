// SPDX-License-Identifier: Apache-2.0

//! Physical memory map and the emulated DRAM behind it.
//!
//! The physical space is split, from the bottom up, into
//!
//! ```text
//! [ EPC | eEPC data pages | forest storage | Key Table | scratch ]
//! ```
//!
//! The forest storage and Key Table are carved from the top of the protected
//! span; scratch pages sit above them and carry no integrity protection.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;
pub const BLOCK_SHIFT: u32 = 6;
pub const BLOCK_SIZE: u64 = 1 << BLOCK_SHIFT;
pub const BLOCKS_PER_PAGE: usize = (PAGE_SIZE / BLOCK_SIZE) as usize;
/// Widest supported physical address.
pub const MAX_PHYS_BITS: u32 = 39;
/// Bytes of one wrapped key in the Key Table.
pub const KEY_SLOT_BYTES: u64 = 16;

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhysAddr(pub u64);

impl PhysAddr {
    pub fn page(self) -> PageId {
        PageId(self.0 >> PAGE_SHIFT)
    }

    /// 64-byte block index within the page.
    pub fn block(self) -> usize {
        ((self.0 >> BLOCK_SHIFT) & (BLOCKS_PER_PAGE as u64 - 1)) as usize
    }

    pub fn offset(self, by: u64) -> PhysAddr {
        PhysAddr(self.0 + by)
    }
}

/// Physical page number.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PageId(pub u64);

impl PageId {
    pub fn base(self) -> PhysAddr {
        PhysAddr(self.0 << PAGE_SHIFT)
    }

    pub fn block_addr(self, block: usize) -> PhysAddr {
        PhysAddr((self.0 << PAGE_SHIFT) + (block as u64) * BLOCK_SIZE)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Epc,
    Eepc,
    KeyTable,
    ForestStorage,
    Scratch,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::Epc,
        Region::Eepc,
        Region::KeyTable,
        Region::ForestStorage,
        Region::Scratch,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Epc => "EPC",
            Region::Eepc => "eEPC",
            Region::KeyTable => "KeyTable",
            Region::ForestStorage => "ForestStorage",
            Region::Scratch => "Scratch",
        }
    }
}

/// Partition of the physical address space. All bases and sizes are page
/// aligned; the regions are disjoint and cover `[0, total_size)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLayout {
    pub total_size: u64,
    pub epc_base: u64,
    pub epc_size: u64,
    pub eepc_base: u64,
    pub eepc_size: u64,
    pub forest_base: u64,
    pub forest_size: u64,
    pub key_table_base: u64,
    pub key_table_size: u64,
    pub scratch_base: u64,
    pub scratch_pages: u64,
}

fn page_align_up(v: u64) -> u64 {
    v.div_ceil(PAGE_SIZE) * PAGE_SIZE
}

impl MemoryLayout {
    /// Builds a layout. `forest_bytes` is the storage needed by the lower
    /// forest levels (the top level lives inside the EPC).
    pub fn new(total_size: u64, epc_size: u64, scratch_pages: u64, forest_bytes: u64) -> Result<Self> {
        if total_size == 0 || !total_size.is_multiple_of(PAGE_SIZE) {
            return Err(Error::Layout(format!(
                "total size {total_size:#x} must be a positive multiple of the page size"
            )));
        }
        if total_size > 1 << MAX_PHYS_BITS {
            return Err(Error::Layout(format!(
                "total size {total_size:#x} exceeds the {MAX_PHYS_BITS}-bit physical space"
            )));
        }
        if epc_size == 0 || !epc_size.is_multiple_of(PAGE_SIZE) {
            return Err(Error::Layout("EPC size must be a positive page multiple".into()));
        }
        let key_table_size = page_align_up((total_size / PAGE_SIZE) * KEY_SLOT_BYTES);
        let forest_size = page_align_up(forest_bytes);
        let scratch_size = scratch_pages * PAGE_SIZE;
        let reserved = epc_size + key_table_size + forest_size + scratch_size;
        if reserved >= total_size {
            return Err(Error::Layout(format!(
                "EPC, Key Table, forest and scratch ({reserved:#x} bytes) leave no eEPC in {total_size:#x}"
            )));
        }
        let eepc_size = total_size - reserved;
        let eepc_base = epc_size;
        let forest_base = eepc_base + eepc_size;
        let key_table_base = forest_base + forest_size;
        let scratch_base = key_table_base + key_table_size;
        Ok(Self {
            total_size,
            epc_base: 0,
            epc_size,
            eepc_base,
            eepc_size,
            forest_base,
            forest_size,
            key_table_base,
            key_table_size,
            scratch_base,
            scratch_pages,
        })
    }

    pub fn classify(&self, addr: PhysAddr) -> Result<Region> {
        let a = addr.0;
        if a >= self.total_size {
            return Err(Error::AddressOutOfRange {
                addr: a,
                size: self.total_size,
            });
        }
        Ok(if a < self.epc_base + self.epc_size {
            Region::Epc
        } else if a < self.forest_base {
            Region::Eepc
        } else if a < self.key_table_base {
            Region::ForestStorage
        } else if a < self.scratch_base {
            Region::KeyTable
        } else {
            Region::Scratch
        })
    }

    pub fn region_bounds(&self, region: Region) -> (u64, u64) {
        match region {
            Region::Epc => (self.epc_base, self.epc_size),
            Region::Eepc => (self.eepc_base, self.eepc_size),
            Region::ForestStorage => (self.forest_base, self.forest_size),
            Region::KeyTable => (self.key_table_base, self.key_table_size),
            Region::Scratch => (self.scratch_base, self.scratch_pages * PAGE_SIZE),
        }
    }

    pub fn region_pages(&self, region: Region) -> u64 {
        self.region_bounds(region).1 / PAGE_SIZE
    }

    pub fn epc_pages(&self) -> u64 {
        self.epc_size / PAGE_SIZE
    }

    pub fn eepc_pages(&self) -> u64 {
        self.eepc_size / PAGE_SIZE
    }

    pub fn total_pages(&self) -> u64 {
        self.total_size / PAGE_SIZE
    }

    pub fn first_eepc_page(&self) -> PageId {
        PageId(self.eepc_base >> PAGE_SHIFT)
    }

    /// Index of an eEPC data page relative to the start of the eEPC.
    pub fn eepc_index(&self, page: PageId) -> Result<u64> {
        let base = page.base().0;
        if base < self.eepc_base || base >= self.forest_base {
            return Err(Error::WrongRegion {
                page: page.0,
                expected: "eEPC",
            });
        }
        Ok((base - self.eepc_base) >> PAGE_SHIFT)
    }

    pub fn eepc_page(&self, index: u64) -> PageId {
        PageId((self.eepc_base >> PAGE_SHIFT) + index)
    }

    /// Address of the 16-byte wrapped key belonging to an eEPC page.
    pub fn key_table_slot(&self, page: PageId) -> Result<PhysAddr> {
        let idx = self.eepc_index(page)?;
        Ok(PhysAddr(self.key_table_base + idx * KEY_SLOT_BYTES))
    }

    pub fn scratch_page(&self, index: u64) -> Result<PageId> {
        if index >= self.scratch_pages {
            return Err(Error::WrongRegion {
                page: index,
                expected: "Scratch",
            });
        }
        Ok(PageId((self.scratch_base >> PAGE_SHIFT) + index))
    }
}

/// Per-region read and write counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCounters {
    pub reads: [u64; 5],
    pub writes: [u64; 5],
}

impl RegionCounters {
    pub fn total_reads(&self) -> u64 {
        self.reads.iter().sum()
    }

    pub fn total_writes(&self) -> u64 {
        self.writes.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.total_reads() + self.total_writes()
    }
}

/// Byte-exact sparse DRAM. Untouched pages read as zero. Every counted
/// `read`/`write` call is one memory access.
#[derive(Clone, Debug)]
pub struct EmulatedDram {
    layout: MemoryLayout,
    pages: HashMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
    counters: RegionCounters,
}

impl EmulatedDram {
    pub fn new(layout: MemoryLayout) -> Self {
        Self {
            layout,
            pages: HashMap::new(),
            counters: RegionCounters::default(),
        }
    }

    pub fn layout(&self) -> &MemoryLayout {
        &self.layout
    }

    pub fn counters(&self) -> &RegionCounters {
        &self.counters
    }

    fn check(&self, addr: PhysAddr, len: usize) -> Result<Region> {
        let first = self.layout.classify(addr)?;
        if len > 1 {
            let last = self.layout.classify(addr.offset(len as u64 - 1))?;
            if last != first {
                return Err(Error::CrossRegion { addr: addr.0, len });
            }
        }
        Ok(first)
    }

    fn copy_out(&self, addr: PhysAddr, buf: &mut [u8]) {
        let mut a = addr.0;
        let mut done = 0;
        while done < buf.len() {
            let page = a >> PAGE_SHIFT;
            let off = (a & (PAGE_SIZE - 1)) as usize;
            let n = (PAGE_SIZE as usize - off).min(buf.len() - done);
            match self.pages.get(&page) {
                Some(p) => buf[done..done + n].copy_from_slice(&p[off..off + n]),
                None => buf[done..done + n].fill(0),
            }
            done += n;
            a += n as u64;
        }
    }

    fn copy_in(&mut self, addr: PhysAddr, data: &[u8]) {
        let mut a = addr.0;
        let mut done = 0;
        while done < data.len() {
            let page = a >> PAGE_SHIFT;
            let off = (a & (PAGE_SIZE - 1)) as usize;
            let n = (PAGE_SIZE as usize - off).min(data.len() - done);
            let p = self
                .pages
                .entry(page)
                .or_insert_with(|| Box::new([0u8; PAGE_SIZE as usize]));
            p[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
            a += n as u64;
        }
    }

    pub fn read(&mut self, addr: PhysAddr, buf: &mut [u8]) -> Result<()> {
        let region = self.check(addr, buf.len())?;
        self.counters.reads[region.index()] += 1;
        self.copy_out(addr, buf);
        Ok(())
    }

    pub fn raw_read(&mut self, addr: PhysAddr, len: usize) -> Result<Vec<u8>> {
        let mut v = vec![0u8; len];
        self.read(addr, &mut v)?;
        Ok(v)
    }

    pub fn raw_write(&mut self, addr: PhysAddr, data: &[u8]) -> Result<()> {
        let region = self.check(addr, data.len())?;
        self.counters.writes[region.index()] += 1;
        self.copy_in(addr, data);
        Ok(())
    }

    /// Uncounted read used by the adversary and by test oracles.
    pub fn peek(&self, addr: PhysAddr, len: usize) -> Result<Vec<u8>> {
        self.check(addr, len)?;
        let mut v = vec![0u8; len];
        self.copy_out(addr, &mut v);
        Ok(v)
    }

    /// Uncounted write used by the adversary.
    pub fn poke(&mut self, addr: PhysAddr, data: &[u8]) -> Result<()> {
        self.check(addr, data.len())?;
        self.copy_in(addr, data);
        Ok(())
    }

    /// Number of pages with backing storage allocated.
    pub fn resident_pages(&self) -> usize {
        self.pages.len()
    }
}
