// SPDX-License-Identifier: Apache-2.0

//! Key composition, the two encryption modes, key wrapping and MACs.
//!
//! Page keys are 256 bits, packed most-significant field first:
//!
//! ```text
//! | hw_key:64 | enclave_id:31 | random:128 | page_addr:27 | block:6 |
//! ```
//!
//! The stored page form `K` has the block field zeroed; the block key `k_b`
//! fills it in. Only the 128-bit random component leaves the TCB, wrapped
//! under the SSK into a 16-byte Key Table slot.
//!
//! The eEPC cipher is AES-256 applied independently to each 16-byte chunk of
//! a 64-byte memory block under `k_b`. The EPC uses AES-256 counter mode
//! whose nonce is (page, block, counter, chunk). MACs are HMAC-SHA-256
//! truncated to 8 bytes.

use aes::cipher::{generic_array::GenericArray, BlockDecrypt, BlockEncrypt, KeyInit};
use aes::Aes256;
use hmac::{Hmac, Mac as _};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::address_space::{BLOCKS_PER_PAGE, BLOCK_SIZE, PAGE_SIZE};
use crate::error::{Error, Result};

pub const ENCLAVE_ID_BITS: u32 = 31;
pub const PAGE_ADDR_BITS: u32 = 27;
pub const BLOCK_ADDR_BITS: u32 = 6;
pub const MAC_BYTES: usize = 8;

pub type Block = [u8; BLOCK_SIZE as usize];

type HmacSha256 = Hmac<Sha256>;

/// 8-byte truncated MAC.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mac(pub u64);

impl Mac {
    pub fn to_bytes(self) -> [u8; MAC_BYTES] {
        self.0.to_le_bytes()
    }

    pub fn from_bytes(b: &[u8]) -> Self {
        let mut a = [0u8; MAC_BYTES];
        a.copy_from_slice(&b[..MAC_BYTES]);
        Mac(u64::from_le_bytes(a))
    }
}

/// HMAC-SHA-256 over the concatenation of `parts`, truncated to 64 bits.
pub fn keyed_hash(key: &[u8], parts: &[&[u8]]) -> Mac {
    let mut m = <HmacSha256 as hmac::Mac>::new_from_slice(key).expect("HMAC accepts any key length");
    for p in parts {
        m.update(p);
    }
    let out = m.finalize().into_bytes();
    Mac::from_bytes(&out[..MAC_BYTES])
}

/// Full HMAC-SHA-256 output; exposed for known-answer testing.
pub fn hmac_sha256(key: &[u8], data: &[u8]) -> [u8; 32] {
    let mut m = <HmacSha256 as hmac::Mac>::new_from_slice(key).expect("HMAC accepts any key length");
    m.update(data);
    m.finalize().into_bytes().into()
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PageKey {
    pub hw_key: u64,
    pub enclave_id: u32,
    pub random: u128,
    pub page_addr: u32,
    pub block_addr: u8,
}

fn check_width(field: &'static str, value: u128, bits: u32) -> Result<()> {
    if bits < 128 && value >> bits != 0 {
        return Err(Error::FieldWidth { field, value, bits });
    }
    Ok(())
}

struct BitPacker {
    bytes: [u8; 32],
    pos: u32,
}

impl BitPacker {
    fn new() -> Self {
        Self {
            bytes: [0; 32],
            pos: 0,
        }
    }

    fn push(&mut self, value: u128, bits: u32) {
        for i in (0..bits).rev() {
            let bit = (value >> i) & 1;
            if bit == 1 {
                let p = self.pos as usize;
                self.bytes[p / 8] |= 0x80 >> (p % 8);
            }
            self.pos += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8; 32],
    pos: u32,
}

impl BitReader<'_> {
    fn take(&mut self, bits: u32) -> u128 {
        let mut v = 0u128;
        for _ in 0..bits {
            let p = self.pos as usize;
            let bit = (self.bytes[p / 8] >> (7 - p % 8)) & 1;
            v = (v << 1) | bit as u128;
            self.pos += 1;
        }
        v
    }
}

impl PageKey {
    /// The all-zero key used for pages that have never been written back.
    pub const NULL: PageKey = PageKey {
        hw_key: 0,
        enclave_id: 0,
        random: 0,
        page_addr: 0,
        block_addr: 0,
    };

    pub fn to_bytes(&self) -> [u8; 32] {
        let mut p = BitPacker::new();
        p.push(self.hw_key as u128, 64);
        p.push(self.enclave_id as u128, ENCLAVE_ID_BITS);
        p.push(self.random, 128);
        p.push(self.page_addr as u128, PAGE_ADDR_BITS);
        p.push(self.block_addr as u128, BLOCK_ADDR_BITS);
        debug_assert_eq!(p.pos, 256);
        p.bytes
    }

    pub fn from_bytes(bytes: &[u8; 32]) -> Self {
        let mut r = BitReader { bytes, pos: 0 };
        PageKey {
            hw_key: r.take(64) as u64,
            enclave_id: r.take(ENCLAVE_ID_BITS) as u32,
            random: r.take(128),
            page_addr: r.take(PAGE_ADDR_BITS) as u32,
            block_addr: r.take(BLOCK_ADDR_BITS) as u8,
        }
    }
}

/// Composes the page form `K` (block bits zero).
pub fn compose_page_key(hw_key: u64, enclave_id: u32, random: u128, page_addr: u64) -> Result<PageKey> {
    check_width("enclave_id", enclave_id as u128, ENCLAVE_ID_BITS)?;
    check_width("page_addr", page_addr as u128, PAGE_ADDR_BITS)?;
    Ok(PageKey {
        hw_key,
        enclave_id,
        random,
        page_addr: page_addr as u32,
        block_addr: 0,
    })
}

pub fn derive_block_key(k: &PageKey, block: usize) -> Result<PageKey> {
    if block >= BLOCKS_PER_PAGE {
        return Err(Error::BlockIndex(block));
    }
    Ok(PageKey {
        block_addr: block as u8,
        ..*k
    })
}

fn aes(key: &[u8; 32]) -> Aes256 {
    Aes256::new(GenericArray::from_slice(key))
}

pub fn ecb_encrypt_block(block_key: &PageKey, plaintext: &Block) -> Block {
    let cipher = aes(&block_key.to_bytes());
    let mut out = *plaintext;
    for chunk in out.chunks_exact_mut(16) {
        cipher.encrypt_block(GenericArray::from_mut_slice(chunk));
    }
    out
}

pub fn ecb_decrypt_block(block_key: &PageKey, ciphertext: &Block) -> Block {
    let cipher = aes(&block_key.to_bytes());
    let mut out = *ciphertext;
    for chunk in out.chunks_exact_mut(16) {
        cipher.decrypt_block(GenericArray::from_mut_slice(chunk));
    }
    out
}

/// Encrypts a whole page, block `b` under `k_b`.
pub fn ecb_encrypt_page(k: &PageKey, plaintext: &[u8]) -> Vec<u8> {
    assert_eq!(plaintext.len(), PAGE_SIZE as usize);
    let mut out = Vec::with_capacity(plaintext.len());
    for (b, chunk) in plaintext.chunks_exact(BLOCK_SIZE as usize).enumerate() {
        let kb = PageKey {
            block_addr: b as u8,
            ..*k
        };
        let blk: &Block = chunk.try_into().unwrap();
        out.extend_from_slice(&ecb_encrypt_block(&kb, blk));
    }
    out
}

/// Counter-mode keystream for one 64-byte block.
pub fn ctr_keystream(region_key: &[u8; 32], page: u64, block: usize, counter: u64) -> Block {
    let cipher = aes(region_key);
    let mut ks = [0u8; BLOCK_SIZE as usize];
    for (i, chunk) in ks.chunks_exact_mut(16).enumerate() {
        chunk[..8].copy_from_slice(&page.to_le_bytes());
        chunk[8] = block as u8;
        chunk[9] = i as u8;
        // 48 bits of counter is ample; the top bits are folded in below.
        chunk[10..16].copy_from_slice(&counter.to_le_bytes()[..6]);
        chunk[8] ^= (counter >> 48) as u8;
        cipher.encrypt_block(GenericArray::from_mut_slice(chunk));
    }
    ks
}

pub fn ctr_encrypt_block(region_key: &[u8; 32], page: u64, block: usize, counter: u64, plaintext: &Block) -> Block {
    let ks = ctr_keystream(region_key, page, block, counter);
    let mut out = *plaintext;
    out.iter_mut().zip(ks.iter()).for_each(|(o, k)| *o ^= k);
    out
}

pub fn ctr_decrypt_block(region_key: &[u8; 32], page: u64, block: usize, counter: u64, ciphertext: &Block) -> Block {
    ctr_encrypt_block(region_key, page, block, counter, ciphertext)
}

/// Leaf MAC: keyed by the page key, over the page as stored in the eEPC.
pub fn page_mac(k: &PageKey, page_bytes: &[u8]) -> Mac {
    assert_eq!(page_bytes.len(), PAGE_SIZE as usize, "page MAC needs a full page");
    keyed_hash(&k.to_bytes(), &[page_bytes])
}

/// System-specific key: second device key followed by boot time.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ssk {
    pub device_key2: u128,
    pub boot_time: u128,
}

impl Ssk {
    pub fn to_bytes(&self) -> [u8; 32] {
        let mut b = [0u8; 32];
        b[..16].copy_from_slice(&self.device_key2.to_be_bytes());
        b[16..].copy_from_slice(&self.boot_time.to_be_bytes());
        b
    }
}

/// Position of an intermediate or top-level forest node.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeRef {
    pub level: u8,
    pub index: u64,
}

/// Upper-level MAC over `children`, bound to the node's position.
pub fn level_mac(ssk: &Ssk, node: NodeRef, children: &[Mac], arity: usize) -> Result<Mac> {
    if children.len() != arity {
        return Err(Error::ArityMismatch {
            expected: arity,
            got: children.len(),
        });
    }
    let mut buf = Vec::with_capacity(children.len() * MAC_BYTES + 9);
    for c in children {
        buf.extend_from_slice(&c.to_bytes());
    }
    buf.push(node.level);
    buf.extend_from_slice(&node.index.to_le_bytes());
    Ok(keyed_hash(&ssk.to_bytes(), &[&buf]))
}

pub fn wrap_key(ssk: &Ssk, k: &PageKey) -> [u8; 16] {
    let cipher = aes(&ssk.to_bytes());
    let mut b = k.random.to_be_bytes();
    cipher.encrypt_block(GenericArray::from_mut_slice(&mut b));
    b
}

/// Recovers the random component from a wrapped slot.
pub fn unwrap_key(ssk: &Ssk, wrapped: &[u8; 16]) -> u128 {
    let cipher = aes(&ssk.to_bytes());
    let mut b = *wrapped;
    cipher.decrypt_block(GenericArray::from_mut_slice(&mut b));
    u128::from_be_bytes(b)
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeySource {
    /// Seeded cryptographic generator.
    #[default]
    Prng,
    /// Monotonic global counter.
    Counter,
}

/// Source of the 128-bit random key components.
#[derive(Clone, Debug)]
pub struct KeyPrng {
    source: KeySource,
    rng: ChaCha20Rng,
    counter: u128,
    draws: u64,
}

impl KeyPrng {
    pub fn new(boot_time: u128, hw_key: u64, source: KeySource) -> Self {
        let mut h = Sha256::new();
        h.update(boot_time.to_le_bytes());
        h.update(hw_key.to_le_bytes());
        let seed: [u8; 32] = h.finalize().into();
        Self {
            source,
            rng: ChaCha20Rng::from_seed(seed),
            counter: 0,
            draws: 0,
        }
    }

    pub fn next_random(&mut self) -> u128 {
        self.draws += 1;
        match self.source {
            KeySource::Prng => {
                let mut b = [0u8; 16];
                self.rng.fill_bytes(&mut b);
                u128::from_le_bytes(b)
            }
            KeySource::Counter => {
                self.counter += 1;
                self.counter
            }
        }
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }
}

/// Secrets held in the TCB for one simulated boot. None of these is ever
/// written to emulated DRAM.
#[derive(Clone, Debug)]
pub struct TcbSecrets {
    pub hw_key: u64,
    pub ssk: Ssk,
    /// Counter-mode key for the EPC.
    pub epc_key: [u8; 32],
    /// Key for EPC data-block MACs.
    pub epc_mac_key: [u8; 32],
    /// Key for counter-tree node MACs.
    pub tree_key: [u8; 32],
}

impl TcbSecrets {
    /// Derives every TCB secret deterministically from a run seed.
    pub fn derive(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5ec5_ca1e);
        let mut k = || {
            let mut b = [0u8; 32];
            rng.fill_bytes(&mut b);
            b
        };
        let a = k();
        let b = k();
        let epc_key = k();
        let epc_mac_key = k();
        let tree_key = k();
        Self {
            hw_key: u64::from_le_bytes(a[..8].try_into().unwrap()),
            ssk: Ssk {
                device_key2: u128::from_le_bytes(b[..16].try_into().unwrap()),
                boot_time: u128::from_le_bytes(b[16..].try_into().unwrap()),
            },
            epc_key,
            epc_mac_key,
            tree_key,
        }
    }
}
