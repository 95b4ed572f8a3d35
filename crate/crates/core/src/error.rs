// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};
use std::fmt;

/// The class of integrity or authenticity check that failed.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A counter-tree node MAC did not match its parent counter.
    MerkleNode,
    /// An EPC data block MAC did not match.
    EpcDataMac,
    /// The recomputed page MAC did not match the stored leaf.
    ForestLeaf,
    /// A recomputed intermediate forest MAC did not match the stored node.
    ForestIntermediate,
    /// A recomputed top-level forest MAC did not match the EPC copy.
    ForestTop,
    /// An enclave touched an EPC slot owned by another enclave.
    CrossEnclaveMapping,
    /// A secure virtual page was mapped outside secure memory.
    InsecureMapping,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::MerkleNode => "counter tree node MAC mismatch",
            ViolationKind::EpcDataMac => "EPC data MAC mismatch",
            ViolationKind::ForestLeaf => "page MAC mismatch",
            ViolationKind::ForestIntermediate => "intermediate forest MAC mismatch",
            ViolationKind::ForestTop => "top-level forest MAC mismatch",
            ViolationKind::CrossEnclaveMapping => "cross-enclave mapping",
            ViolationKind::InsecureMapping => "secure page mapped to insecure memory",
        };
        f.write_str(s)
    }
}

/// A catastrophic failure: terminal for the run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityViolation {
    pub kind: ViolationKind,
    /// Physical page number the failing check was about, when known.
    pub page: Option<u64>,
    /// Instructions executed speculatively between enqueue and detection
    /// (deferred verification only).
    pub speculative_instructions: u64,
}

impl SecurityViolation {
    pub fn new(kind: ViolationKind, page: Option<u64>) -> Self {
        Self {
            kind,
            page,
            speculative_instructions: 0,
        }
    }
}

impl fmt::Display for SecurityViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if let Some(p) = self.page {
            write!(f, " at page {p:#x}")?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("catastrophic failure: {0}")]
    CatastrophicFailure(SecurityViolation),
    #[error("address {addr:#x} outside physical memory of {size:#x} bytes")]
    AddressOutOfRange { addr: u64, size: u64 },
    #[error("access {addr:#x}+{len} crosses a region boundary")]
    CrossRegion { addr: u64, len: usize },
    #[error("invalid memory layout: {0}")]
    Layout(String),
    #[error("page {page:#x} is not in the {expected} region")]
    WrongRegion { page: u64, expected: &'static str },
    #[error("field `{field}` value {value:#x} exceeds {bits} bits")]
    FieldWidth {
        field: &'static str,
        value: u128,
        bits: u32,
    },
    #[error("block index {0} out of range (0..64)")]
    BlockIndex(usize),
    #[error("expected {expected} child MACs, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown timing event `{0}`")]
    UnknownEvent(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("enclave memory exhausted: no free eEPC page")]
    OutOfMemory,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn violation(&self) -> Option<&SecurityViolation> {
        match self {
            Error::CatastrophicFailure(v) => Some(v),
            _ => None,
        }
    }
}

impl From<SecurityViolation> for Error {
    fn from(v: SecurityViolation) -> Self {
        Error::CatastrophicFailure(v)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
