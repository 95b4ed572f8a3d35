// SPDX-License-Identifier: Apache-2.0

pub mod address_space;
pub mod adversary;
pub mod crypto;
pub mod epc_manager;
pub mod epc_merkle;
pub mod error;
pub mod mac_forest;
pub mod mvc;
pub mod sim;
pub mod timing;
pub mod workload;

pub use error::{Error, Result, SecurityViolation, ViolationKind};
