//! Rollback-aware state continuity for persistent objects.

pub mod audit;
pub mod codec;
pub mod config;
pub mod content_store;
pub mod digest;
pub mod error;
mod fsutil;
pub mod hardware_root;
pub mod harness;
pub mod merkle;
pub mod monitor;
pub mod policy;
pub mod records;
pub mod state;

pub use digest::Digest;
pub use error::{Error, Ineligibility, Result};
