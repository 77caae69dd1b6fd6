//! HTTP service, client and benchmark runner around the rollguard monitor.

pub mod api;
pub mod backend;
pub mod bench;
pub mod client;
pub mod server;

pub use api::{ApiError, SCHEMA_VERSION};
pub use backend::Backend;
pub use client::Client;
