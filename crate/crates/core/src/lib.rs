//! Asymmetric virtual memory paging for hybrid attention/SSM caches.
//!
//! The crate provides a two-pool paged allocator addressed through 32-bit
//! pool-tagged handles, a capacity rebalancer that migrates pages between the
//! pools when an allocation fails, baseline allocator variants, seeded
//! workload generators, a tick-driven serving simulator and the statistics
//! and sweep machinery used to compare the variants.

pub mod allocators;
pub mod backing_stores;
pub mod error;
pub mod handle_space;
pub mod rebalancer;
pub mod report;
pub mod rng;
pub mod simulator;
pub mod stats;
pub mod sweep;
pub mod workloads;

pub use error::{AvmpError, CapacityError, Result};
