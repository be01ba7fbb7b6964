//! Scene and edit descriptors, CLI plumbing and the HTTP service.

pub mod api;
pub mod error;
pub mod jobs;
pub mod scene;

pub use error::ServiceError;

/// Seed used when a request does not give one.
pub const DEFAULT_SEED: u64 = 123;
