//! Trace-based detection and removal of bloated npm dependencies.
//!
//! The pipeline: parse the manifest and lockfile ([`model`]), reduce an
//! OS-level file-access trace to the set of accessed dependency instances
//! ([`trace`]), classify the rest ([`detect`]), rewrite the metadata files
//! ([`transform`]) and confirm the result by reinstalling and re-running the
//! workload ([`validate`]).

pub mod model;
pub mod trace;
pub mod detect;
pub mod transform;
pub mod report;
pub mod validate;
pub mod tracer;
