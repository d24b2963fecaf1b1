//! In-memory model of `package.json` and `package-lock.json` (v2/v3).
//!
//! Both documents keep their original JSON object so that serialization only
//! touches what was edited: key order and unknown fields survive untouched.

mod graph;
mod json;
mod lockfile;
mod manifest;
mod path;

pub use lockfile::{DeclaredDep, DependencyInstance, EdgeKind, Lockfile, Scope};
pub use manifest::Manifest;
pub use path::{map_path_to_name, InstallPath};

pub use graph::resolve_with;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed document at line {line}, column {column}: {message}")]
    MalformedDocument {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate key `{key}` in `{section}`")]
    DuplicateKey { section: String, key: String },
    #[error("unsupported lockfile: {0} (lockfileVersion 2 or 3 with a `packages` map is required)")]
    UnsupportedLockfileVersion(String),
    #[error("bad install path `{path}`: {reason}")]
    BadInstallPath { path: String, reason: String },
    #[error("field `{field}` must be {expected}")]
    InvalidField { field: String, expected: &'static str },
    #[error("`{from}` requires `{name}`, which resolves to no installed instance")]
    UnresolvableDependency { from: String, name: String },
}

impl ModelError {
    pub(crate) fn malformed(err: serde_json::Error) -> Self {
        ModelError::MalformedDocument {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}
