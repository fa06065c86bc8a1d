//! Library surface of the command-line orchestrator, shared with the
//! acceptance suite.

pub mod config;
pub mod hashing;
pub mod phases;

pub use config::{Phase, RunConfig};
pub use hashing::{config_hash, hash_file, sha256_hex, RunManifest};
