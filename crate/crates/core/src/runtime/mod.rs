//! Orchestration runtime: the checkpoint container, runtime-aware workload
//! balancing, parameter-space model merging, and CSV metrics.

pub mod balance;
pub mod checkpoint;
pub mod merge;
pub mod metrics;
pub mod pack;

pub use balance::{balance_batch, round_robin, Assignment, RuntimeLut, WorkItem};
pub use checkpoint::{Checkpoint, TensorEntry};
pub use merge::merge_models;
pub use metrics::MetricsWriter;
pub use pack::{pack_dit, pack_vae, unpack_dit, unpack_vae};
