//! Parameter-space model merging: weighted averages over identical tensor
//! tables, with parent lineage recorded in the header.

use crate::error::{Error, Result};

use super::checkpoint::{Checkpoint, TensorEntry};

/// Merge checkpoints by per-parameter weighted average. Tables must match
/// exactly (names, dtypes, shapes); weights must sum to 1. Accumulation runs
/// in f64, so merging identical f32 models is bit-exact.
pub fn merge_models(checkpoints: &[&Checkpoint], weights: &[f64]) -> Result<Checkpoint> {
    if checkpoints.is_empty() || checkpoints.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} checkpoints with {} weights",
            checkpoints.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("merge weights sum to {total}")));
    }
    let first = checkpoints[0];
    for (ci, c) in checkpoints.iter().enumerate().skip(1) {
        if c.entries().len() != first.entries().len() {
            return Err(Error::invalid(format!(
                "checkpoint {ci} has {} tensors, expected {}",
                c.entries().len(),
                first.entries().len()
            )));
        }
        for ((name_a, ea), (name_b, eb)) in first.entries().iter().zip(c.entries()) {
            if name_a != name_b || ea.dtype() != eb.dtype() || ea.shape() != eb.shape() {
                return Err(Error::invalid(format!(
                    "parameter table mismatch at {name_a}: checkpoint {ci} holds {name_b} {:?}",
                    eb.shape()
                )));
            }
        }
    }
    let mut out = Checkpoint::new("merge", 0, &first.config_hash);
    out.extra.insert(
        "parents".into(),
        checkpoints
            .iter()
            .map(|c| format!("{}:{}", c.phase, c.step))
            .collect::<Vec<_>>()
            .join(","),
    );
    out.extra.insert(
        "merge_weights".into(),
        weights
            .iter()
            .map(|w| format!("{w}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    for (ti, (name, entry)) in first.entries().iter().enumerate() {
        let merged = match entry {
            TensorEntry::F32 { shape, data } => {
                let mut acc = vec![0.0f64; data.len()];
                for (c, &w) in checkpoints.iter().zip(weights) {
                    let TensorEntry::F32 { data, .. } = &c.entries()[ti].1 else {
                        unreachable!("dtype checked above");
                    };
                    for (a, &v) in acc.iter_mut().zip(data) {
                        *a += w * v as f64;
                    }
                }
                TensorEntry::F32 {
                    shape: shape.clone(),
                    data: acc.into_iter().map(|v| v as f32).collect(),
                }
            }
            TensorEntry::F64 { shape, data } => {
                let mut acc = vec![0.0f64; data.len()];
                for (c, &w) in checkpoints.iter().zip(weights) {
                    let TensorEntry::F64 { data, .. } = &c.entries()[ti].1 else {
                        unreachable!("dtype checked above");
                    };
                    for (a, &v) in acc.iter_mut().zip(data) {
                        *a += w * v;
                    }
                }
                TensorEntry::F64 {
                    shape: shape.clone(),
                    data: acc,
                }
            }
        };
        out.insert_entry(name, merged)?;
    }
    Ok(out)
}
