//! Parameter checkpoints: a framed file (see [`crate::io`]) whose JSON header
//! lists every tensor as `(name, shape, offset)`, offsets counted in f64
//! elements from the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_framed, write_framed};
use crate::nn::ParamStore;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub tensors: Vec<CheckpointEntry>,
}

const FORMAT: &str = "semcom-checkpoint-v1";

/// Saves several stores into one file; each tensor name is prefixed with
/// `"{group}/"`.
pub fn save(path: &Path, groups: &[(&str, &ParamStore)]) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (group, store) in groups {
        for (name, value) in store.named_values() {
            tensors.push(CheckpointEntry {
                name: format!("{group}/{name}"),
                shape: value.shape().to_vec(),
                offset: payload.len(),
            });
            payload.extend_from_slice(value.data());
        }
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        tensors,
    };
    write_framed(path, &header, &payload)
}

/// Loads tensors of `group` into a store with identical layout.
pub fn load_into(path: &Path, group: &str, store: &mut ParamStore) -> Result<()> {
    let (header, payload): (CheckpointHeader, Vec<f64>) = read_framed(path)?;
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if header.format != FORMAT {
        return Err(bad(format!("unknown format {}", header.format)));
    }
    let prefix = format!("{group}/");
    let entries: Vec<&CheckpointEntry> = header
        .tensors
        .iter()
        .filter(|e| e.name.starts_with(&prefix))
        .collect();
    if entries.len() != store.len() {
        return Err(bad(format!(
            "group {group} has {} tensors, store expects {}",
            entries.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, e) in ids.into_iter().zip(entries) {
        let expected = format!("{prefix}{}", store.name(id));
        if e.name != expected || e.shape != store.value(id).shape() {
            return Err(bad(format!(
                "tensor {} {:?} does not match {expected} {:?}",
                e.name,
                e.shape,
                store.value(id).shape()
            )));
        }
        let n = store.value(id).len();
        let src = payload
            .get(e.offset..e.offset + n)
            .ok_or_else(|| bad(format!("tensor {} runs past the payload", e.name)))?;
        store.value_mut(id).data_mut().copy_from_slice(src);
    }
    Ok(())
}
