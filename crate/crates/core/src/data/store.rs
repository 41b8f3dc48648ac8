use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coding::Targets;
use crate::data::{DataConfig, TaskDataset, TaskSpec};
use crate::error::{Error, Result};
use crate::io::{read_framed, write_framed};
use crate::tensor::Tensor;

const FORMAT: &str = "semcom-dataset-v1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: DataConfig,
    task_index: usize,
    task: TaskSpec,
    n: usize,
    /// `[k][m]` feature widths, in payload order.
    widths: Vec<Vec<usize>>,
    target_width: usize,
}

pub(super) fn save(path: &Path, ds: &TaskDataset, cfg: &DataConfig, t: usize) -> Result<()> {
    let n = ds.len();
    let widths: Vec<Vec<usize>> = ds.features.iter().map(|r| r.iter().map(Tensor::cols).collect()).collect();
    let target_width = match &ds.targets {
        Targets::Classes(_) => 1,
        Targets::Values(v) => v.first().map_or(0, Vec::len),
    };
    let mut payload: Vec<f64> = ds.digits.iter().map(|&d| d as f64).collect();
    for f in ds.features.iter().flatten() {
        payload.extend_from_slice(f.data());
    }
    match &ds.targets {
        Targets::Classes(c) => payload.extend(c.iter().map(|&c| c as f64)),
        Targets::Values(v) => payload.extend(v.iter().flatten()),
    }
    let header = Header {
        format: FORMAT.into(),
        config: cfg.clone(),
        task_index: t,
        task: ds.task,
        n,
        widths,
        target_width,
    };
    write_framed(path, &header, &payload)
}

pub(super) fn load(path: &Path) -> Result<(TaskDataset, DataConfig)> {
    let (h, payload): (Header, Vec<f64>) = read_framed(path)?;
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if h.format != FORMAT {
        return Err(bad(format!("unexpected format {:?}", h.format)));
    }
    let feat: usize = h.widths.iter().flatten().sum();
    let expect = h.n * (1 + feat + h.target_width);
    if payload.len() != expect {
        return Err(bad(format!("payload holds {} values, header implies {expect}", payload.len())));
    }
    let mut at = 0;
    let mut take = |len: usize| {
        let s = &payload[at..at + len];
        at += len;
        s
    };
    let digits = take(h.n).iter().map(|&v| v as usize).collect();
    let mut features = Vec::with_capacity(h.widths.len());
    for row in &h.widths {
        let mut r = Vec::with_capacity(row.len());
        for &w in row {
            r.push(Tensor::matrix(h.n, w, take(h.n * w).to_vec())?);
        }
        features.push(r);
    }
    let targets = match h.task {
        TaskSpec::Embedding { .. } => Targets::Values(
            take(h.n * h.target_width)
                .chunks(h.target_width.max(1))
                .map(<[f64]>::to_vec)
                .collect(),
        ),
        _ => Targets::Classes(take(h.n).iter().map(|&v| v as usize).collect()),
    };
    Ok((
        TaskDataset {
            task: h.task,
            digits,
            features,
            targets,
        },
        h.config,
    ))
}
