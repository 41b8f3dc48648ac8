//! Synthetic multi-modal, multi-task data.
//!
//! A latent digit `y` drives every signal modality through a fixed class
//! template per modality type; the same template set is shared by every
//! position hosting that type, so repeated types are redundant views of the
//! same digit with independent noise. Noise modalities use the same
//! generator but follow a digit drawn independently of `y`.

mod batch;
mod store;

use std::path::Path;

use rand::RngExt;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coding::{Targets, TaskKind};
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;

pub use batch::{batch_iter, BatchStream};

pub const DIGITS: usize = 10;
const RING: [usize; 5] = [0, 4, 6, 8, 9];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityType {
    A,
    B,
    C,
}

impl ModalityType {
    pub fn is_noise(self) -> bool {
        self == ModalityType::C
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

/// Feature width per modality type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TypeDims {
    pub a: usize,
    pub b: usize,
    pub c: usize,
}

impl Default for TypeDims {
    fn default() -> Self {
        TypeDims { a: 196, b: 128, c: 64 }
    }
}

impl TypeDims {
    pub fn of(&self, ty: ModalityType) -> usize {
        match ty {
            ModalityType::A => self.a,
            ModalityType::B => self.b,
            ModalityType::C => self.c,
        }
    }
}

/// Which modality type sits at each `(k, m)` position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalityMatrix {
    pub grid: Vec<Vec<ModalityType>>,
    pub dims: TypeDims,
}

impl Default for ModalityMatrix {
    fn default() -> Self {
        use ModalityType::*;
        ModalityMatrix {
            grid: vec![vec![C, C, A], vec![C, A, B], vec![A, B, C]],
            dims: TypeDims::default(),
        }
    }
}

impl ModalityMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.iter().any(Vec::is_empty) {
            return Err(Error::config("data.matrix", "every transmitter needs at least one modality"));
        }
        if self.grid.iter().flatten().all(|t| t.is_noise()) {
            return Err(Error::config("data.matrix", "at least one signal modality is required"));
        }
        if self.dims.a == 0 || self.dims.b == 0 || self.dims.c == 0 {
            return Err(Error::config("data.dims", "widths must be positive"));
        }
        Ok(())
    }

    pub fn transmitters(&self) -> usize {
        self.grid.len()
    }

    pub fn modality_counts(&self) -> Vec<usize> {
        self.grid.iter().map(Vec::len).collect()
    }

    pub fn input_dims(&self) -> Vec<Vec<usize>> {
        self.grid
            .iter()
            .map(|row| row.iter().map(|t| self.dims.of(*t)).collect())
            .collect()
    }

    pub fn kind(&self, k: usize, m: usize) -> ModalityType {
        self.grid[k][m]
    }
}

/// How a task reads the latent digit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "label", rename_all = "snake_case")]
pub enum TaskSpec {
    Parity,
    Ring,
    Identity,
    /// Digit placed on a helix in `R^3`, plus Gaussian noise.
    Embedding { noise: f64 },
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSpec::Parity | TaskSpec::Ring => TaskKind::Classification { classes: 2 },
            TaskSpec::Identity => TaskKind::Classification { classes: DIGITS },
            TaskSpec::Embedding { .. } => TaskKind::Regression { dim: 3 },
        }
    }

    pub fn class_of(&self, digit: usize) -> Option<usize> {
        match self {
            TaskSpec::Parity => Some(digit % 2),
            TaskSpec::Ring => Some(usize::from(RING.contains(&digit))),
            TaskSpec::Identity => Some(digit),
            TaskSpec::Embedding { .. } => None,
        }
    }

    pub fn embed(digit: usize) -> [f64; 3] {
        let angle = 2.0 * std::f64::consts::PI * digit as f64 / DIGITS as f64;
        [angle.cos(), angle.sin(), digit as f64 / (DIGITS - 1) as f64]
    }

    pub fn default_tasks() -> Vec<TaskSpec> {
        vec![TaskSpec::Parity, TaskSpec::Ring, TaskSpec::Identity]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub matrix: ModalityMatrix,
    pub tasks: Vec<TaskSpec>,
    /// Samples per task dataset.
    pub n: usize,
    /// Per-entry noise standard deviation.
    pub sigma: f64,
    /// Expected distance between two class templates, in units of `sigma`.
    pub separation: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            matrix: ModalityMatrix::default(),
            tasks: TaskSpec::default_tasks(),
            n: 5000,
            sigma: 0.5,
            separation: 5.4,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.matrix.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::config("data.tasks", "need at least one task"));
        }
        if self.n == 0 {
            return Err(Error::config("data.n", "must be at least 1"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("data.sigma", "must be positive"));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::config("data.separation", "must be non-negative"));
        }
        for t in &self.tasks {
            if let TaskSpec::Embedding { noise } = t {
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return Err(Error::config("data.tasks", "embedding noise must be non-negative"));
                }
            }
        }
        Ok(())
    }

    /// Per-entry template standard deviation for a type of width `d`.
    fn template_scale(&self, d: usize) -> f64 {
        self.separation * self.sigma / (2.0 * d as f64).sqrt()
    }
}

/// Class templates, `[type][digit] -> vector`.
#[derive(Clone, Debug, PartialEq)]
pub struct Templates {
    by_type: Vec<Vec<Vec<f64>>>,
}

impl Templates {
    pub fn new(cfg: &DataConfig) -> Self {
        let by_type = [ModalityType::A, ModalityType::B, ModalityType::C]
            .iter()
            .map(|&ty| {
                let d = cfg.matrix.dims.of(ty);
                let s = cfg.template_scale(d);
                let mut rng = stream(cfg.seed, Domain::Data, &[0, ty.tag()]);
                (0..DIGITS)
                    .map(|_| (0..d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect())
                    .collect()
            })
            .collect();
        Templates { by_type }
    }

    pub fn get(&self, ty: ModalityType, digit: usize) -> &[f64] {
        &self.by_type[ty as usize][digit]
    }
}

/// One task's dataset: synchronized features for every `(k, m)` plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task: TaskSpec,
    pub digits: Vec<usize>,
    /// `[k][m]`, each `[n, d]`.
    pub features: Vec<Vec<Tensor>>,
    pub targets: Targets,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.digits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }

    /// Rows `idx` of slot `(k, m)`.
    pub fn gather(&self, k: usize, m: usize, idx: &[usize]) -> Tensor {
        let src = &self.features[k][m];
        let d = src.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(src.row_slice(i));
        }
        Tensor::matrix(idx.len(), d, data).expect("gathered rows")
    }

    pub fn gather_targets(&self, idx: &[usize]) -> Targets {
        match &self.targets {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    pub fn save(&self, path: &Path, cfg: &DataConfig, t: usize) -> Result<()> {
        store::save(path, self, cfg, t)
    }

    pub fn load(path: &Path) -> Result<(TaskDataset, DataConfig)> {
        store::load(path)
    }
}

fn draw_features(
    cfg: &DataConfig,
    templates: &Templates,
    digits: &[usize],
    split: u64,
    t: usize,
    k: usize,
    m: usize,
) -> Tensor {
    let ty = cfg.matrix.kind(k, m);
    let d = cfg.matrix.dims.of(ty);
    let tags = [t as u64, k as u64, m as u64];
    let mut noise = stream(cfg.seed, Domain::Data, &[2, split, tags[0], tags[1], tags[2]]);
    let mut decoy = stream(cfg.seed, Domain::Data, &[3, split, tags[0], tags[1], tags[2]]);
    let mut data = Vec::with_capacity(digits.len() * d);
    for &y in digits {
        let source = if ty.is_noise() { decoy.random_range(0..DIGITS) } else { y };
        let tpl = templates.get(ty, source);
        data.extend(
            tpl.iter()
                .map(|c| c + cfg.sigma * noise.sample::<f64, _>(StandardNormal)),
        );
    }
    Tensor::matrix(digits.len(), d, data).expect("sized")
}

/// Generates one independent training dataset per task.
pub fn generate(cfg: &DataConfig) -> Result<Vec<TaskDataset>> {
    generate_split(cfg, 0, cfg.n)
}

/// Held-out samples: same templates, fresh draws.
pub fn generate_eval(cfg: &DataConfig, n: usize) -> Result<Vec<TaskDataset>> {
    generate_split(cfg, 1, n)
}

fn generate_split(cfg: &DataConfig, split: u64, n: usize) -> Result<Vec<TaskDataset>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::config("data.n", "must be at least 1"));
    }
    let templates = Templates::new(cfg);
    let mut out = Vec::with_capacity(cfg.tasks.len());
    for (t, task) in cfg.tasks.iter().enumerate() {
        let mut rng = stream(cfg.seed, Domain::Data, &[1, split, t as u64]);
        let digits: Vec<usize> = (0..n).map(|_| rng.random_range(0..DIGITS)).collect();
        let features = cfg
            .matrix
            .grid
            .iter()
            .enumerate()
            .map(|(k, row)| (0..row.len()).map(|m| draw_features(cfg, &templates, &digits, split, t, k, m)).collect())
            .collect();
        let targets = match task {
            TaskSpec::Embedding { noise } => {
                let mut rng = stream(cfg.seed, Domain::Data, &[4, split, t as u64]);
                Targets::Values(
                    digits
                        .iter()
                        .map(|&y| {
                            TaskSpec::embed(y)
                                .iter()
                                .map(|v| v + noise * rng.sample::<f64, _>(StandardNormal))
                                .collect()
                        })
                        .collect(),
                )
            }
            _ => Targets::Classes(digits.iter().map(|&y| task.class_of(y).expect("classification")).collect()),
        };
        out.push(TaskDataset {
            task: *task,
            digits,
            features,
            targets,
        });
    }
    Ok(out)
}
