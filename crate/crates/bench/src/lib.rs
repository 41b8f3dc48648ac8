//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use semcom_core::baselines::{build_state, BaselineKind, RunSpec};
use semcom_core::data::{generate, DataConfig, TaskDataset};
use semcom_core::selection::Topology;
use semcom_core::training::{ModelConfig, ObjectiveConfig, TrainState};
use semcom_core::Result;

/// A learned-selection state over the default scene at the given widths.
pub fn fixture(hidden: &[usize], n: usize) -> Result<(TrainState, Vec<TaskDataset>)> {
    let data = DataConfig {
        n,
        ..DataConfig::default()
    };
    let model = ModelConfig {
        encoder_hidden: hidden.to_vec(),
        decoder_hidden: hidden.to_vec(),
        selector_hidden: hidden.to_vec(),
        ..ModelConfig::default()
    };
    let topo = Topology::uniform(data.matrix.modality_counts(), data.tasks.len(), 2, 4)?;
    let spec = RunSpec {
        topology: Arc::new(topo),
        data,
        model,
        objective: ObjectiveConfig::default(),
        seed: 7,
    };
    let sets = generate(&spec.data)?;
    let sizes: Vec<usize> = sets.iter().map(TaskDataset::len).collect();
    Ok((build_state(BaselineKind::Pom2Dib, &spec, &sizes)?, sets))
}
