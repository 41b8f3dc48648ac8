//! Reference schemes sharing the base model.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coding::CodecShape;
use crate::data::{DataConfig, TaskDataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Evaluation, MetricsRow, RateEstimator, KNN_NEIGHBORS};
use crate::rng::{stream, Domain};
use crate::selection::{project, SelectionStreams, SelectorLogits, SelectionVector, Topology};
use crate::training::{LossReport, ModelConfig, ObjectiveConfig, SelectionMode, TrainState};

/// Tries allowed when drawing a regular selection for RS-DIB.
const REGULAR_ATTEMPTS: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineKind {
    /// One regular selection drawn uniformly at initialization, then frozen.
    #[serde(rename = "RS_DIB")]
    RsDib,
    /// Every slot active, budgets ignored.
    #[serde(rename = "FULL_DIB")]
    FullDib,
    /// Full participation, deterministic encoders, global cross-entropy only.
    #[serde(rename = "DLSC")]
    Dlsc,
    /// Learned probabilistic selection.
    #[serde(rename = "POM2DIB")]
    Pom2Dib,
}

impl BaselineKind {
    /// Table order.
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Pom2Dib,
        BaselineKind::RsDib,
        BaselineKind::FullDib,
        BaselineKind::Dlsc,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            BaselineKind::RsDib => "RS_DIB",
            BaselineKind::FullDib => "FULL_DIB",
            BaselineKind::Dlsc => "DLSC",
            BaselineKind::Pom2Dib => "POM2DIB",
        }
    }

    /// Whether the scheme respects the link budgets.
    pub fn under_limits(self) -> bool {
        matches!(self, BaselineKind::RsDib | BaselineKind::Pom2Dib)
    }

    pub fn rate_estimator(self) -> RateEstimator {
        match self {
            BaselineKind::Dlsc => RateEstimator::KnnEntropy { k: KNN_NEIGHBORS },
            _ => RateEstimator::Mutual,
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

/// A selection drawn from the uniform policy and projected, redrawn until
/// no receiver is starved.
pub fn random_regular_selection(topo: &Arc<Topology>, seed: u64) -> Result<SelectionVector> {
    let logits = SelectorLogits {
        rx: (0..topo.receivers())
            .map(|t| vec![0.0; topo.rx_budget(t) + topo.transmitters()])
            .collect(),
        tx: (0..topo.transmitters())
            .map(|k| vec![vec![0.0; topo.tx_local_budget(k) + topo.modalities(k)]; topo.receivers()])
            .collect(),
    };
    for attempt in 0..REGULAR_ATTEMPTS {
        let streams = SelectionStreams {
            seed: seed ^ 0x5253,
            step: 0,
            sample: attempt,
        };
        let raw = logits.sample(topo, streams).to_vector(topo);
        let p = project(&raw, &mut stream(seed, Domain::Projection, &[u64::MAX, attempt]));
        if p.selection.is_regular() {
            return Ok(p.selection);
        }
    }
    Err(Error::Invalid(format!(
        "no regular selection after {REGULAR_ATTEMPTS} uniform draws"
    )))
}

/// Everything a run needs besides the data.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub topology: Arc<Topology>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub seed: u64,
}

impl RunSpec {
    pub fn codec_shape(&self) -> CodecShape {
        CodecShape {
            input_dims: self.data.matrix.input_dims(),
            tasks: self.data.tasks.iter().map(|t| t.kind()).collect(),
            latent_dim: self.model.latent_dim,
            encoder_hidden: self.model.encoder_hidden.clone(),
            decoder_hidden: self.model.decoder_hidden.clone(),
        }
    }
}

/// The untrained state of one scheme.
pub fn build_state(kind: BaselineKind, spec: &RunSpec, dataset_sizes: &[usize]) -> Result<TrainState> {
    let mut objective = spec.objective.clone();
    let (mode, stochastic) = match kind {
        BaselineKind::Pom2Dib => (SelectionMode::Learned, true),
        BaselineKind::RsDib => (
            SelectionMode::Fixed(random_regular_selection(&spec.topology, spec.seed)?),
            true,
        ),
        BaselineKind::FullDib => (SelectionMode::Full, true),
        BaselineKind::Dlsc => {
            objective.beta = 0.0;
            (SelectionMode::Full, false)
        }
    };
    TrainState::new(
        spec.topology.clone(),
        spec.codec_shape(),
        &spec.model,
        objective,
        mode,
        stochastic,
        dataset_sizes,
        spec.seed,
    )
}

/// Result of training and evaluating one scheme.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub kind: BaselineKind,
    pub state: TrainState,
    pub log: Vec<LossReport>,
    pub evaluation: Evaluation,
    pub metrics: MetricsRow,
}

/// Trains `kind` for the configured number of epochs, calling `observe`
/// after every round, then evaluates on `eval_rows` held-out rows.
pub fn run_baseline(
    kind: BaselineKind,
    spec: &RunSpec,
    train: &[TaskDataset],
    eval: &[TaskDataset],
    eval_rows: usize,
    mut observe: impl FnMut(&TrainState, &LossReport) -> Result<()>,
) -> Result<RunOutcome> {
    let sizes: Vec<usize> = train.iter().map(TaskDataset::len).collect();
    let mut state = build_state(kind, spec, &sizes)?;
    let mut log = Vec::with_capacity(spec.objective.epochs);
    for _ in 0..spec.objective.epochs {
        let r = state.train_epoch(train)?;
        observe(&state, &r)?;
        log.push(r);
    }
    let evaluation = evaluate(&state, eval, eval_rows, kind.rate_estimator(), 0)?;
    let metrics = evaluation.row()?;
    Ok(RunOutcome {
        kind,
        state,
        log,
        evaluation,
        metrics,
    })
}
