//! Joint training of selectors and codecs, and inference.

mod config;
mod gradient;
mod infer;
mod objective;

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::coding::{argmax, Codec, CodecShape, Targets, TaskKind};
use crate::data::{BatchStream, TaskDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::AdamState;
use crate::rng::{stream, Domain};
use crate::selection::{
    draw_common_randomness, exact_marginals, project, DrawRecord, SelectionStreams, SelectionVector, SelectorPolicy,
    Topology,
};
use crate::tensor::Tensor;

pub use config::{ModelConfig, ObjectiveConfig};
pub use gradient::{baseline_subtraction, policy_gradient};
pub use infer::{infer, infer_with_selection, session_selection, Inference, INFER_ATTEMPTS};
pub use objective::{batch_objective, sample_losses, CodingBatch, TaskTerms};

/// How the characteristic vector of each sample is obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum SelectionMode {
    /// Sampled from the cooperative selectors, then projected.
    Learned,
    /// The same vector for every sample.
    Fixed(SelectionVector),
    /// Every slot active, budgets ignored.
    Full,
}

/// Everything collected for one sample of one training round.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub u: Vec<f64>,
    pub draw: Option<DrawRecord>,
    /// Characteristic vector after projection.
    pub selection: SelectionVector,
    pub starved: Vec<usize>,
    /// `L_t^i` per task.
    pub losses: Vec<f64>,
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub global_ce: f64,
    pub local_ce_sum: f64,
    pub rate: f64,
    /// Training-batch top-1 accuracy in percent, or mean squared error.
    pub metric: f64,
    pub penalty: f64,
    pub sparse: f64,
}

/// Batch means of the objective's parts for one training round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: u64,
    pub beta: f64,
    pub total: f64,
    pub tasks: Vec<TaskReport>,
    pub penalty: f64,
    pub sparse: f64,
    /// Expected number of active slots under the current policy.
    pub expected_selection: f64,
    pub log_prob_mean: f64,
}

impl LossReport {
    /// The total rebuilt from its parts.
    pub fn recomputed_total(&self) -> f64 {
        self.tasks
            .iter()
            .map(|t| t.global_ce + self.beta * (t.local_ce_sum + t.rate))
            .sum::<f64>()
            + self.penalty
            + self.sparse
    }
}

pub fn metric_of(kind: TaskKind, output: &Tensor, targets: &Targets) -> f64 {
    let n = output.rows();
    match (kind, targets) {
        (TaskKind::Classification { .. }, Targets::Classes(y)) => {
            let hits = (0..n).filter(|&i| argmax(output.row_slice(i)) == y[i]).count();
            100.0 * hits as f64 / n as f64
        }
        (TaskKind::Regression { dim }, Targets::Values(v)) => {
            let se: f64 = (0..n)
                .map(|i| output.row_slice(i).iter().zip(&v[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .sum();
            se / (n * dim) as f64
        }
        _ => f64::NAN,
    }
}

/// Selection and evaluation steps live far above any training epoch so
/// their streams never alias a training round's.
const ESTIMATE_STEPS: u64 = 1 << 62;

struct Round {
    sel: Selected,
    batch: CodingBatch,
    penalty: Vec<Vec<f64>>,
    sparse: Vec<Vec<f64>>,
}

struct Selected {
    us: Vec<Vec<f64>>,
    draws: Vec<Option<DrawRecord>>,
    selections: Vec<SelectionVector>,
    starved: Vec<Vec<usize>>,
    expected: f64,
    log_probs: Vec<f64>,
}

impl Selected {
    fn fixed(us: Vec<Vec<f64>>, a: SelectionVector) -> Self {
        let b = us.len();
        Selected {
            expected: a.count_ones() as f64,
            draws: vec![None; b],
            selections: vec![a; b],
            starved: vec![Vec::new(); b],
            log_probs: vec![0.0; b],
            us,
        }
    }
}

/// Trainable state of one run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub topo: Arc<Topology>,
    pub codec: Codec,
    pub policy: SelectorPolicy,
    pub coding_opt: AdamState,
    pub selection_opt: AdamState,
    pub objective: ObjectiveConfig,
    pub mode: SelectionMode,
    /// Reparameterized encoders when set; `z = mu` otherwise.
    pub stochastic: bool,
    /// Apply the selector update (only meaningful in learned mode).
    pub train_selection: bool,
    pub seed: u64,
    epoch: u64,
    streams: Vec<BatchStream>,
    last_records: Vec<StepRecord>,
}

impl TrainState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        topo: Arc<Topology>,
        shape: CodecShape,
        model: &ModelConfig,
        objective: ObjectiveConfig,
        mode: SelectionMode,
        stochastic: bool,
        dataset_sizes: &[usize],
        seed: u64,
    ) -> Result<Self> {
        objective.validate()?;
        model.validate()?;
        if dataset_sizes.len() != topo.receivers() {
            return Err(Error::config(
                "data.tasks",
                format!("{} datasets for {} receivers", dataset_sizes.len(), topo.receivers()),
            ));
        }
        if let SelectionMode::Fixed(a) = &mode {
            if a.topology().as_ref() != topo.as_ref() {
                return Err(Error::Invalid("fixed selection built for another topology".into()));
            }
        }
        let codec = Codec::new(topo.clone(), shape, seed)?;
        let policy = SelectorPolicy::new(topo.clone(), model.cr_dim, &model.selector_hidden, seed);
        let streams = dataset_sizes
            .iter()
            .enumerate()
            .map(|(t, &n)| BatchStream::new(n, objective.batch_size, seed, t as u64))
            .collect::<Result<_>>()?;
        Ok(TrainState {
            coding_opt: AdamState::new(&codec.store, objective.lr_coding),
            selection_opt: AdamState::new(&policy.store, objective.lr_selection),
            topo,
            codec,
            policy,
            objective,
            mode,
            stochastic,
            train_selection: true,
            seed,
            epoch: 0,
            streams,
            last_records: Vec::new(),
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn last_records(&self) -> &[StepRecord] {
        &self.last_records
    }

    fn noise(&self, step: u64, rows: usize) -> Vec<Vec<Tensor>> {
        let dz = self.codec.latent_dim();
        (0..self.topo.transmitters())
            .map(|k| {
                (0..self.topo.modalities(k))
                    .map(|m| {
                        let mut rng = stream(self.seed, Domain::Reparam, &[0, step, k as u64, m as u64]);
                        let data = (0..rows * dz).map(|_| StandardNormal.sample(&mut rng)).collect();
                        Tensor::matrix(rows, dz, data).expect("sized")
                    })
                    .collect()
            })
            .collect()
    }

    /// Draws `u`, the selection and its projection for each sample.
    fn select(&self, b: usize, step: u64) -> Result<Selected> {
        let us: Vec<Vec<f64>> = (0..b)
            .map(|i| draw_common_randomness(self.seed, step, i as u64, self.policy.cr_dim()))
            .collect();
        match &self.mode {
            SelectionMode::Learned => {
                let logits = self.policy.logits_batch(&us)?;
                let mut draws = Vec::with_capacity(b);
                let mut sel = Vec::with_capacity(b);
                let mut starved = Vec::with_capacity(b);
                let mut expected = 0.0;
                let mut log_probs = Vec::with_capacity(b);
                for (i, l) in logits.iter().enumerate() {
                    let streams = SelectionStreams {
                        seed: self.seed,
                        step,
                        sample: i as u64,
                    };
                    let d = l.sample(&self.topo, streams);
                    let raw = d.to_vector(&self.topo);
                    let mut rng = stream(self.seed, Domain::Projection, &[step, i as u64]);
                    let p = project(&raw, &mut rng);
                    if !p.selection.check_constraints().transmitter_side_ok() {
                        return Err(Error::Invalid(format!("projection left a transmitter over budget: {:?}", p.selection)));
                    }
                    expected += exact_marginals(&self.topo, l).iter().sum::<f64>();
                    log_probs.push(l.log_prob(&self.topo, &d)?);
                    draws.push(Some(d));
                    sel.push(p.selection);
                    starved.push(p.starved);
                }
                Ok(Selected {
                    us,
                    draws,
                    selections: sel,
                    starved,
                    expected: expected / b as f64,
                    log_probs,
                })
            }
            SelectionMode::Fixed(a) => Ok(Selected::fixed(us, a.clone())),
            SelectionMode::Full => Ok(Selected::fixed(us, SelectionVector::ones(self.topo.clone()))),
        }
    }

    /// Selections and the coding batch for task rows `idx[t]`.
    fn prepare(&self, datasets: &[TaskDataset], idx: &[Vec<usize>], step: u64) -> Result<Round> {
        let t_count = self.topo.receivers();
        if datasets.len() != t_count || idx.len() != t_count {
            return Err(Error::Invalid(format!("{} datasets for {t_count} tasks", datasets.len())));
        }
        let b = idx[0].len();
        if idx.iter().any(|i| i.len() != b) {
            return Err(Error::Invalid("tasks drew batches of different sizes".into()));
        }
        let sel = self.select(b, step)?;
        let features = (0..self.topo.transmitters())
            .map(|k| {
                (0..self.topo.modalities(k))
                    .map(|m| {
                        let parts: Vec<Vec<f64>> = (0..t_count)
                            .map(|t| datasets[t].gather(k, m, &idx[t]).into_data())
                            .collect();
                        let d = datasets[0].features[k][m].cols();
                        Tensor::matrix(t_count * b, d, parts.concat())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<Targets> = (0..t_count).map(|t| datasets[t].gather_targets(&idx[t])).collect();
        let masks: Vec<Vec<Vec<bool>>> = (0..t_count)
            .map(|t| sel.selections.iter().map(|a| a.receiver_bits(t).to_vec()).collect())
            .collect();
        let penalty: Vec<Vec<f64>> = (0..t_count)
            .map(|t| {
                sel.starved
                    .iter()
                    .map(|s| if s.contains(&t) { self.objective.penalty } else { 0.0 })
                    .collect()
            })
            .collect();
        let sparse: Vec<Vec<f64>> = (0..t_count)
            .map(|t| {
                sel.selections
                    .iter()
                    .map(|a| self.objective.gamma * a.receiver_count_ones(t) as f64)
                    .collect()
            })
            .collect();
        let extra: Vec<Vec<f64>> = penalty
            .iter()
            .zip(&sparse)
            .map(|(p, s)| p.iter().zip(s).map(|(a, b)| a + b).collect())
            .collect();
        let noise = self.stochastic.then(|| self.noise(step, t_count * b));
        Ok(Round {
            sel,
            batch: CodingBatch {
                batch: b,
                features,
                targets,
                masks,
                extra,
                noise,
            },
            penalty,
            sparse,
        })
    }

    /// Post-projection selections for `n` evaluation samples, with the
    /// receivers each one starved. `draw` indexes independent sets.
    pub fn draw_selections(&self, n: usize, draw: u64) -> Result<Vec<(SelectionVector, Vec<usize>)>> {
        let sel = self.select(n, ESTIMATE_STEPS + (1 << 40) + draw)?;
        Ok(sel.selections.into_iter().zip(sel.starved).collect())
    }

    /// The empirical objective on `n` fresh rows per task, with fresh `u`,
    /// selections and encoder noise, at the current parameters. `draw`
    /// indexes independent estimates.
    pub fn estimate_objective(&self, datasets: &[TaskDataset], n: usize, draw: u64) -> Result<f64> {
        if n == 0 {
            return Err(Error::Invalid("objective estimate needs at least one row".into()));
        }
        let idx = datasets
            .iter()
            .enumerate()
            .map(|(t, d)| {
                if n > d.len() {
                    return Err(Error::Invalid(format!("{n} rows requested from a task with {}", d.len())));
                }
                let mut rng = stream(self.seed, Domain::Eval, &[draw, t as u64]);
                Ok(rand::seq::index::sample(&mut rng, d.len(), n).into_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let round = self.prepare(datasets, &idx, ESTIMATE_STEPS + draw)?;
        let mut g = Graph::no_grad();
        let terms = sample_losses(&mut g, &self.codec, &round.batch, self.objective.beta)?;
        let loss = batch_objective(&mut g, &terms)?;
        Ok(g.value(loss).item())
    }

    /// One round of the training procedure: draw `u` and selections for a
    /// batch, encode and decode every task, then update the codecs by
    /// backpropagation and the selectors by the score-function estimator.
    pub fn train_epoch(&mut self, datasets: &[TaskDataset]) -> Result<LossReport> {
        let t_count = self.topo.receivers();
        if datasets.len() != t_count {
            return Err(Error::Invalid(format!("{} datasets for {t_count} tasks", datasets.len())));
        }
        let b = self.objective.batch_size;
        let idx: Vec<Vec<usize>> = self.streams.iter_mut().map(BatchStream::next_batch).collect();
        let Round {
            sel:
                Selected {
                    us,
                    draws,
                    selections,
                    starved,
                    expected,
                    log_probs,
                },
            batch,
            penalty,
            sparse,
        } = self.prepare(datasets, &idx, self.epoch)?;

        let mut g = Graph::new();
        let terms = sample_losses(&mut g, &self.codec, &batch, self.objective.beta)?;
        let loss = batch_objective(&mut g, &terms)?;
        let total = g.value(loss).item();
        if !total.is_finite() {
            return Err(Error::Numerical(format!("objective is {total} at epoch {}", self.epoch)));
        }
        g.backward(loss)?;
        self.codec.store.zero_grads();
        g.accumulate_into(&mut self.codec.store);
        if !self.codec.store.grads_finite() {
            return Err(Error::Numerical(format!("coding gradient is not finite at epoch {}", self.epoch)));
        }

        let losses: Vec<Vec<f64>> = terms.iter().map(|t| g.value(t.total).data().to_vec()).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        if self.mode == SelectionMode::Learned && self.train_selection {
            let records: Vec<DrawRecord> = draws.iter().map(|d| d.clone().expect("learned draw")).collect();
            let coef = if self.objective.baseline {
                losses.iter().map(|l| baseline_subtraction(l)).collect::<Result<Vec<_>>>()?
            } else {
                losses.clone()
            };
            policy_gradient(&mut self.policy, &us, &records, &coef)?;
            if !self.policy.store.grads_finite() {
                return Err(Error::Numerical(format!("selection gradient is not finite at epoch {}", self.epoch)));
            }
            self.selection_opt.step(&mut self.policy.store)?;
        }
        self.coding_opt.step(&mut self.codec.store)?;

        let tasks: Vec<TaskReport> = terms
            .iter()
            .enumerate()
            .map(|(t, tt)| TaskReport {
                global_ce: mean(g.value(tt.global).data()),
                local_ce_sum: mean(g.value(tt.local).data()),
                rate: mean(g.value(tt.rate).data()),
                metric: metric_of(self.codec.task(t), g.value(tt.output), &batch.targets[t]),
                penalty: mean(&penalty[t]),
                sparse: mean(&sparse[t]),
            })
            .collect();
        let report = LossReport {
            epoch: self.epoch,
            beta: self.objective.beta,
            total,
            penalty: tasks.iter().map(|t| t.penalty).sum(),
            sparse: tasks.iter().map(|t| t.sparse).sum(),
            tasks,
            expected_selection: expected,
            log_prob_mean: mean(&log_probs),
        };
        self.last_records = (0..b)
            .map(|i| StepRecord {
                u: us[i].clone(),
                draw: draws[i].clone(),
                selection: selections[i].clone(),
                starved: starved[i].clone(),
                losses: losses.iter().map(|l| l[i]).collect(),
                log_prob: log_probs[i],
            })
            .collect();
        self.epoch += 1;
        Ok(report)
    }
}
