//! Evaluation metrics: sum-rate, negative cross-entropy and task scores.

mod knn;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::coding::{argmax, mi_terms, relevance_loss, TaskKind, Targets};
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;
use crate::training::{metric_of, TrainState};

pub use knn::{knn_entropy, KNN_NEIGHBORS};

/// How the rate of one link is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RateEstimator {
    /// Batch MI estimate of the stochastic encoder.
    Mutual,
    /// Differential entropy of the encoder mean, k-nearest-neighbour estimate.
    KnnEntropy { k: usize },
}

/// Top-1 accuracy in percent.
pub fn top1(outputs: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Invalid("top-1 accuracy of an empty batch".into()));
    }
    if outputs.rows() != labels.len() {
        return Err(Error::shape("top1", outputs.shape(), &[labels.len()]));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(outputs.row_slice(i)) == y)
        .count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// `-(1/T) sum_t loss_t`, where a classification task contributes its mean
/// cross-entropy and a regression task its mean squared error.
pub fn nce(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::Invalid("N-CE over zero tasks".into()));
    }
    Ok(-losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Summary of one trained model on held-out data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Nats.
    pub sum_rate: f64,
    /// Nats.
    pub nce: f64,
    /// Top-1 accuracy (%) per classification task, MSE per regression task.
    pub task_metrics: Vec<f64>,
    /// Mean number of active slots per sample.
    pub expected_selection: f64,
    /// Mean number of active receiver-transmitter links per sample.
    pub expected_links: f64,
    /// Set when some task entered `nce` through its MSE.
    pub regression_in_nce: bool,
}

/// Everything measured on one evaluation pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Per characteristic-vector bit: rate of the link when active.
    pub link_rate: Vec<f64>,
    /// Per bit: fraction of evaluation samples with the bit active.
    pub usage: Vec<f64>,
    /// Per task: mean cross-entropy (or MSE for regression).
    pub task_loss: Vec<f64>,
    pub task_metrics: Vec<f64>,
    pub task_kinds: Vec<TaskKind>,
    pub expected_links: f64,
    /// Global decoder outputs per task.
    pub outputs: Vec<Tensor>,
}

impl Evaluation {
    pub fn sum_rate(&self) -> f64 {
        self.link_rate.iter().zip(&self.usage).map(|(r, u)| r * u).sum()
    }

    /// Sum-rate with the listed bits removed from every selection.
    pub fn sum_rate_without(&self, bits: &[usize]) -> f64 {
        self.link_rate
            .iter()
            .zip(&self.usage)
            .enumerate()
            .filter(|(b, _)| !bits.contains(b))
            .map(|(_, (r, u))| r * u)
            .sum()
    }

    pub fn expected_selection(&self) -> f64 {
        self.usage.iter().sum()
    }

    pub fn row(&self) -> Result<MetricsRow> {
        Ok(MetricsRow {
            sum_rate: self.sum_rate(),
            nce: nce(&self.task_loss)?,
            task_metrics: self.task_metrics.clone(),
            expected_selection: self.expected_selection(),
            expected_links: self.expected_links,
            regression_in_nce: self.task_kinds.iter().any(|k| !k.is_classification()),
        })
    }
}

/// Evaluates `state` on the first `rows` samples of each held-out task set.
///
/// Every sample gets its own `u`, selection and projection, as in training;
/// link rates are measured on all rows regardless of selection so that
/// `sum_rate = sum_bits usage * link_rate`.
pub fn evaluate(
    state: &TrainState,
    eval: &[TaskDataset],
    rows: usize,
    rate: RateEstimator,
    draw: u64,
) -> Result<Evaluation> {
    let topo = &state.topo;
    let t_count = topo.receivers();
    if eval.len() != t_count {
        return Err(Error::Invalid(format!("{} evaluation sets for {t_count} tasks", eval.len())));
    }
    if rows == 0 {
        return Err(Error::Invalid("evaluation needs at least one row".into()));
    }
    if let Some(d) = eval.iter().find(|d| d.len() < rows) {
        return Err(Error::Invalid(format!("evaluation set has {} rows, {rows} requested", d.len())));
    }
    if let RateEstimator::KnnEntropy { k } = rate {
        if rows <= k {
            return Err(Error::Invalid(format!("k-NN entropy with k={k} needs more than {k} rows")));
        }
    }
    let selections = state.draw_selections(rows, draw)?;
    let per = topo.slots_per_receiver();
    let mut usage = vec![0.0; topo.len()];
    let mut links = 0usize;
    for (a, _) in &selections {
        for (b, on) in a.bits().iter().enumerate() {
            if *on {
                usage[b] += 1.0;
            }
        }
        links += (0..t_count).map(|t| a.receiver_links(t)).sum::<usize>();
    }
    for u in &mut usage {
        *u /= rows as f64;
    }

    let idx: Vec<usize> = (0..rows).collect();
    let dz = state.codec.latent_dim();
    let mut link_rate = vec![0.0; topo.len()];
    let mut task_loss = Vec::with_capacity(t_count);
    let mut task_metrics = Vec::with_capacity(t_count);
    let mut task_kinds = Vec::with_capacity(t_count);
    let mut outputs = Vec::with_capacity(t_count);
    for (t, data) in eval.iter().enumerate() {
        let mut g = Graph::no_grad();
        let mut zs = Vec::with_capacity(per);
        for (s, (k, m)) in topo.modality_slots().enumerate() {
            let x = data.gather(k, m, &idx);
            let eps = state.stochastic.then(|| {
                let mut rng = stream(state.seed, Domain::Eval, &[draw, 1 + t as u64, k as u64, m as u64]);
                let v = (0..rows * dz).map(|_| StandardNormal.sample(&mut rng)).collect();
                Tensor::matrix(rows, dz, v).expect("sized")
            });
            let e = state.codec.encode(&mut g, k, m, &x, &vec![t; rows], eps.as_ref())?;
            link_rate[t * per + s] = match rate {
                RateEstimator::Mutual => {
                    let mi = mi_terms(&mut g, e.z, e.mu, e.logvar)?;
                    g.value(mi).data().iter().sum::<f64>() / rows as f64
                }
                RateEstimator::KnnEntropy { k: nn } => {
                    let mu = g.value(e.mu);
                    let pts: Vec<&[f64]> = (0..rows).map(|i| mu.row_slice(i)).collect();
                    knn_entropy(&pts, nn)?
                }
            };
            zs.push(e.z);
        }
        let masks: Vec<Vec<bool>> = selections.iter().map(|(a, _)| a.receiver_bits(t).to_vec()).collect();
        let fused = state.codec.fuse(&mut g, &zs, &masks)?;
        let out = state.codec.global_decode(&mut g, t, fused)?;
        let kind = state.codec.task(t);
        let targets = data.gather_targets(&idx);
        let metric = metric_of(kind, g.value(out), &targets);
        let loss = match (&kind, &targets) {
            (TaskKind::Regression { .. }, _) => metric,
            (TaskKind::Classification { .. }, Targets::Classes(_)) => {
                let ce = relevance_loss(&mut g, out, kind, &targets)?;
                g.value(ce).data().iter().sum::<f64>() / rows as f64
            }
            _ => return Err(Error::Invalid(format!("task {t} targets do not match its decoder"))),
        };
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("evaluation loss of task {t} is {loss}")));
        }
        task_loss.push(loss);
        task_metrics.push(metric);
        task_kinds.push(kind);
        outputs.push(g.value(out).clone());
    }
    Ok(Evaluation {
        link_rate,
        usage,
        task_loss,
        task_metrics,
        task_kinds,
        expected_links: links as f64 / rows as f64,
        outputs,
    })
}
