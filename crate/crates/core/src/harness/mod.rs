//! Experiment driver: configuration, runs and their CSV/JSON artifacts.
//!
//! Every artifact is written atomically. Indices `t`, `k`, `m` in CSV files
//! are 1-based; everything inside the library is 0-based.

mod config;
pub mod oracle;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{build_state, run_baseline, BaselineKind, RunOutcome};
use crate::checkpoint;
use crate::data::{generate, generate_eval, TaskDataset};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{evaluate, MetricsRow};
use crate::selection::{draw_common_randomness, expected_marginals};
use crate::training::{infer, LossReport, SelectionMode, TrainState};

pub use config::{RunConfig, TopologyConfig};

/// Step tag of the fixed `u` draws behind every heatmap row.
const HEATMAP_STEP: u64 = u64::MAX - (1 << 32);

pub const TRAIN_LOG: &str = "train_log.csv";
pub const HEATMAP: &str = "heatmap.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS: &str = "metrics.json";
pub const CONFIG_ECHO: &str = "config.json";
pub const FRONTIER: &str = "frontier.csv";
pub const BENCH: &str = "bench.csv";

pub const TRAIN_LOG_COLUMNS: [&str; 11] = [
    "epoch",
    "task",
    "global_ce",
    "local_ce_sum",
    "rate",
    "nce",
    "acc_or_mse",
    "penalty",
    "expected_sel_count",
    "total_loss",
    "logprob_mean",
];
pub const HEATMAP_COLUMNS: [&str; 5] = ["epoch", "t", "k", "m", "marginal_mass"];
pub const FRONTIER_COLUMNS: [&str; 3] = ["beta", "sum_rate", "nce"];
pub const TRAJECTORY_COLUMNS: [&str; 3] = ["epoch", "sum_rate", "nce"];

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Invalid(format!("csv encoding: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::Invalid(format!("csv encoding: {e}")))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, &csv_bytes(header, rows)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(format!("json encoding: {e}")))?;
    write_atomic(path, text.as_bytes())
}

/// Heatmap mass per characteristic-vector bit: exact pre-projection
/// marginals averaged over `us` for a learned policy, the vector itself for
/// a fixed one.
pub fn selection_marginals(state: &TrainState, us: &[Vec<f64>]) -> Result<Vec<f64>> {
    match &state.mode {
        SelectionMode::Learned => expected_marginals(&state.policy, us),
        SelectionMode::Fixed(a) => Ok(a.bits().iter().map(|b| f64::from(u8::from(*b))).collect()),
        SelectionMode::Full => Ok(vec![1.0; state.topo.len()]),
    }
}

/// The `u` draws averaged into heatmap rows.
pub fn heatmap_draws(seed: u64, samples: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..samples as u64).map(|i| draw_common_randomness(seed, HEATMAP_STEP, i, dim)).collect()
}

fn log_rows(r: &LossReport) -> Vec<Vec<String>> {
    r.tasks
        .iter()
        .enumerate()
        .map(|(t, tr)| {
            vec![
                (r.epoch + 1).to_string(),
                (t + 1).to_string(),
                tr.global_ce.to_string(),
                tr.local_ce_sum.to_string(),
                tr.rate.to_string(),
                (-tr.global_ce).to_string(),
                tr.metric.to_string(),
                tr.penalty.to_string(),
                r.expected_selection.to_string(),
                r.total.to_string(),
                r.log_prob_mean.to_string(),
            ]
        })
        .collect()
}

fn heatmap_rows(state: &TrainState, epoch: u64, marginals: &[f64]) -> Vec<Vec<String>> {
    marginals
        .iter()
        .enumerate()
        .map(|(b, p)| {
            let (t, k, m) = state.topo.slot(b);
            vec![
                epoch.to_string(),
                (t + 1).to_string(),
                (k + 1).to_string(),
                (m + 1).to_string(),
                p.to_string(),
            ]
        })
        .collect()
}

/// Training and held-out task data for a config.
pub fn datasets(cfg: &RunConfig) -> Result<(Vec<TaskDataset>, Vec<TaskDataset>)> {
    Ok((generate(&cfg.data)?, generate_eval(&cfg.data, cfg.eval_rows)?))
}

/// Result of `train`.
#[derive(Debug)]
pub struct TrainRun {
    pub outcome: RunOutcome,
    /// Final heatmap row, one mass per bit.
    pub final_marginals: Vec<f64>,
    pub dir: PathBuf,
}

#[derive(Serialize)]
struct MetricsEcho<'a> {
    method: BaselineKind,
    seed: u64,
    epochs: usize,
    beta: f64,
    #[serde(flatten)]
    metrics: &'a MetricsRow,
}

/// Trains `cfg.method` and writes the training log, heatmap, checkpoint,
/// metrics and config echo into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainRun> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let (train, eval) = datasets(cfg)?;
    write_json(&out.join(CONFIG_ECHO), cfg)?;
    let us = heatmap_draws(cfg.seed, cfg.heatmap_samples, cfg.model.cr_dim);
    let epochs = cfg.objective.epochs as u64;
    let mut log = Vec::new();
    let mut heat = Vec::new();
    let mut last = Vec::new();
    let outcome = run_baseline(cfg.method, &spec, &train, &eval, cfg.eval_rows, |state, r| {
        log.extend(log_rows(r));
        let done = r.epoch + 1;
        if done % cfg.heatmap_every as u64 == 0 || done == epochs {
            last = selection_marginals(state, &us)?;
            heat.extend(heatmap_rows(state, done, &last));
        }
        Ok(())
    })?;
    write_csv(&out.join(TRAIN_LOG), &TRAIN_LOG_COLUMNS, &log)?;
    write_csv(&out.join(HEATMAP), &HEATMAP_COLUMNS, &heat)?;
    checkpoint::save(
        &out.join(CHECKPOINT),
        &[("codec", &outcome.state.codec.store), ("selection", &outcome.state.policy.store)],
    )?;
    write_json(
        &out.join(METRICS),
        &MetricsEcho {
            method: cfg.method,
            seed: cfg.seed,
            epochs: cfg.objective.epochs,
            beta: outcome.state.objective.beta,
            metrics: &outcome.metrics,
        },
    )?;
    Ok(TrainRun {
        outcome,
        final_marginals: last,
        dir: out.to_path_buf(),
    })
}

/// One converged point of the rate-relevance frontier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub beta: f64,
    pub sum_rate: f64,
    pub nce: f64,
    /// `(epoch, sum_rate, nce)` along training.
    pub trajectory: Vec<(u64, f64, f64)>,
}

/// File name of the information-plane trajectory for `beta`.
pub fn trajectory_file(beta: f64) -> String {
    format!("trajectory_beta_{beta:e}.csv")
}

/// Trains `cfg.method` once per multiplier and records the converged
/// sum-rate and N-CE, plus the information-plane trajectory of each run.
pub fn cmd_sweep_beta(cfg: &RunConfig, betas: &[f64], out: &Path) -> Result<Vec<FrontierPoint>> {
    cfg.validate()?;
    if betas.len() < 2 {
        return Err(Error::config("betas", "a sweep needs at least two values"));
    }
    if let Some(b) = betas.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
        return Err(Error::config("betas", format!("{b} is not a finite non-negative multiplier")));
    }
    let (train, eval) = datasets(cfg)?;
    write_json(&out.join(CONFIG_ECHO), cfg)?;
    let rows_per_point = cfg.trajectory_rows.min(cfg.eval_rows);
    let mut points = Vec::with_capacity(betas.len());
    for &beta in betas {
        let mut c = cfg.clone();
        c.objective.beta = beta;
        let spec = c.spec()?;
        let estimator = c.method.rate_estimator();
        let mut trajectory = Vec::new();
        let outcome = run_baseline(c.method, &spec, &train, &eval, c.eval_rows, |state, r| {
            let done = r.epoch + 1;
            if done % c.trajectory_every as u64 == 0 {
                let e = evaluate(state, &eval, rows_per_point, estimator, done)?;
                let row = e.row()?;
                trajectory.push((done, row.sum_rate, row.nce));
            }
            Ok(())
        })?;
        let rows: Vec<Vec<String>> = trajectory
            .iter()
            .map(|(e, s, n)| vec![e.to_string(), s.to_string(), n.to_string()])
            .collect();
        write_csv(&out.join(trajectory_file(beta)), &TRAJECTORY_COLUMNS, &rows)?;
        points.push(FrontierPoint {
            beta,
            sum_rate: outcome.metrics.sum_rate,
            nce: outcome.metrics.nce,
            trajectory,
        });
    }
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| vec![p.beta.to_string(), p.sum_rate.to_string(), p.nce.to_string()])
        .collect();
    write_csv(&out.join(FRONTIER), &FRONTIER_COLUMNS, &rows)?;
    Ok(points)
}

/// One method's row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: BaselineKind,
    pub under_limits: bool,
    /// One entry per repeat.
    pub runs: Vec<MetricsRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl BenchRow {
    /// `sum_rate, nce, t1_metric, ...` as `(mean, std)` over repeats.
    pub fn columns(&self) -> Vec<(f64, f64)> {
        let tasks = self.runs[0].task_metrics.len();
        let mut cols = vec![
            mean_std(&self.runs.iter().map(|r| r.sum_rate).collect::<Vec<_>>()),
            mean_std(&self.runs.iter().map(|r| r.nce).collect::<Vec<_>>()),
        ];
        for t in 0..tasks {
            cols.push(mean_std(&self.runs.iter().map(|r| r.task_metrics[t]).collect::<Vec<_>>()));
        }
        cols
    }

    pub fn sum_rate(&self) -> f64 {
        self.columns()[0].0
    }

    pub fn nce(&self) -> f64 {
        self.columns()[1].0
    }
}

/// Header of the comparison table for `tasks` tasks.
pub fn bench_header(tasks: usize, repeats: usize) -> Vec<String> {
    let mut base: Vec<String> = vec!["sum_rate".into(), "nce".into()];
    base.extend((1..=tasks).map(|t| format!("t{t}_metric")));
    let mut h: Vec<String> = vec!["method".into(), "under_limits".into()];
    h.extend(base.iter().cloned());
    if repeats > 1 {
        h.extend(base.iter().map(|c| format!("{c}_std")));
    }
    h
}

/// Runs every scheme on the shared data with seeds `seed .. seed + repeats`
/// and writes the comparison table.
pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let (train, eval) = datasets(cfg)?;
    write_json(&out.join(CONFIG_ECHO), cfg)?;
    let mut rows = Vec::with_capacity(BaselineKind::ALL.len());
    for kind in BaselineKind::ALL {
        let mut runs = Vec::with_capacity(cfg.repeats);
        for r in 0..cfg.repeats as u64 {
            let mut c = cfg.clone();
            c.seed = cfg.seed + r;
            let outcome = run_baseline(kind, &c.spec()?, &train, &eval, c.eval_rows, |_, _| Ok(()))?;
            runs.push(outcome.metrics);
        }
        rows.push(BenchRow {
            method: kind,
            under_limits: kind.under_limits(),
            runs,
        });
    }
    let header = bench_header(cfg.data.tasks.len(), cfg.repeats);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            let cols = row.columns();
            let mut r = vec![row.method.tag().to_string(), row.under_limits.to_string()];
            r.extend(cols.iter().map(|c| c.0.to_string()));
            if cfg.repeats > 1 {
                r.extend(cols.iter().map(|c| c.1.to_string()));
            }
            r
        })
        .collect();
    write_csv(&out.join(BENCH), &header_refs, &table)?;
    Ok(rows)
}

/// Output of `infer`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferReport {
    pub session: u64,
    pub attempts: usize,
    /// Active `(t, k, m)` slots, 1-based.
    pub active: Vec<(usize, usize, usize)>,
    /// Accuracy (%) or MSE per task on the held-out rows.
    pub task_metrics: Vec<f64>,
}

/// Restores a trained model from `checkpoint` and runs one inference
/// session on the held-out rows.
pub fn cmd_infer(cfg: &RunConfig, checkpoint_path: &Path, session: u64) -> Result<InferReport> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let (train, eval) = datasets(cfg)?;
    let sizes: Vec<usize> = train.iter().map(TaskDataset::len).collect();
    let mut state = build_state(cfg.method, &spec, &sizes)?;
    checkpoint::load_into(checkpoint_path, "codec", &mut state.codec.store)?;
    checkpoint::load_into(checkpoint_path, "selection", &mut state.policy.store)?;
    let idx: Vec<usize> = (0..cfg.eval_rows).collect();
    let features: Vec<Vec<Vec<_>>> = eval
        .iter()
        .map(|d| {
            (0..state.topo.transmitters())
                .map(|k| (0..state.topo.modalities(k)).map(|m| d.gather(k, m, &idx)).collect())
                .collect()
        })
        .collect();
    let inf = infer(&state, &features, session)?;
    let task_metrics = inf
        .outputs
        .iter()
        .zip(&eval)
        .enumerate()
        .map(|(t, (o, d))| crate::training::metric_of(state.codec.task(t), o, &d.gather_targets(&idx)))
        .collect();
    let active = inf
        .selection
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, on)| **on)
        .map(|(b, _)| {
            let (t, k, m) = state.topo.slot(b);
            (t + 1, k + 1, m + 1)
        })
        .collect();
    Ok(InferReport {
        session,
        attempts: inf.attempts,
        active,
        task_metrics,
    })
}

