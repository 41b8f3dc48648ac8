//! Per-sample empirical objective.

use crate::coding::{mi_terms, relevance_loss, Codec, Encoding, Targets};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// One batch as seen by the coding side. Rows of every feature tensor are
/// task-major: rows `t * B .. (t + 1) * B` belong to task `t`.
#[derive(Clone, Debug)]
pub struct CodingBatch {
    pub batch: usize,
    /// `[k][m]`, each `[T * B, d]`.
    pub features: Vec<Vec<Tensor>>,
    /// `[t]`, `B` targets each.
    pub targets: Vec<Targets>,
    /// `[t][i][slot]`: active bits of receiver `t`'s block for sample `i`.
    pub masks: Vec<Vec<Vec<bool>>>,
    /// `[t][i]`: loss constants (starvation penalty, sparse term).
    pub extra: Vec<Vec<f64>>,
    /// `[k][m]` reparameterization noise, `[T * B, d_z]`; `None` encodes
    /// deterministically.
    pub noise: Option<Vec<Vec<Tensor>>>,
}

/// Graph handles for one task's loss terms, each an `[B, 1]` column.
#[derive(Clone, Debug)]
pub struct TaskTerms {
    /// Global cross-entropy (or squared error).
    pub global: Var,
    /// Masked sum of local decoder losses.
    pub local: Var,
    /// Masked sum of per-sample MI terms.
    pub rate: Var,
    /// `global + beta * (local + rate) + extra`.
    pub total: Var,
    /// Decoder output, `[B, classes]`.
    pub output: Var,
    /// Unmasked batch MI estimate per slot; zero for slots the task never
    /// used in this batch.
    pub link_mi: Vec<f64>,
}

fn column(g: &mut Graph, values: Vec<f64>) -> Var {
    let n = values.len();
    g.constant(Tensor::matrix(n, 1, values).expect("column"))
}

fn gather(x: &Tensor, rows: &[usize]) -> Tensor {
    let c = x.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(x.row_slice(r));
    }
    Tensor::matrix(rows.len(), c, data).expect("gathered rows")
}

fn subset_targets(targets: &Targets, idx: &[usize]) -> Targets {
    match targets {
        Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
        Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i].clone()).collect()),
    }
}

fn check_finite(g: &Graph, v: Var, what: impl FnOnce() -> String) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite {}", what())))
    }
}

/// Builds the per-sample losses `L_t^i` for every task:
///
/// `L_t^i = CE_global + beta * sum_{active (k,m)} (CE_local + MI_i) + extra`,
///
/// where `MI_i = log p(z_i|x_i) - log (1/B) sum_j p(z_i|x_j)` uses the whole
/// task batch as the marginal.
pub fn sample_losses(g: &mut Graph, codec: &Codec, batch: &CodingBatch, beta: f64) -> Result<Vec<TaskTerms>> {
    let topo = codec.topology().clone();
    let t_count = topo.receivers();
    let b = batch.batch;
    if batch.targets.len() != t_count || batch.masks.len() != t_count || batch.extra.len() != t_count {
        return Err(Error::Invalid("batch does not cover every task".into()));
    }
    for masks in &batch.masks {
        if masks.len() != b {
            return Err(Error::shape("sample_losses masks", &[masks.len()], &[b]));
        }
    }
    let slots: Vec<(usize, usize)> = topo.modality_slots().collect();
    let dz = codec.latent_dim();
    // Encode each slot only for the tasks that use it somewhere in the batch.
    let mut encodings: Vec<Vec<Option<Encoding>>> = vec![vec![None; slots.len()]; t_count];
    for (s, &(k, m)) in slots.iter().enumerate() {
        let users: Vec<usize> = (0..t_count)
            .filter(|&t| batch.masks[t].iter().any(|row| row[s]))
            .collect();
        if users.is_empty() {
            continue;
        }
        let rows: Vec<usize> = users.iter().flat_map(|&t| t * b..(t + 1) * b).collect();
        let tasks: Vec<usize> = users.iter().flat_map(|&t| std::iter::repeat_n(t, b)).collect();
        let x = gather(&batch.features[k][m], &rows);
        let eps = batch.noise.as_ref().map(|n| gather(&n[k][m], &rows));
        let e = codec.encode(g, k, m, &x, &tasks, eps.as_ref())?;
        for (j, &t) in users.iter().enumerate() {
            encodings[t][s] = Some(Encoding {
                z: g.slice_rows(e.z, j * b, b)?,
                mu: g.slice_rows(e.mu, j * b, b)?,
                logvar: g.slice_rows(e.logvar, j * b, b)?,
            });
        }
    }
    let mut out = Vec::with_capacity(t_count);
    for (t, enc) in encodings.iter().enumerate() {
        let masks = &batch.masks[t];
        let mut zs = Vec::with_capacity(slots.len());
        let mut local_terms = Vec::new();
        let mut rate_terms = Vec::new();
        let mut link_mi = vec![0.0; slots.len()];
        for (s, &(k, m)) in slots.iter().enumerate() {
            let Some(e) = enc[s] else {
                zs.push(g.constant(Tensor::zeros(&[b, dz])));
                continue;
            };
            zs.push(e.z);
            let active: Vec<usize> = (0..b).filter(|&i| masks[i][s]).collect();
            let mi = mi_terms(g, e.z, e.mu, e.logvar)?;
            check_finite(g, mi, || format!("MI estimate for task {t}, slot ({k}, {m})"))?;
            link_mi[s] = g.value(mi).data().iter().sum::<f64>() / b as f64;
            let z_active = g.gather_rows(e.z, &active)?;
            let out_local = codec.local_decode(g, t, z_active, k, m)?;
            let targets = subset_targets(&batch.targets[t], &active);
            let lce = relevance_loss(g, out_local, codec.task(t), &targets)?;
            check_finite(g, lce, || format!("local loss for task {t}, slot ({k}, {m})"))?;
            local_terms.push(g.scatter_rows(lce, &active, b)?);
            let mask = column(g, (0..b).map(|i| if masks[i][s] { 1.0 } else { 0.0 }).collect());
            rate_terms.push(g.mul(mi, mask)?);
        }
        let fused = codec.fuse(g, &zs, masks)?;
        let output = codec.global_decode(g, t, fused)?;
        let global = relevance_loss(g, output, codec.task(t), &batch.targets[t])?;
        check_finite(g, global, || format!("global loss for task {t}"))?;
        let sum_cols = |g: &mut Graph, cols: &[Var]| -> Result<Var> {
            match cols.split_first() {
                None => Ok(column(g, vec![0.0; b])),
                Some((first, rest)) => rest.iter().try_fold(*first, |acc, c| g.add(acc, *c)),
            }
        };
        let local = sum_cols(g, &local_terms)?;
        let rate = sum_cols(g, &rate_terms)?;
        let lr = g.add(local, rate)?;
        let weighted = g.scale(lr, beta);
        let total = g.add(global, weighted)?;
        let extra = column(g, batch.extra[t].clone());
        let total = g.add(total, extra)?;
        out.push(TaskTerms {
            global,
            local,
            rate,
            total,
            output,
            link_mi,
        });
    }
    Ok(out)
}

/// `(1/B) sum_i sum_t L_t^i` as a scalar.
pub fn batch_objective(g: &mut Graph, terms: &[TaskTerms]) -> Result<Var> {
    let first = terms.first().ok_or_else(|| Error::Invalid("no tasks".into()))?;
    let mut acc = first.total;
    for t in &terms[1..] {
        acc = g.add(acc, t.total)?;
    }
    Ok(g.mean(acc))
}
