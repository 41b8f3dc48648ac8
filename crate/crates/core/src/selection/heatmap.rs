//! Marginal selection mass per `(t, k, m)` slot.

use crate::error::{Error, Result};
use crate::graph::SubsetDraw;
use crate::selection::policy::{SelectionStreams, SelectorLogits, SelectorPolicy};
use crate::selection::Topology;

fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

/// Probability that each index appears in a draw from the count/index
/// process, by walking every ordered draw.
pub fn inclusion_probs(logits: &[f64], count_dims: usize) -> Vec<f64> {
    let (cl, il) = logits.split_at(count_dims);
    let n = il.len();
    let count_lp = log_softmax(cl);
    let mut out = vec![0.0; n];
    let mut prefix = Vec::new();
    fn walk(il: &[f64], left: usize, mass: f64, prefix: &mut Vec<usize>, out: &mut [f64]) {
        if left == 0 || prefix.len() == il.len() {
            for &i in prefix.iter() {
                out[i] += mass;
            }
            return;
        }
        let rem: Vec<usize> = (0..il.len()).filter(|i| !prefix.contains(i)).collect();
        let lp = log_softmax(&rem.iter().map(|&i| il[i]).collect::<Vec<_>>());
        for (j, &i) in rem.iter().enumerate() {
            prefix.push(i);
            walk(il, left - 1, mass * lp[j].exp(), prefix, out);
            prefix.pop();
        }
    }
    for (c, lp) in count_lp.iter().enumerate() {
        walk(il, c + 1, lp.exp(), &mut prefix, &mut out);
    }
    out
}

/// Exact pre-projection marginals for one `u`, one entry per bit of the
/// characteristic vector.
pub fn exact_marginals(topo: &Topology, logits: &SelectorLogits) -> Vec<f64> {
    let mut out = vec![0.0; topo.len()];
    for t in 0..topo.receivers() {
        let rx = inclusion_probs(&logits.rx[t], topo.rx_budget(t));
        for (k, pk) in rx.iter().enumerate() {
            let tx = inclusion_probs(&logits.tx[k][t], topo.tx_local_budget(k));
            for (m, pm) in tx.iter().enumerate() {
                out[topo.bit(t, k, m)] = pk * pm;
            }
        }
    }
    out
}

/// Exact marginals averaged over the given `u`s.
pub fn expected_marginals(policy: &SelectorPolicy, us: &[Vec<f64>]) -> Result<Vec<f64>> {
    if us.is_empty() {
        return Err(Error::Invalid("marginals need at least one u".into()));
    }
    let topo = policy.topology();
    let mut acc = vec![0.0; topo.len()];
    for l in policy.logits_batch(us)? {
        for (a, p) in acc.iter_mut().zip(exact_marginals(topo, &l)) {
            *a += p;
        }
    }
    let n = us.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Monte-Carlo marginals: `n_mc` draws per `u`, averaged.
pub fn marginal_selection_heatmap(
    policy: &SelectorPolicy,
    us: &[Vec<f64>],
    n_mc: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_mc == 0 || us.is_empty() {
        return Err(Error::Invalid("heatmap needs n_mc >= 1 and at least one u".into()));
    }
    let topo = policy.topology();
    let mut acc = vec![0.0; topo.len()];
    for (i, l) in policy.logits_batch(us)?.iter().enumerate() {
        for j in 0..n_mc {
            let streams = SelectionStreams {
                seed,
                step: i as u64,
                sample: j as u64,
            };
            let v = l.sample(topo, streams).to_vector(topo);
            for (a, b) in acc.iter_mut().zip(v.bits()) {
                if *b {
                    *a += 1.0;
                }
            }
        }
    }
    let n = (us.len() * n_mc) as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Every ordered draw a count/index head can produce.
pub fn ordered_draws(items: usize, count_dims: usize) -> Vec<SubsetDraw> {
    let mut out = Vec::new();
    fn rec(items: usize, count: usize, order: &mut Vec<usize>, out: &mut Vec<SubsetDraw>) {
        if order.len() == count {
            out.push(SubsetDraw {
                count,
                order: order.clone(),
            });
            return;
        }
        for i in 0..items {
            if !order.contains(&i) {
                order.push(i);
                rec(items, count, order, out);
                order.pop();
            }
        }
    }
    for c in 1..=count_dims.min(items) {
        rec(items, c, &mut Vec::new(), &mut out);
    }
    out
}
