//! Score-function update of the selectors.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::selection::{DrawRecord, SelectorPolicy};
use crate::tensor::Tensor;

/// Leave-one-out centering: `L_i - mean_{j != i} L_j`, which equals
/// `B/(B-1) * (L_i - mean(L))`. The baseline of sample `i` does not depend
/// on its own draw, so the estimator stays unbiased.
pub fn baseline_subtraction(losses: &[f64]) -> Result<Vec<f64>> {
    let b = losses.len();
    if b < 2 {
        return Err(Error::Invalid(format!("baseline needs at least 2 samples, got {b}")));
    }
    let mean = losses.iter().sum::<f64>() / b as f64;
    let scale = b as f64 / (b - 1) as f64;
    Ok(losses.iter().map(|l| scale * (l - mean)).collect())
}

/// Fills `policy.store`'s gradients with
/// `(1/B) sum_i sum_t coef[t][i] * grad log p_t(draw_i | u_i)`,
/// where `p_t` covers receiver `t`'s draw and the transmitter draws serving
/// it. Coefficients are constants. Returns the mean total log-likelihood.
pub fn policy_gradient(
    policy: &mut SelectorPolicy,
    us: &[Vec<f64>],
    records: &[DrawRecord],
    coef: &[Vec<f64>],
) -> Result<f64> {
    let b = records.len();
    if b == 0 {
        return Err(Error::Invalid("policy gradient needs a non-empty batch".into()));
    }
    let t_count = policy.topology().receivers();
    if coef.len() != t_count || coef.iter().any(|c| c.len() != b) {
        return Err(Error::shape("policy_gradient", &[coef.len()], &[t_count, b]));
    }
    let mut g = Graph::new();
    let per_t = policy.log_prob_graph(&mut g, us, records)?;
    let mut total_lp = 0.0;
    let mut surrogate = None;
    for (t, lp) in per_t.into_iter().enumerate() {
        total_lp += g.value(lp).data().iter().sum::<f64>();
        let c = g.constant(Tensor::matrix(b, 1, coef[t].clone())?);
        let w = g.mul(lp, c)?;
        surrogate = Some(match surrogate {
            None => w,
            Some(acc) => g.add(acc, w)?,
        });
    }
    let s = surrogate.expect("at least one receiver");
    let loss = g.mean(s);
    if !total_lp.is_finite() {
        return Err(Error::Numerical("selection log-likelihood is not finite".into()));
    }
    g.backward(loss)?;
    policy.store.zero_grads();
    g.accumulate_into(&mut policy.store);
    Ok(total_lp / b as f64)
}
