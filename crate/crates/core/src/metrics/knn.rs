use statrs::function::gamma::digamma;

use crate::error::{Error, Result};

/// Neighbour order used for sum-rates of deterministic encoders.
pub const KNN_NEIGHBORS: usize = 3;

/// Kozachenko-Leonenko differential entropy estimate in nats, with the
/// max-norm: `psi(N) - psi(k) + d ln 2 + (d/N) sum_i ln r_i`, where `r_i` is
/// the distance from point `i` to its `k`-th nearest neighbour.
pub fn knn_entropy(points: &[&[f64]], k: usize) -> Result<f64> {
    let n = points.len();
    if k == 0 {
        return Err(Error::Invalid("k-NN entropy needs k >= 1".into()));
    }
    if n <= k {
        return Err(Error::Invalid(format!("k-NN entropy with k={k} needs more than {k} points, got {n}")));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Invalid("k-NN entropy needs points of one positive dimension".into()));
    }
    let mut log_r = 0.0;
    let mut nearest = Vec::with_capacity(k + 1);
    for (i, p) in points.iter().enumerate() {
        nearest.clear();
        for (j, q) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let dist = p.iter().zip(*q).fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
            if nearest.len() < k || dist < nearest[k - 1] {
                let at = nearest.partition_point(|x| *x <= dist);
                nearest.insert(at, dist);
                nearest.truncate(k);
            }
        }
        let r = nearest[k - 1];
        if r <= 0.0 {
            return Err(Error::Numerical(format!("point {i} has {k} exact duplicates")));
        }
        log_r += r.ln();
    }
    Ok(digamma(n as f64) - digamma(k as f64) + d as f64 * 2f64.ln() + d as f64 * log_r / n as f64)
}
