//! Exact conditional entropy versus variational cross-entropy on a finite
//! channel.

use crate::error::{Error, Result};

const NORM_TOL: f64 = 1e-9;

/// For a joint `p[y][z]` and a decoder `q[z][y]`, returns
/// `(H(Y|Z), E[-log q(Y|Z)])`, both in nats.
pub fn variational_bound_check(joint: &[Vec<f64>], q: &[Vec<f64>]) -> Result<(f64, f64)> {
    let ny = joint.len();
    let nz = joint.first().map_or(0, Vec::len);
    if ny == 0 || nz == 0 || joint.iter().any(|r| r.len() != nz) {
        return Err(Error::Invalid("joint must be a non-empty rectangle".into()));
    }
    if joint.iter().flatten().any(|p| *p < 0.0 || !p.is_finite()) {
        return Err(Error::Invalid("joint has a negative or non-finite entry".into()));
    }
    let total: f64 = joint.iter().flatten().sum();
    if (total - 1.0).abs() > NORM_TOL {
        return Err(Error::Invalid(format!("joint sums to {total}")));
    }
    if q.len() != nz || q.iter().any(|r| r.len() != ny) {
        return Err(Error::Invalid("decoder must have one row per z and one column per y".into()));
    }
    for (z, row) in q.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|p| *p < 0.0) || (s - 1.0).abs() > NORM_TOL {
            return Err(Error::Invalid(format!("decoder row {z} is not a distribution (sum {s})")));
        }
    }
    let mut h = 0.0;
    let mut ce = 0.0;
    for z in 0..nz {
        let pz: f64 = (0..ny).map(|y| joint[y][z]).sum();
        for y in 0..ny {
            let p = joint[y][z];
            if p > 0.0 {
                h -= p * (p / pz).ln();
                ce -= p * q[z][y].ln();
            }
        }
    }
    Ok((h, ce))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn true_posterior_is_tight() {
        let joint = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        let q = vec![vec![0.25, 0.75], vec![1.0 / 3.0, 2.0 / 3.0]];
        let (h, ce) = variational_bound_check(&joint, &q).unwrap();
        assert!((h - ce).abs() < 1e-12);
    }

    #[test]
    fn uniform_decoder_gives_log_alphabet() {
        let joint = vec![vec![0.1, 0.15], vec![0.2, 0.05], vec![0.3, 0.0], vec![0.1, 0.1]];
        let q = vec![vec![0.25; 4]; 2];
        let (h, ce) = variational_bound_check(&joint, &q).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        assert!(ce >= h);
    }

    #[test]
    fn unnormalized_decoder_rejected() {
        let joint = vec![vec![0.5], vec![0.5]];
        assert!(variational_bound_check(&joint, &[vec![0.5, 0.6]]).is_err());
    }
}
