//! Densities, the batch MI estimator and the relevance losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Bounds on the encoder's log-variance.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Output contract of a decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression { dim: usize },
}

impl TaskKind {
    pub fn output_dim(&self) -> usize {
        match *self {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression { dim } => dim,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskKind::Classification { .. })
    }
}

/// Per-sample supervision for one task.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<Vec<f64>>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `log N(z; mu, diag(exp(logvar)))`.
pub fn gaussian_log_pdf(z: &[f64], mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if z.len() != mu.len() || z.len() != logvar.len() {
        return Err(Error::shape("gaussian_log_pdf", &[z.len()], &[mu.len(), logvar.len()]));
    }
    Ok(z.iter()
        .zip(mu)
        .zip(logvar)
        .map(|((z, m), l)| -0.5 * LN_2PI - 0.5 * l - (z - m) * (z - m) / (2.0 * l.exp()))
        .sum())
}

/// Per-sample MI terms `log p(z_i|x_i) - log (1/N) sum_j p(z_i|x_j)` as an
/// `[N, 1]` column. Row `i` of `mu`/`logvar` parameterizes `p(.|x_i)`.
pub fn mi_terms(g: &mut Graph, z: Var, mu: Var, logvar: Var) -> Result<Var> {
    let n = g.value(z).rows();
    if n == 0 {
        return Err(Error::Invalid("MI estimate needs at least one sample".into()));
    }
    let pair = g.gaussian_pairwise_log_pdf(z, mu, logvar)?;
    mi_terms_from_log_densities(g, pair)
}

/// The MI terms from an `[N, N]` matrix with entry `(i, j) = log p(z_i|x_j)`.
pub fn mi_terms_from_log_densities(g: &mut Graph, pair: Var) -> Result<Var> {
    let n = g.value(pair).rows();
    if n == 0 || g.value(pair).cols() != n {
        return Err(Error::shape("mi_terms_from_log_densities", g.value(pair).shape(), &[n, n]));
    }
    let own = g.diag(pair)?;
    let lse = g.log_sum_exp_rows(pair);
    let marginal = g.add_scalar(lse, -(n as f64).ln());
    g.sub(own, marginal)
}

/// Batch MI estimate: the mean of [`mi_terms`].
pub fn estimate_mi(g: &mut Graph, z: Var, mu: Var, logvar: Var) -> Result<Var> {
    let terms = mi_terms(g, z, mu, logvar)?;
    Ok(g.mean(terms))
}

/// Per-sample relevance loss as an `[N, 1]` column: cross-entropy for
/// classification, `0.5 * |y_hat - y|^2` for regression.
pub fn relevance_loss(g: &mut Graph, out: Var, kind: TaskKind, targets: &Targets) -> Result<Var> {
    let ov = g.value(out);
    if ov.rows() != targets.len() {
        return Err(Error::shape("relevance_loss", ov.shape(), &[targets.len()]));
    }
    if ov.cols() != kind.output_dim() {
        return Err(Error::shape("relevance_loss", ov.shape(), &[ov.rows(), kind.output_dim()]));
    }
    match (kind, targets) {
        (TaskKind::Classification { classes }, Targets::Classes(y)) => {
            if let Some(bad) = y.iter().find(|c| **c >= classes) {
                return Err(Error::Index(format!("label {bad} outside {classes} classes")));
            }
            let lsm = g.log_softmax(out);
            let picked = g.pick_cols(lsm, y)?;
            Ok(g.scale(picked, -1.0))
        }
        (TaskKind::Regression { dim }, Targets::Values(v)) => {
            if let Some(bad) = v.iter().find(|r| r.len() != dim) {
                return Err(Error::shape("relevance_loss", &[bad.len()], &[dim]));
            }
            let target = g.constant(Tensor::from_rows(v)?);
            let diff = g.sub(out, target)?;
            let sq = g.mul(diff, diff)?;
            let s = g.sum_rows(sq);
            Ok(g.scale(s, 0.5))
        }
        _ => Err(Error::Invalid("targets do not match the task kind".into())),
    }
}

/// Class probabilities from logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_at_origin() {
        let v = gaussian_log_pdf(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((v + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((v + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn density_at_mean() {
        let lv = [0.3, -1.2, 2.0];
        let v = gaussian_log_pdf(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &lv).unwrap();
        let expect: f64 = -0.5 * lv.iter().map(|l| LN_2PI + l).sum::<f64>();
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn constant_encoder_has_zero_mi() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::matrix(4, 2, [0.5, -0.3].repeat(4)).unwrap());
        let lv = g.constant(Tensor::matrix(4, 2, vec![0.1; 8]).unwrap());
        let z = g.constant(Tensor::matrix(4, 2, vec![0.1, 0.2, -1.0, 0.3, 2.0, 0.0, 0.4, 0.4]).unwrap());
        let mi = estimate_mi(&mut g, z, mu, lv).unwrap();
        assert!(g.value(mi).item().abs() < 1e-12);
    }

    #[test]
    fn single_sample_has_zero_mi() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::row(vec![1.0, 2.0]));
        let lv = g.constant(Tensor::row(vec![0.0, 0.5]));
        let z = g.constant(Tensor::row(vec![0.0, -1.0]));
        let mi = estimate_mi(&mut g, z, mu, lv).unwrap();
        assert_eq!(g.value(mi).item(), 0.0);
    }

    #[test]
    fn label_out_of_range() {
        let mut g = Graph::new();
        let out = g.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let kind = TaskKind::Classification { classes: 3 };
        assert!(relevance_loss(&mut g, out, kind, &Targets::Classes(vec![3])).is_err());
    }

    #[test]
    fn relevance_trivial_values() {
        let mut g = Graph::new();
        let kind = TaskKind::Classification { classes: 10 };
        let uniform = g.constant(Tensor::matrix(1, 10, vec![0.0; 10]).unwrap());
        let ce = relevance_loss(&mut g, uniform, kind, &Targets::Classes(vec![4])).unwrap();
        assert!((g.value(ce).item() - 10f64.ln()).abs() < 1e-12);
        let mut sharp = vec![-800.0; 10];
        sharp[2] = 800.0;
        let sharp = g.constant(Tensor::matrix(1, 10, sharp).unwrap());
        let ce = relevance_loss(&mut g, sharp, kind, &Targets::Classes(vec![2])).unwrap();
        assert_eq!(g.value(ce).item(), 0.0);
        let reg = TaskKind::Regression { dim: 3 };
        let y = vec![vec![0.5, -1.0, 2.0]];
        let out = g.constant(Tensor::from_rows(&y).unwrap());
        let mse = relevance_loss(&mut g, out, reg, &Targets::Values(y)).unwrap();
        assert_eq!(g.value(mse).item(), 0.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[3.0, -1.0, 0.2, 7.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&p), 3);
    }
}
