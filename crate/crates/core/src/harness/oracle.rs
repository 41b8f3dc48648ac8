//! Brute-force checks runnable from the command line.
//!
//! Each suite recomputes a quantity from first principles (enumeration,
//! finite differences, plain arithmetic) and compares it with the library.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::RngExt;
use rand_distr::StandardNormal;

use crate::coding::{mi_terms_from_log_densities, variational_bound_check, Codec, CodecShape, TaskKind};
use crate::data::{generate, DataConfig, ModalityMatrix, ModalityType, TaskSpec, TypeDims};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::knn_entropy;
use crate::rng::{stream, Domain};
use crate::selection::{
    draw_common_randomness, DrawRecord, SelectionStreams, SelectionVector, SelectorLogits, SelectorPolicy, Topology,
};
use crate::tensor::Tensor;
use crate::training::{baseline_subtraction, policy_gradient, sample_losses, CodingBatch, ObjectiveConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    SelectionEnum,
    PgUnbiased,
    MiArith,
    BoundCheck,
    KnnEntropy,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::SelectionEnum,
        Suite::PgUnbiased,
        Suite::MiArith,
        Suite::BoundCheck,
        Suite::KnnEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::SelectionEnum => "selection-enum",
            Suite::PgUnbiased => "pg-unbiased",
            Suite::MiArith => "mi-arith",
            Suite::BoundCheck => "bound-check",
            Suite::KnnEntropy => "knn-entropy",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let known: Vec<&str> = Suite::ALL.iter().map(|x| x.name()).collect();
            Error::config("suite", format!("unknown suite `{s}`, expected one of {}", known.join(", ")))
        })
    }
}

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub suite: Suite,
    pub passed: bool,
    pub lines: Vec<String>,
}

pub fn run(suite: Suite, seed: u64) -> Result<OracleReport> {
    let (passed, lines) = match suite {
        Suite::SelectionEnum => selection_enum(seed)?,
        Suite::PgUnbiased => pg_unbiased(seed)?,
        Suite::MiArith => mi_arith()?,
        Suite::BoundCheck => bound_check(seed)?,
        Suite::KnnEntropy => knn_gaussian(seed)?,
    };
    Ok(OracleReport { suite, passed, lines })
}

/// Probability that the count/index head with `logits` yields exactly
/// `set`, summed over every order in which it could have been drawn.
pub fn set_probability(logits: &[f64], count_dims: usize, set: &[usize]) -> f64 {
    let s = set.len();
    if s == 0 || s > count_dims {
        return 0.0;
    }
    let counts = &logits[..count_dims];
    let cmax = counts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cz: f64 = counts.iter().map(|c| (c - cmax).exp()).sum();
    let p_count = (counts[s - 1] - cmax).exp() / cz;
    let w: Vec<f64> = logits[count_dims..].iter().map(|x| x.exp()).collect();
    fn orders(remaining: &mut Vec<usize>, pool: f64, w: &[f64]) -> f64 {
        if remaining.is_empty() {
            return 1.0;
        }
        let mut total = 0.0;
        for i in 0..remaining.len() {
            let item = remaining.remove(i);
            total += w[item] / pool * orders(remaining, pool - w[item], w);
            remaining.insert(i, item);
        }
        total
    }
    let pool: f64 = w.iter().sum();
    p_count * orders(&mut set.to_vec(), pool, &w)
}

/// `p(a_t | u)` of one receiver's block, by direct evaluation.
pub fn receiver_block_probability(topo: &Topology, logits: &SelectorLogits, t: usize, block: &[bool]) -> f64 {
    let k_count = topo.transmitters();
    let mut linked = Vec::new();
    let mut mods = Vec::new();
    for k in 0..k_count {
        let ms: Vec<usize> = (0..topo.modalities(k)).filter(|&m| block[topo.offset(k) + m]).collect();
        if !ms.is_empty() {
            linked.push(k);
            mods.push((k, ms));
        }
    }
    let mut p = set_probability(&logits.rx[t], topo.rx_budget(t), &linked);
    for (k, ms) in mods {
        p *= set_probability(&logits.tx[k][t], topo.tx_local_budget(k), &ms);
    }
    p
}

/// Total probability over every characteristic vector, as a product of
/// per-receiver sums over all `2^slots` blocks.
pub fn total_mass(topo: &Topology, logits: &SelectorLogits) -> f64 {
    let per = topo.slots_per_receiver();
    (0..topo.receivers())
        .map(|t| {
            (0u64..1 << per)
                .map(|mask| {
                    let block: Vec<bool> = (0..per).map(|i| mask >> i & 1 == 1).collect();
                    receiver_block_probability(topo, logits, t, &block)
                })
                .sum::<f64>()
        })
        .product()
}

fn uniform_logits(topo: &Topology) -> SelectorLogits {
    SelectorLogits {
        rx: (0..topo.receivers())
            .map(|t| vec![0.0; topo.rx_budget(t) + topo.transmitters()])
            .collect(),
        tx: (0..topo.transmitters())
            .map(|k| vec![vec![0.0; topo.tx_local_budget(k) + topo.modalities(k)]; topo.receivers()])
            .collect(),
    }
}

fn selection_enum(seed: u64) -> Result<(bool, Vec<String>)> {
    let mut lines = Vec::new();
    let topo = Topology::uniform(vec![3, 3, 3], 3, 2, 4)?;
    let uniform = total_mass(&topo, &uniform_logits(&topo));
    lines.push(format!("uniform logits K=3 E_t=2: total mass {uniform:.9}"));
    let mut worst = (uniform - 1.0).abs();
    let mut rng = stream(seed, Domain::Oracle, &[1]);
    for case in 0..20u64 {
        let k = rng.random_range(1..=4usize);
        let modalities: Vec<usize> = (0..k).map(|_| rng.random_range(1..=3)).collect();
        let t = rng.random_range(1..=2usize);
        let rx = rng.random_range(1..=k.min(3));
        let tx = rng.random_range(1..=4);
        let topo = Arc::new(Topology::uniform(modalities, t, rx, tx)?);
        let policy = SelectorPolicy::new(topo.clone(), 3, &[8], seed.wrapping_add(case));
        let u = draw_common_randomness(seed, case, 0, 3);
        let mass = total_mass(&topo, &policy.logits(&u)?);
        worst = worst.max((mass - 1.0).abs());
    }
    lines.push(format!("20 random (theta, u): worst |mass - 1| = {worst:.3e}"));
    Ok((worst <= 1e-9, lines))
}

fn mi_arith() -> Result<(bool, Vec<String>)> {
    // log p(z_i | x_j), row i, column j
    let fixture = [[0.8f64.ln(), 0.2f64.ln()], [0.4f64.ln(), 0.6f64.ln()]];
    let expected = 0.5 * ((0.8f64 / 0.5).ln() + (0.6f64 / 0.5).ln());
    let mut g = Graph::no_grad();
    let pair = g.constant(Tensor::from_rows(&fixture.iter().map(|r| r.to_vec()).collect::<Vec<_>>())?);
    let terms = mi_terms_from_log_densities(&mut g, pair)?;
    let got = g.value(terms).data().iter().sum::<f64>() / 2.0;
    Ok((
        (got - expected).abs() < 1e-12,
        vec![format!("N=2 fixture: estimate {got:.6}, arithmetic {expected:.6}")],
    ))
}

fn bound_check(seed: u64) -> Result<(bool, Vec<String>)> {
    let mut rng = stream(seed, Domain::Oracle, &[2]);
    let trials = 1000;
    let mut held = 0;
    for _ in 0..trials {
        let ny = rng.random_range(2..=5usize);
        let nz = rng.random_range(2..=5usize);
        let mut joint: Vec<Vec<f64>> = (0..ny).map(|_| (0..nz).map(|_| rng.random::<f64>()).collect()).collect();
        let s: f64 = joint.iter().flatten().sum();
        joint.iter_mut().flatten().for_each(|v| *v /= s);
        let q: Vec<Vec<f64>> = (0..nz)
            .map(|_| {
                let row: Vec<f64> = (0..ny).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = row.iter().sum();
                row.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let (h, ce) = variational_bound_check(&joint, &q)?;
        if ce >= h - 1e-12 {
            held += 1;
        }
    }
    Ok((held == trials, vec![format!("{held}/{trials} inequalities held")]))
}

fn knn_gaussian(seed: u64) -> Result<(bool, Vec<String>)> {
    let mut rng = stream(seed, Domain::Oracle, &[3]);
    let n = 10_000;
    let pts: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
        .collect();
    let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
    let h = knn_entropy(&refs, 3)?;
    let exact = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    Ok((
        (h - exact).abs() <= 0.1,
        vec![format!("standard normal d=2, N={n}: estimate {h:.4}, analytic {exact:.4}")],
    ))
}

/// Toy setting for the unbiasedness check: two single-modality
/// transmitters, one receiver that may link to either or both.
pub struct PgToy {
    pub topo: Arc<Topology>,
    pub policy: SelectorPolicy,
    /// Frozen-codec batch loss per non-empty selection, indexed by the
    /// receiver's bit pattern (1, 2, 3).
    pub losses: [f64; 4],
}

impl PgToy {
    pub fn new(seed: u64) -> Result<Self> {
        let topo = Arc::new(Topology::uniform(vec![1, 1], 1, 2, 1)?);
        let policy = SelectorPolicy::new(topo.clone(), 2, &[4], seed);
        let data_cfg = DataConfig {
            matrix: ModalityMatrix {
                grid: vec![vec![ModalityType::A], vec![ModalityType::C]],
                dims: TypeDims { a: 6, b: 4, c: 5 },
            },
            tasks: vec![TaskSpec::Identity],
            n: 16,
            seed,
            ..DataConfig::default()
        };
        let data = generate(&data_cfg)?;
        let shape = CodecShape {
            input_dims: data_cfg.matrix.input_dims(),
            tasks: vec![TaskKind::Classification { classes: 10 }],
            latent_dim: 3,
            encoder_hidden: vec![8],
            decoder_hidden: vec![8],
        };
        let codec = Codec::new(topo.clone(), shape, seed)?;
        let idx: Vec<usize> = (0..16).collect();
        let mut losses = [0.0; 4];
        for (pattern, slot) in losses.iter_mut().enumerate().skip(1) {
            let bits = vec![pattern & 1 == 1, pattern & 2 == 2];
            let batch = CodingBatch {
                batch: 16,
                features: vec![vec![data[0].gather(0, 0, &idx)], vec![data[0].gather(1, 0, &idx)]],
                targets: vec![data[0].gather_targets(&idx)],
                masks: vec![vec![bits; 16]],
                extra: vec![vec![0.0; 16]],
                noise: None,
            };
            let mut g = Graph::no_grad();
            let terms = sample_losses(&mut g, &codec, &batch, 0.1)?;
            *slot = g.value(terms[0].total).data().iter().sum::<f64>() / 16.0;
        }
        Ok(PgToy { topo, policy, losses })
    }

    fn pattern(&self, a: &SelectionVector) -> usize {
        usize::from(a.get(0, 0, 0)) + 2 * usize::from(a.get(0, 1, 0))
    }

    /// `(1/|U|) sum_u sum_a p(a|u) L(a)` by enumeration.
    pub fn exact_objective(&self, policy: &SelectorPolicy, us: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for l in policy.logits_batch(us)? {
            for pattern in 1..4usize {
                let block = [pattern & 1 == 1, pattern & 2 == 2];
                total += receiver_block_probability(&self.topo, &l, 0, &block) * self.losses[pattern];
            }
        }
        Ok(total / us.len() as f64)
    }

    /// Central finite differences of [`PgToy::exact_objective`] over every
    /// selector parameter.
    pub fn exact_gradient(&self, us: &[Vec<f64>], h: f64) -> Result<Vec<f64>> {
        let mut p = self.policy.clone();
        let ids: Vec<_> = p.store.ids().collect();
        let mut grad = Vec::new();
        for id in ids {
            for i in 0..p.store.value(id).len() {
                let orig = p.store.value(id).data()[i];
                p.store.value_mut(id).data_mut()[i] = orig + h;
                let up = self.exact_objective(&p, us)?;
                p.store.value_mut(id).data_mut()[i] = orig - h;
                let down = self.exact_objective(&p, us)?;
                p.store.value_mut(id).data_mut()[i] = orig;
                grad.push((up - down) / (2.0 * h));
            }
        }
        Ok(grad)
    }

    /// Score-function estimate from `draws` sampled selections per `u`.
    /// With `baseline`, coefficients are centered over consecutive batches
    /// of the default training batch size, as in training.
    pub fn sampled_gradient(&self, us: &[Vec<f64>], draws: usize, seed: u64, baseline: bool) -> Result<Vec<f64>> {
        let mut all_u = Vec::with_capacity(us.len() * draws);
        let mut records: Vec<DrawRecord> = Vec::with_capacity(us.len() * draws);
        let mut coef = Vec::with_capacity(us.len() * draws);
        for (j, u) in us.iter().enumerate() {
            let logits = self.policy.logits(u)?;
            for d in 0..draws {
                let streams = SelectionStreams {
                    seed,
                    step: j as u64,
                    sample: d as u64,
                };
                let rec = logits.sample(&self.topo, streams);
                coef.push(self.losses[self.pattern(&rec.to_vector(&self.topo))]);
                records.push(rec);
                all_u.push(u.clone());
            }
        }
        if baseline {
            let b = ObjectiveConfig::default().batch_size;
            coef = coef
                .chunks(b)
                .map(baseline_subtraction)
                .collect::<Result<Vec<_>>>()?
                .concat();
        }
        let mut p = self.policy.clone();
        policy_gradient(&mut p, &all_u, &records, &[coef])?;
        Ok(p.store.flat_grads())
    }
}

/// Relative error `|a - b| / |b|` of two vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

fn pg_unbiased(seed: u64) -> Result<(bool, Vec<String>)> {
    let toy = PgToy::new(seed)?;
    let us: Vec<Vec<f64>> = (0..1000).map(|i| draw_common_randomness(seed, 0, i, 2)).collect();
    let exact = toy.exact_gradient(&us, 1e-5)?;
    let sampled = toy.sampled_gradient(&us, 100, seed, true)?;
    let err = relative_error(&sampled, &exact);
    Ok((
        err <= 0.05,
        vec![
            format!("losses per selection {:?}", &toy.losses[1..]),
            format!("10^5 samples, leave-one-out baseline: relative error {err:.4} vs enumeration"),
        ],
    ))
}
