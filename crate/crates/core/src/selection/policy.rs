//! Cooperative point-process selectors.
//!
//! Every receiver `t` owns a network mapping the common randomness `u` to
//! `E_t + K` logits: a count head over `{1..E_t}` and an index head over the
//! `K` transmitters. Every transmitter `k` owns a network mapping
//! `(u, onehot(t))` to `min(E_k, m(k)) + m(k)` logits with the same split over
//! its modalities. A draw first samples the count, then that many distinct
//! indices sequentially, renormalizing over the items not yet drawn.
//!
//! All devices see the same `u`, so the joint selection factorizes into the
//! per-device conditionals.

use std::sync::Arc;

use rand::RngExt;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{subset_log_prob, Graph, SubsetDraw, Var};
use crate::nn::{FfnShape, FfnStack, ParamStore};
use crate::rng::{stream, Domain, StreamRng};
use crate::selection::{SelectionVector, Topology};
use crate::tensor::Tensor;

pub const SELECTION_STORE_TAG: u32 = 1;

/// Draws `u ~ N(0, I_dim)` for `(step, sample)`.
pub fn draw_common_randomness(seed: u64, step: u64, sample: u64, dim: usize) -> Vec<f64> {
    let mut rng = stream(seed, Domain::CommonRandomness, &[step, sample]);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Per-device random streams for one selection draw. Receiver `t` and
/// transmitter `(k, t)` each get a stream that depends only on
/// `(seed, step, sample)` and the device, so selectors run on separate
/// machines reproduce each other's draws.
#[derive(Clone, Copy, Debug)]
pub struct SelectionStreams {
    pub seed: u64,
    pub step: u64,
    pub sample: u64,
}

impl SelectionStreams {
    pub fn receiver(&self, t: usize) -> StreamRng {
        stream(self.seed, Domain::Selection, &[self.step, self.sample, 0, t as u64])
    }

    pub fn transmitter(&self, k: usize, t: usize) -> StreamRng {
        stream(
            self.seed,
            Domain::Selection,
            &[self.step, self.sample, 1, k as u64, t as u64],
        )
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn categorical<R: rand::Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if r < acc {
            return i;
        }
    }
    last
}

/// Samples a count from the first `count_dims` logits, then that many
/// distinct indices from the rest without replacement.
pub fn sample_subset<R: rand::Rng + ?Sized>(logits: &[f64], count_dims: usize, rng: &mut R) -> SubsetDraw {
    let (cl, il) = logits.split_at(count_dims);
    let count = categorical(&softmax(cl), rng) + 1;
    let mut remaining: Vec<usize> = (0..il.len()).collect();
    let mut order = Vec::with_capacity(count);
    for _ in 0..count.min(il.len()) {
        let sub: Vec<f64> = remaining.iter().map(|&i| il[i]).collect();
        let pick = categorical(&softmax(&sub), rng);
        order.push(remaining.remove(pick));
    }
    SubsetDraw { count, order }
}

/// Everything sampled by all selectors for one `u`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrawRecord {
    /// Receiver draws over transmitters, indexed by `t`.
    pub receivers: Vec<SubsetDraw>,
    /// Transmitter draws over modalities, indexed `[t][k]`; `None` where
    /// receiver `t` did not pick transmitter `k`.
    pub transmitters: Vec<Vec<Option<SubsetDraw>>>,
}

impl DrawRecord {
    /// Characteristic vector of this draw (before any projection).
    pub fn to_vector(&self, topo: &Arc<Topology>) -> SelectionVector {
        let mut v = SelectionVector::zeros(topo.clone());
        for (t, per_k) in self.transmitters.iter().enumerate() {
            for (k, d) in per_k.iter().enumerate() {
                if let Some(d) = d {
                    for &m in &d.order {
                        v.set(t, k, m, true);
                    }
                }
            }
        }
        v
    }
}

/// Selector outputs for one `u`: receiver logits `[t]` and transmitter
/// logits `[k][t]`.
#[derive(Clone, Debug)]
pub struct SelectorLogits {
    pub rx: Vec<Vec<f64>>,
    pub tx: Vec<Vec<Vec<f64>>>,
}

impl SelectorLogits {
    /// Receiver `t` picks its transmitters: returns the draw and `â_t`.
    pub fn sample_receiver<R: rand::Rng + ?Sized>(
        &self,
        topo: &Topology,
        t: usize,
        rng: &mut R,
    ) -> (SubsetDraw, Vec<bool>) {
        let draw = sample_subset(&self.rx[t], topo.rx_budget(t), rng);
        let mut view = vec![false; topo.transmitters()];
        for &k in &draw.order {
            view[k] = true;
        }
        (draw, view)
    }

    /// Transmitter `k` picks modalities for receiver `t`, or nothing when
    /// `t` did not select it.
    pub fn sample_transmitter<R: rand::Rng + ?Sized>(
        &self,
        topo: &Topology,
        k: usize,
        t: usize,
        selected: bool,
        rng: &mut R,
    ) -> Option<SubsetDraw> {
        selected.then(|| sample_subset(&self.tx[k][t], topo.tx_local_budget(k), rng))
    }

    pub fn sample(&self, topo: &Topology, streams: SelectionStreams) -> DrawRecord {
        let mut receivers = Vec::with_capacity(topo.receivers());
        let mut transmitters = Vec::with_capacity(topo.receivers());
        for t in 0..topo.receivers() {
            let (draw, view) = self.sample_receiver(topo, t, &mut streams.receiver(t));
            let per_k = (0..topo.transmitters())
                .map(|k| self.sample_transmitter(topo, k, t, view[k], &mut streams.transmitter(k, t)))
                .collect();
            receivers.push(draw);
            transmitters.push(per_k);
        }
        DrawRecord {
            receivers,
            transmitters,
        }
    }

    /// Log-likelihood of the ordered draw: count mass times sequential
    /// without-replacement index masses, summed over every receiver and
    /// every activated transmitter.
    pub fn log_prob(&self, topo: &Topology, record: &DrawRecord) -> Result<f64> {
        if record.receivers.len() != topo.receivers() || record.transmitters.len() != topo.receivers() {
            return Err(Error::Invalid("draw record does not cover every receiver".into()));
        }
        let mut total = 0.0;
        for t in 0..topo.receivers() {
            total += self.receiver_log_prob(topo, t, record)?;
        }
        Ok(total)
    }

    /// Receiver `t`'s own term plus the terms of the transmitters it picked.
    pub fn receiver_log_prob(&self, topo: &Topology, t: usize, record: &DrawRecord) -> Result<f64> {
        let rd = &record.receivers[t];
        let mut lp = subset_log_prob(&self.rx[t], topo.rx_budget(t), rd)
            .ok_or_else(|| Error::Invalid(format!("receiver {t} draw {rd:?} does not fit its policy")))?;
        let per_k = &record.transmitters[t];
        if per_k.len() != topo.transmitters() {
            return Err(Error::Invalid(format!("receiver {t} record covers {} transmitters", per_k.len())));
        }
        for (k, d) in per_k.iter().enumerate() {
            let picked = rd.order.contains(&k);
            match (picked, d) {
                (true, Some(d)) => {
                    lp += subset_log_prob(&self.tx[k][t], topo.tx_local_budget(k), d).ok_or_else(|| {
                        Error::Invalid(format!("transmitter {k} draw {d:?} does not fit its policy"))
                    })?;
                }
                (false, None) => {}
                _ => {
                    return Err(Error::Invalid(format!(
                        "transmitter {k} draw for receiver {t} disagrees with the receiver's choice"
                    )))
                }
            }
        }
        Ok(lp)
    }
}

/// The parameterized selectors of every receiver and transmitter.
#[derive(Clone, Debug)]
pub struct SelectorPolicy {
    topo: Arc<Topology>,
    cr_dim: usize,
    rx_nets: Vec<FfnStack>,
    tx_nets: Vec<FfnStack>,
    pub store: ParamStore,
}

impl SelectorPolicy {
    pub fn new(topo: Arc<Topology>, cr_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut store = ParamStore::new(SELECTION_STORE_TAG);
        let k = topo.transmitters();
        let t = topo.receivers();
        let rx_nets = (0..t)
            .map(|ti| {
                let mut rng = stream(seed, Domain::Init, &[1, ti as u64]);
                let shape = FfnShape::new(cr_dim, hidden, topo.rx_budget(ti) + k);
                FfnStack::new(&mut store, &format!("rx{ti}"), shape, &mut rng)
            })
            .collect();
        let tx_nets = (0..k)
            .map(|ki| {
                let mut rng = stream(seed, Domain::Init, &[2, ki as u64]);
                let shape = FfnShape::new(cr_dim + t, hidden, topo.tx_local_budget(ki) + topo.modalities(ki));
                FfnStack::new(&mut store, &format!("tx{ki}"), shape, &mut rng)
            })
            .collect();
        SelectorPolicy {
            topo,
            cr_dim,
            rx_nets,
            tx_nets,
            store,
        }
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topo
    }

    pub fn cr_dim(&self) -> usize {
        self.cr_dim
    }

    pub fn rx_net(&self, t: usize) -> &FfnStack {
        &self.rx_nets[t]
    }

    pub fn tx_net(&self, k: usize) -> &FfnStack {
        &self.tx_nets[k]
    }

    fn cr_tensor(&self, us: &[Vec<f64>]) -> Result<Tensor> {
        if let Some(bad) = us.iter().find(|u| u.len() != self.cr_dim) {
            return Err(Error::shape("common randomness", &[bad.len()], &[self.cr_dim]));
        }
        Tensor::from_rows(us)
    }

    /// Transmitter-net input rows, receiver-major: row `t * B + i` is
    /// `(u_i, onehot(t))`.
    fn tx_input(&self, us: &[Vec<f64>]) -> Result<Tensor> {
        let t_count = self.topo.receivers();
        let mut rows = Vec::with_capacity(us.len() * t_count);
        for t in 0..t_count {
            for u in us {
                let mut r = u.clone();
                r.extend((0..t_count).map(|j| if j == t { 1.0 } else { 0.0 }));
                rows.push(r);
            }
        }
        Tensor::from_rows(&rows)
    }

    /// Logits for a batch of `u`s, no gradient tracking.
    pub fn logits_batch(&self, us: &[Vec<f64>]) -> Result<Vec<SelectorLogits>> {
        let u = self.cr_tensor(us)?;
        let b = us.len();
        let rx: Vec<Tensor> = self
            .rx_nets
            .iter()
            .map(|n| n.eval(&self.store, u.clone()))
            .collect::<Result<_>>()?;
        let txin = self.tx_input(us)?;
        let tx: Vec<Tensor> = self
            .tx_nets
            .iter()
            .map(|n| n.eval(&self.store, txin.clone()))
            .collect::<Result<_>>()?;
        let t_count = self.topo.receivers();
        Ok((0..b)
            .map(|i| SelectorLogits {
                rx: rx.iter().map(|l| l.row_slice(i).to_vec()).collect(),
                tx: tx
                    .iter()
                    .map(|l| (0..t_count).map(|t| l.row_slice(t * b + i).to_vec()).collect())
                    .collect(),
            })
            .collect())
    }

    pub fn logits(&self, u: &[f64]) -> Result<SelectorLogits> {
        Ok(self.logits_batch(&[u.to_vec()])?.remove(0))
    }

    /// Samples a full selection for `u` with per-device streams.
    pub fn sample(&self, u: &[f64], streams: SelectionStreams) -> Result<DrawRecord> {
        Ok(self.logits(u)?.sample(&self.topo, streams))
    }

    /// `log p_θ(record | u)`.
    pub fn log_prob(&self, u: &[f64], record: &DrawRecord) -> Result<f64> {
        self.logits(u)?.log_prob(&self.topo, record)
    }

    /// Differentiable per-receiver log-likelihoods: one `[B, 1]` column per
    /// receiver `t`, holding receiver `t`'s term plus the terms of the
    /// transmitters serving it.
    pub fn log_prob_graph(&self, g: &mut Graph, us: &[Vec<f64>], records: &[DrawRecord]) -> Result<Vec<Var>> {
        if us.len() != records.len() || us.is_empty() {
            return Err(Error::shape("log_prob_graph", &[us.len()], &[records.len()]));
        }
        let b = us.len();
        let t_count = self.topo.receivers();
        for r in records {
            if r.receivers.len() != t_count || r.transmitters.len() != t_count {
                return Err(Error::Invalid("draw record does not cover every receiver".into()));
            }
        }
        let u = g.constant(self.cr_tensor(us)?);
        let mut per_t = Vec::with_capacity(t_count);
        for t in 0..t_count {
            let logits = self.rx_nets[t].forward(g, &self.store, u)?;
            let draws = records.iter().map(|r| Some(r.receivers[t].clone())).collect();
            per_t.push(g.subset_log_prob(logits, self.topo.rx_budget(t), draws)?);
        }
        let txin = g.constant(self.tx_input(us)?);
        for k in 0..self.topo.transmitters() {
            let logits = self.tx_nets[k].forward(g, &self.store, txin)?;
            let mut draws = Vec::with_capacity(t_count * b);
            for t in 0..t_count {
                for r in records {
                    let d = &r.transmitters[t][k];
                    if d.is_some() != r.receivers[t].order.contains(&k) {
                        return Err(Error::Invalid(format!(
                            "transmitter {k} draw for receiver {t} disagrees with the receiver's choice"
                        )));
                    }
                    draws.push(d.clone());
                }
            }
            let lp = g.subset_log_prob(logits, self.topo.tx_local_budget(k), draws)?;
            for (t, acc) in per_t.iter_mut().enumerate() {
                let part = g.slice_rows(lp, t * b, b)?;
                *acc = g.add(*acc, part)?;
            }
        }
        Ok(per_t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_index_logits_pick_argmax() {
        let logits = [50.0, -50.0, 50.0, -50.0, -50.0];
        let mut rng = stream(1, Domain::Oracle, &[]);
        let hits = (0..10_000)
            .filter(|_| sample_subset(&logits, 2, &mut rng).order == vec![0])
            .count();
        assert!(hits as f64 / 1e4 >= 0.999);
    }

    #[test]
    fn draws_have_requested_count_and_distinct_items() {
        let logits = [0.3, -0.1, 0.2, 0.0, 0.5, -1.0];
        let mut rng = stream(2, Domain::Oracle, &[]);
        for _ in 0..1000 {
            let d = sample_subset(&logits, 2, &mut rng);
            assert!((1..=2).contains(&d.count));
            assert_eq!(d.order.len(), d.count);
            let mut s = d.order.clone();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), d.count);
        }
    }

    #[test]
    fn unselected_transmitter_is_zero_with_zero_log_prob() {
        let topo = Arc::new(Topology::uniform(vec![3, 3, 3], 3, 2, 4).unwrap());
        let policy = SelectorPolicy::new(topo.clone(), 4, &[8], 5);
        let u = draw_common_randomness(5, 0, 0, 4);
        let logits = policy.logits(&u).unwrap();
        let mut rng = stream(1, Domain::Oracle, &[]);
        assert!(logits.sample_transmitter(&topo, 1, 0, false, &mut rng).is_none());
        let rec = policy.sample(&u, SelectionStreams { seed: 1, step: 0, sample: 0 }).unwrap();
        // receiver term + selected transmitter terms only
        let manual: f64 = (0..3)
            .map(|t| {
                let mut lp = subset_log_prob(&logits.rx[t], 2, &rec.receivers[t]).unwrap();
                for k in 0..3 {
                    if let Some(d) = &rec.transmitters[t][k] {
                        lp += subset_log_prob(&logits.tx[k][t], 3, d).unwrap();
                    }
                }
                lp
            })
            .sum();
        assert!((policy.log_prob(&u, &rec).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn same_u_same_streams_same_draws() {
        let topo = Arc::new(Topology::uniform(vec![2, 3], 2, 2, 3).unwrap());
        let a = SelectorPolicy::new(topo.clone(), 6, &[8, 4], 9);
        let b = SelectorPolicy::new(topo, 6, &[8, 4], 9);
        let u = draw_common_randomness(3, 7, 1, 6);
        let s = SelectionStreams { seed: 3, step: 7, sample: 1 };
        assert_eq!(a.sample(&u, s).unwrap(), b.sample(&u, s).unwrap());
    }

    #[test]
    fn inconsistent_record_rejected() {
        let topo = Arc::new(Topology::uniform(vec![1, 1], 1, 2, 1).unwrap());
        let p = SelectorPolicy::new(topo, 2, &[4], 1);
        let u = vec![0.1, 0.2];
        let rec = DrawRecord {
            receivers: vec![SubsetDraw { count: 1, order: vec![0] }],
            transmitters: vec![vec![None, Some(SubsetDraw { count: 1, order: vec![0] })]],
        };
        assert!(p.log_prob(&u, &rec).is_err());
        let mut g = Graph::new();
        assert!(p.log_prob_graph(&mut g, &[u], &[rec]).is_err());
    }

    #[test]
    fn graph_log_prob_matches_direct() {
        let topo = Arc::new(Topology::uniform(vec![2, 1, 3], 2, 2, 2).unwrap());
        let p = SelectorPolicy::new(topo.clone(), 3, &[6], 4);
        let us: Vec<Vec<f64>> = (0..3).map(|i| draw_common_randomness(4, 0, i, 3)).collect();
        let recs: Vec<DrawRecord> = us
            .iter()
            .enumerate()
            .map(|(i, u)| p.sample(u, SelectionStreams { seed: 4, step: 0, sample: i as u64 }).unwrap())
            .collect();
        let mut g = Graph::new();
        let cols = p.log_prob_graph(&mut g, &us, &recs).unwrap();
        for (i, (u, r)) in us.iter().zip(&recs).enumerate() {
            let logits = p.logits(u).unwrap();
            for (t, col) in cols.iter().enumerate() {
                let direct = logits.receiver_log_prob(&topo, t, r).unwrap();
                assert!((g.value(*col).get(i, 0) - direct).abs() < 1e-10);
            }
        }
    }
}
