//! Reference computations shared by the integration test targets.
#![allow(dead_code, clippy::type_complexity)]

use std::sync::Arc;

use rand::RngExt;
use rand_distr::StandardNormal;
use semcom_core::coding::{estimate_mi, relevance_loss, Codec, CodecShape, Targets, TaskKind};
use semcom_core::rng::{stream, Domain};
use semcom_core::selection::{DrawRecord, SelectorLogits, Topology};
use semcom_core::{Graph, SubsetDraw, Tensor};

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Every ordered draw of the count/index process with its probability,
/// computed from first principles.
pub fn ordered_draws(logits: &[f64], count_dims: usize) -> Vec<(SubsetDraw, f64)> {
    let (cl, il) = logits.split_at(count_dims);
    let pc = softmax(cl);
    let mut out = Vec::new();
    fn rec(il: &[f64], left: usize, p: f64, seq: &mut Vec<usize>, count: usize, out: &mut Vec<(SubsetDraw, f64)>) {
        if left == 0 || seq.len() == il.len() {
            out.push((SubsetDraw { count, order: seq.clone() }, p));
            return;
        }
        let rem: Vec<usize> = (0..il.len()).filter(|i| !seq.contains(i)).collect();
        let w = softmax(&rem.iter().map(|&i| il[i]).collect::<Vec<_>>());
        for (j, &i) in rem.iter().enumerate() {
            seq.push(i);
            rec(il, left - 1, p * w[j], seq, count, out);
            seq.pop();
        }
    }
    for (c, p) in pc.iter().enumerate() {
        rec(il, c + 1, *p, &mut Vec::new(), c + 1, &mut out);
    }
    out
}

/// All draw records of a topology with their first-principles probability.
pub fn enumerate_records(topo: &Topology, logits: &SelectorLogits) -> Vec<(DrawRecord, f64)> {
    let mut per_receiver: Vec<Vec<(SubsetDraw, Vec<Option<SubsetDraw>>, f64)>> = Vec::new();
    for t in 0..topo.receivers() {
        let mut opts = Vec::new();
        for (rd, p) in ordered_draws(&logits.rx[t], topo.rx_budget(t)) {
            let mut partial: Vec<(Vec<Option<SubsetDraw>>, f64)> = vec![(Vec::new(), p)];
            for k in 0..topo.transmitters() {
                let mut next = Vec::new();
                for (v, q) in partial {
                    if rd.order.contains(&k) {
                        for (td, r) in ordered_draws(&logits.tx[k][t], topo.tx_local_budget(k)) {
                            let mut v2 = v.clone();
                            v2.push(Some(td));
                            next.push((v2, q * r));
                        }
                    } else {
                        let mut v2 = v.clone();
                        v2.push(None);
                        next.push((v2, q));
                    }
                }
                partial = next;
            }
            for (v, q) in partial {
                opts.push((rd.clone(), v, q));
            }
        }
        per_receiver.push(opts);
    }
    let mut out: Vec<(DrawRecord, f64)> = vec![(
        DrawRecord {
            receivers: vec![],
            transmitters: vec![],
        },
        1.0,
    )];
    for opts in per_receiver {
        let mut next = Vec::new();
        for (rec, p) in &out {
            for (rd, td, q) in &opts {
                let mut r = rec.clone();
                r.receivers.push(rd.clone());
                r.transmitters.push(td.clone());
                next.push((r, p * q));
            }
        }
        out = next;
    }
    out
}

pub fn random_logits(topo: &Topology, seed: u64, scale: f64) -> SelectorLogits {
    let mut rng = stream(seed, Domain::Oracle, &[7]);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-scale..scale)).collect() };
    SelectorLogits {
        rx: (0..topo.receivers())
            .map(|t| draw(topo.rx_budget(t) + topo.transmitters()))
            .collect(),
        tx: (0..topo.transmitters())
            .map(|k| (0..topo.receivers()).map(|_| draw(topo.tx_local_budget(k) + topo.modalities(k))).collect())
            .collect(),
    }
}

pub fn normal_tensor(rows: usize, cols: usize, seed: u64, tag: u64) -> Tensor {
    let mut rng = stream(seed, Domain::Oracle, &[tag]);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub fn tiny_codec() -> Codec {
    let topo = Arc::new(Topology::uniform(vec![2, 1], 2, 2, 3).unwrap());
    let shape = CodecShape {
        input_dims: vec![vec![3, 2], vec![4]],
        tasks: vec![TaskKind::Classification { classes: 3 }, TaskKind::Regression { dim: 2 }],
        latent_dim: 4,
        encoder_hidden: vec![5],
        decoder_hidden: vec![5],
    };
    Codec::new(topo, shape, 21).unwrap()
}

pub struct Fixture {
    pub x: Vec<Vec<Tensor>>,
    pub eps: Vec<Vec<Tensor>>,
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

pub const N: usize = 8;

pub fn fixture() -> Fixture {
    let dims = [[3usize, 2], [4, 0]];
    let mut x = Vec::new();
    let mut eps = Vec::new();
    for (k, row) in dims.iter().enumerate() {
        let mut xr = Vec::new();
        let mut er = Vec::new();
        for (m, &d) in row.iter().enumerate().filter(|(_, d)| **d > 0) {
            xr.push(normal_tensor(N, d, 5, (k * 10 + m) as u64));
            er.push(normal_tensor(N, 4, 6, (k * 10 + m) as u64));
        }
        x.push(xr);
        eps.push(er);
    }
    let mask = (0..N).map(|i| vec![true, i % 2 == 0, i % 3 != 0]).collect();
    Fixture {
        x,
        eps,
        mask,
        labels: (0..N).map(|i| i % 3).collect(),
        values: (0..N).map(|i| vec![i as f64 * 0.1, -0.2]).collect(),
    }
}

/// MI of every slot plus masked global and local relevance for both tasks.
pub fn codec_loss(g: &mut Graph, c: &Codec, f: &Fixture) -> semcom_core::Var {
    let slots = [(0, 0), (0, 1), (1, 0)];
    let mut total = None;
    let mut add = |g: &mut Graph, v| {
        total = Some(match total {
            None => v,
            Some(a) => g.add(a, v).unwrap(),
        })
    };
    for t in 0..2 {
        let mut zs = Vec::new();
        for &(k, m) in &slots {
            let e = c.encode(g, k, m, &f.x[k][m], &[t; N], Some(&f.eps[k][m])).unwrap();
            let mi = estimate_mi(g, e.z, e.mu, e.logvar).unwrap();
            add(g, mi);
            let out = c.local_decode(g, t, e.z, k, m).unwrap();
            let targets = if t == 0 { Targets::Classes(f.labels.clone()) } else { Targets::Values(f.values.clone()) };
            let l = relevance_loss(g, out, c.task(t), &targets).unwrap();
            let l = g.mean(l);
            add(g, l);
            zs.push(e.z);
        }
        let fused = c.fuse(g, &zs, &f.mask).unwrap();
        let out = c.global_decode(g, t, fused).unwrap();
        let targets = if t == 0 { Targets::Classes(f.labels.clone()) } else { Targets::Values(f.values.clone()) };
        let l = relevance_loss(g, out, c.task(t), &targets).unwrap();
        let l = g.mean(l);
        add(g, l);
    }
    total.unwrap()
}

/// Largest relative error between backpropagated and central-difference
/// gradients over every parameter of [`tiny_codec`], with its location.
pub fn worst_codec_gradient_error() -> (f64, String) {
    let mut c = tiny_codec();
    let f = fixture();
    let mut g = Graph::new();
    let loss = codec_loss(&mut g, &c, &f);
    g.backward(loss).unwrap();
    c.store.zero_grads();
    g.accumulate_into(&mut c.store);
    let eval = |c: &Codec| {
        let mut g = Graph::no_grad();
        let l = codec_loss(&mut g, c, &f);
        g.value(l).item()
    };
    let h = 1e-5;
    let ids: Vec<_> = c.store.ids().collect();
    let mut worst = (0.0, String::new());
    for id in ids {
        for i in 0..c.store.value(id).len() {
            let a = c.store.grad(id)[i];
            let orig = c.store.value(id).data()[i];
            c.store.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(&c);
            c.store.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(&c);
            c.store.value_mut(id).data_mut()[i] = orig;
            let n = (up - down) / (2.0 * h);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
            if rel > worst.0 {
                worst = (rel, format!("{}[{i}]", c.store.name(id)));
            }
        }
    }
    worst
}

pub fn random_channel(seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = stream(seed, Domain::Oracle, &[11]);
    let ny = rng.random_range(2..6);
    let nz = rng.random_range(2..6);
    let mut joint: Vec<Vec<f64>> = (0..ny).map(|_| (0..nz).map(|_| rng.random::<f64>()).collect()).collect();
    let s: f64 = joint.iter().flatten().sum();
    joint.iter_mut().flatten().for_each(|p| *p /= s);
    let q = (0..nz)
        .map(|_| {
            let r: Vec<f64> = (0..ny).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = r.iter().sum();
            r.into_iter().map(|v| v / s).collect()
        })
        .collect();
    (joint, q)
}
