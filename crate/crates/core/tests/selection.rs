use std::collections::HashMap;
use std::sync::Arc;

use proptest::prelude::*;
use rand::RngExt;
use semcom_core::rng::{stream, Domain};
use semcom_core::selection::{
    exact_marginals, project, sample_subset, DrawRecord, SelectionStreams, SelectionVector, SelectorLogits,
    SelectorPolicy, Topology,
};
use semcom_core::SubsetDraw;

mod common;
use common::*;

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

#[test]
fn enumeration_normalizes_and_matches_log_prob() {
    let mut rng = stream(42, Domain::Oracle, &[0]);
    for case in 0..100u64 {
        let k = rng.random_range(1..=4usize);
        let t = rng.random_range(1..=2usize);
        let mods: Vec<usize> = (0..k).map(|_| rng.random_range(1..=2usize)).collect();
        let e_t = rng.random_range(1..=k.min(3));
        let e_k = rng.random_range(1..=3usize);
        let topo = Topology::uniform(mods, t, e_t, e_k).unwrap();
        let logits = random_logits(&topo, case, 3.0);
        let recs = enumerate_records(&topo, &logits);
        let mut total = 0.0;
        for (r, p) in &recs {
            let lp = logits.log_prob(&topo, r).unwrap();
            assert!((lp.exp() - p).abs() < 1e-12, "case {case}: {} vs {p}", lp.exp());
            total += lp.exp();
        }
        assert!((total - 1.0).abs() < 1e-9, "case {case}: total {total}");
    }
}

#[test]
fn uniform_receiver_set_masses() {
    // K=3, E_t=2, zero logits: singletons 1/2 * 1/3, pairs 1/2 * 2 * 1/3 * 1/2.
    let draws = ordered_draws(&[0.0; 5], 2);
    let mut sets: HashMap<Vec<usize>, f64> = HashMap::new();
    for (d, p) in draws {
        let mut s = d.order.clone();
        s.sort();
        *sets.entry(s).or_default() += p;
    }
    assert_eq!(sets.len(), 6);
    for (s, p) in &sets {
        assert!((p - 1.0 / 6.0).abs() < 1e-12, "{s:?}: {p}");
    }
    let pairs: f64 = sets.iter().filter(|(s, _)| s.len() == 2).map(|(_, p)| p).sum();
    assert!((pairs - 0.5).abs() < 1e-12);
}

#[test]
fn uniform_single_draw_log_prob_is_minus_log_6() {
    let topo = Topology::uniform(vec![1, 1, 1], 1, 2, 1).unwrap();
    let logits = uniform_logits(&topo);
    let rec = DrawRecord {
        receivers: vec![SubsetDraw { count: 1, order: vec![0] }],
        transmitters: vec![vec![Some(SubsetDraw { count: 1, order: vec![0] }), None, None]],
    };
    let lp = logits.log_prob(&topo, &rec).unwrap();
    assert!((lp + 6f64.ln()).abs() < 1e-12, "{lp}");
}

#[test]
fn two_transmitter_toy_sums_to_one() {
    let topo = Topology::uniform(vec![1, 1], 1, 2, 1).unwrap();
    for seed in 0..10 {
        let logits = random_logits(&topo, seed, 4.0);
        let recs = enumerate_records(&topo, &logits);
        let s: f64 = recs.iter().map(|(r, _)| logits.log_prob(&topo, r).unwrap().exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn transmitter_uniform_given_one_modality() {
    // m(k)=3, E_k local = 3, count forced to 1 by the count head.
    let logits = [50.0, -50.0, -50.0, 0.0, 0.0, 0.0];
    let draws = ordered_draws(&logits, 3);
    for m in 0..3 {
        let p: f64 = draws.iter().filter(|(d, _)| d.order == [m]).map(|(_, p)| p).sum();
        assert!((p - 1.0 / 3.0).abs() < 1e-9);
    }
}

#[test]
fn extreme_index_logits_pick_the_argmax() {
    let mut rng = stream(1, Domain::Oracle, &[3]);
    let logits = [50.0, -50.0, 50.0, -50.0, -50.0];
    let hits = (0..10_000)
        .filter(|_| sample_subset(&logits, 2, &mut rng).order == [0])
        .count();
    assert!(hits as f64 / 1e4 >= 0.999);
    let tx = [50.0, -50.0, -50.0, -50.0, 50.0];
    let hits = (0..10_000)
        .filter(|_| sample_subset(&tx, 2, &mut rng).order == [2])
        .count();
    assert!(hits as f64 / 1e4 >= 0.999);
}

#[test]
fn log_prob_matches_draw_frequencies() {
    let topo = Arc::new(Topology::uniform(vec![2, 1], 1, 2, 2).unwrap());
    let logits = random_logits(&topo, 9, 1.0);
    let n = 100_000u64;
    let mut counts: HashMap<String, u64> = HashMap::new();
    for s in 0..n {
        let r = logits.sample(&topo, SelectionStreams { seed: 3, step: 0, sample: s });
        *counts.entry(format!("{r:?}")).or_default() += 1;
    }
    for (r, p) in enumerate_records(&topo, &logits) {
        let lp = logits.log_prob(&topo, &r).unwrap().exp();
        assert!((lp - p).abs() < 1e-12);
        let f = *counts.get(&format!("{r:?}")).unwrap_or(&0) as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((f - p).abs() <= 3.0 * sigma + 1e-12, "{r:?}: freq {f} vs {p}");
    }
}

#[test]
fn same_u_and_streams_reproduce_draws() {
    let topo = Arc::new(Topology::uniform(vec![3, 3, 3], 3, 2, 4).unwrap());
    let a = SelectorPolicy::new(topo.clone(), 6, &[8], 5);
    let b = SelectorPolicy::new(topo.clone(), 6, &[8], 5);
    let u = vec![0.3, -1.0, 0.2, 0.0, 1.5, -0.7];
    for s in 0..20 {
        let st = SelectionStreams { seed: 1, step: 4, sample: s };
        assert_eq!(a.sample(&u, st).unwrap(), b.sample(&u, st).unwrap());
    }
}

#[test]
fn vectorize_index_arithmetic() {
    let topo = Arc::new(Topology::uniform(vec![3, 3, 3], 3, 2, 4).unwrap());
    // Receiver 1 <- transmitter 3, modality 1 (1-based).
    let a = SelectionVector::vectorize(topo, &[vec![(2, vec![0])]]).unwrap();
    let on: Vec<usize> = a.bits().iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect();
    assert_eq!(on, [6]);
}

#[test]
fn projection_keeps_each_slot_half_the_time() {
    let topo = Arc::new(Topology::new(vec![1], 2, vec![1, 1], vec![1]).unwrap());
    let raw = SelectionVector::ones(topo);
    let n = 10_000;
    let mut rng = stream(5, Domain::Projection, &[]);
    let mut first = 0;
    for _ in 0..n {
        let p = project(&raw, &mut rng);
        assert_eq!(p.selection.count_ones(), 1);
        assert_eq!(p.starved.len(), 1);
        first += usize::from(p.selection.get(0, 0, 0));
    }
    assert!((first as f64 / n as f64 - 0.5).abs() <= 0.02);
}

#[test]
fn uniform_heatmap_is_one_half() {
    let topo = Topology::uniform(vec![1, 1, 1], 2, 2, 2).unwrap();
    for m in exact_marginals(&topo, &uniform_logits(&topo)) {
        assert!((m - 0.5).abs() < 1e-12);
    }
}

#[test]
fn exact_marginals_agree_with_sampling() {
    let topo = Arc::new(Topology::uniform(vec![3, 2, 1], 2, 2, 4).unwrap());
    let logits = random_logits(&topo, 17, 2.0);
    let exact = exact_marginals(&topo, &logits);
    let n = 20_000;
    let mut freq = vec![0.0; topo.len()];
    for s in 0..n {
        let v = logits.sample(&topo, SelectionStreams { seed: 8, step: 0, sample: s }).to_vector(&topo);
        for (f, b) in freq.iter_mut().zip(v.bits()) {
            *f += f64::from(u8::from(*b)) / n as f64;
        }
    }
    for (e, f) in exact.iter().zip(&freq) {
        let sigma = (e * (1.0 - e) / n as f64).sqrt();
        assert!((e - f).abs() <= 4.0 * sigma + 1e-9, "{e} vs {f}");
    }
    for t in 0..topo.receivers() {
        let expected_links: f64 = (0..topo.transmitters())
            .map(|k| {
                let rx = semcom_core::selection::inclusion_probs(&logits.rx[t], topo.rx_budget(t));
                rx[k]
            })
            .sum();
        assert!((1.0..=2.0 + 1e-12).contains(&expected_links));
    }
}

/// Logits saturated so that sampling returns exactly `a`.
fn dirac_logits(topo: &Topology, a: &SelectionVector) -> SelectorLogits {
    let sat = |dims: usize, items: usize, count: usize, on: &[bool]| -> Vec<f64> {
        let mut l = vec![-50.0; dims + items];
        l[count - 1] = 50.0;
        for (i, o) in on.iter().enumerate() {
            l[dims + i] = if *o { 50.0 } else { -50.0 };
        }
        l
    };
    let mut rx = Vec::new();
    let mut tx = vec![Vec::new(); topo.transmitters()];
    for t in 0..topo.receivers() {
        let view = a.receiver_view(t);
        let n = view.iter().filter(|b| **b).count().max(1);
        rx.push(sat(topo.rx_budget(t), topo.transmitters(), n, &view));
        for (k, row) in tx.iter_mut().enumerate() {
            let on: Vec<bool> = (0..topo.modalities(k)).map(|m| a.get(t, k, m)).collect();
            let c = on.iter().filter(|b| **b).count().max(1);
            row.push(sat(topo.tx_local_budget(k), topo.modalities(k), c, &on));
        }
    }
    SelectorLogits { rx, tx }
}

#[test]
fn any_regular_selection_is_representable() {
    let topo = Arc::new(Topology::uniform(vec![3, 3, 3], 3, 2, 4).unwrap());
    let mut found = 0;
    for seed in 0..40u64 {
        let a = semcom_core::baselines::random_regular_selection(&topo, seed).unwrap();
        // Local budgets cap a transmitter's count for one receiver.
        let fits = (0..3).all(|t| (0..3).all(|k| (0..3).filter(|&m| a.get(t, k, m)).count() <= topo.tx_local_budget(k)));
        if !fits {
            continue;
        }
        found += 1;
        let logits = dirac_logits(&topo, &a);
        let n = if found == 1 { 10_000 } else { 500 };
        let hits = (0..n)
            .filter(|s| logits.sample(&topo, SelectionStreams { seed, step: 0, sample: *s }).to_vector(&topo) == a)
            .count();
        assert!(hits as f64 / n as f64 >= 0.999, "seed {seed}: {hits}/{n}");
    }
    assert!(found > 10);
}

proptest! {
    #[test]
    fn projection_output_meets_transmitter_budgets(bits in prop::collection::vec(any::<bool>(), 27), seed in 0u64..1000) {
        let topo = Arc::new(Topology::uniform(vec![3, 3, 3], 3, 2, 4).unwrap());
        let raw = SelectionVector::from_bits(topo.clone(), bits).unwrap();
        let p = project(&raw, &mut stream(seed, Domain::Projection, &[]));
        let report = p.selection.check_constraints();
        prop_assert!(report.transmitter_side_ok());
        for t in 0..3 {
            prop_assert_eq!(p.starved.contains(&t), p.selection.receiver_links(t) == 0);
        }
        // Projection only removes bits.
        for (o, r) in p.selection.bits().iter().zip(raw.bits()) {
            prop_assert!(!*o || *r);
        }
    }

    #[test]
    fn sampled_receiver_views_respect_bounds(seed in 0u64..500) {
        let topo = Arc::new(Topology::uniform(vec![3, 3, 3], 3, 2, 4).unwrap());
        let logits = random_logits(&topo, seed, 5.0);
        let v = logits.sample(&topo, SelectionStreams { seed, step: 1, sample: 0 }).to_vector(&topo);
        for t in 0..3 {
            let links = v.receiver_links(t);
            prop_assert!((1..=2).contains(&links));
        }
    }
}
