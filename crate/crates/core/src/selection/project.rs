use rand::seq::index;

use crate::selection::SelectionVector;

/// Result of repairing a raw selection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Projection {
    pub selection: SelectionVector,
    /// Receivers left with no active link.
    pub starved: Vec<usize>,
}

/// Uniform repair kernel: every transmitter asked for more modality-task
/// slots than its budget keeps a uniformly random subset of `E_k` of them.
/// Receivers whose links all got pruned stay empty and are reported.
pub fn project<R: rand::Rng + ?Sized>(raw: &SelectionVector, rng: &mut R) -> Projection {
    let topo = raw.topology().clone();
    let mut a = raw.clone();
    for k in 0..topo.transmitters() {
        let requested: Vec<(usize, usize)> = (0..topo.receivers())
            .flat_map(|t| (0..topo.modalities(k)).map(move |m| (t, m)))
            .filter(|&(t, m)| raw.get(t, k, m))
            .collect();
        let budget = topo.tx_budget(k);
        if requested.len() <= budget {
            continue;
        }
        for &(t, m) in &requested {
            a.set(t, k, m, false);
        }
        for i in index::sample(rng, requested.len(), budget) {
            let (t, m) = requested[i];
            a.set(t, k, m, true);
        }
    }
    let starved = (0..topo.receivers()).filter(|&t| a.receiver_links(t) == 0).collect();
    Projection { selection: a, starved }
}
